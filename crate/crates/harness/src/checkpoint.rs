//! Checkpoints: an MSRA tensor archive plus a JSON sidecar.
//!
//! The archive holds every model tensor under its parameter name and the
//! optimizer moments under `adamw.m/<name>` and `adamw.v/<name>`. The sidecar
//! `<stem>.json` sits next to `<stem>.msra`.

use std::path::{Path, PathBuf};

use misra::archive::TensorArchive;
use misra::losses::ClassWeights;
use misra::model::ModelConfig;
use misra::rng::SeededRng;
use misra::Misra;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::optim::AdamW;

pub const SIDECAR_VERSION: u32 = 1;

/// Scalar optimizer state; the moment tensors live in the archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub version: u32,
    pub config: TrainConfig,
    pub model: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: OptimizerState,
    /// Shuffling generator, positioned after the last completed epoch.
    pub rng: SeededRng,
    pub class_weights: ClassWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub archive: TensorArchive,
    pub sidecar: Sidecar,
}

/// `<stem>.msra` and `<stem>.json` for a path given with either extension or none.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("msra"), path.with_extension("json"))
}

fn moment_names(kind: char, name: &str) -> String {
    format!("adamw.{kind}/{name}")
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &Misra<f32>,
        optimizer: &AdamW<f32>,
        rng: &SeededRng,
        epoch: usize,
        class_weights: &ClassWeights,
    ) -> Result<Self> {
        let mut archive = model.params.to_archive();
        for (i, id) in model.params.trainable_ids().into_iter().enumerate() {
            let name = &model.params.get(id).name;
            archive.push(moment_names('m', name), optimizer.m[i].clone())?;
            archive.push(moment_names('v', name), optimizer.v[i].clone())?;
        }
        let sidecar = Sidecar {
            version: SIDECAR_VERSION,
            config: config.clone(),
            model: model.config.clone(),
            epoch,
            optimizer: OptimizerState {
                lr: optimizer.lr,
                weight_decay: optimizer.weight_decay,
                beta1: optimizer.beta1,
                beta2: optimizer.beta2,
                eps: optimizer.eps,
                step: optimizer.step,
            },
            rng: rng.clone(),
            class_weights: class_weights.clone(),
        };
        Ok(Self { archive, sidecar })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (bin, json) = checkpoint_paths(path);
        if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.archive.save(&bin)?;
        let text = serde_json::to_string_pretty(&self.sidecar).map_err(|e| HarnessError::Data(e.to_string()))?;
        std::fs::write(json, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (bin, json) = checkpoint_paths(path);
        let archive = TensorArchive::load(&bin).map_err(|e| HarnessError::Data(format!("{}: {e}", bin.display())))?;
        let text =
            std::fs::read_to_string(&json).map_err(|e| HarnessError::Data(format!("{}: {e}", json.display())))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", json.display())))?;
        if sidecar.version != SIDECAR_VERSION {
            return Err(HarnessError::Data(format!("unsupported sidecar version {}", sidecar.version)));
        }
        Ok(Self { archive, sidecar })
    }

    /// The network with archived weights and running statistics.
    pub fn model(&self) -> Result<Misra<f32>> {
        let mut model = Misra::new(self.sidecar.model.clone(), self.sidecar.config.seed)?;
        model.params.load_archive(&self.archive)?;
        Ok(model)
    }

    /// Optimizer with archived moments for `model`'s trainable tensors.
    pub fn optimizer(&self, model: &Misra<f32>) -> Result<AdamW<f32>> {
        let s = &self.sidecar.optimizer;
        let mut opt = AdamW::new(&model.params, s.lr, s.weight_decay);
        opt.beta1 = s.beta1;
        opt.beta2 = s.beta2;
        opt.eps = s.eps;
        opt.step = s.step;
        for (i, id) in model.params.trainable_ids().into_iter().enumerate() {
            let name = &model.params.get(id).name;
            for (kind, slot) in [('m', &mut opt.m[i]), ('v', &mut opt.v[i])] {
                let key = moment_names(kind, name);
                let t =
                    self.archive.get(&key).ok_or_else(|| HarnessError::Data(format!("checkpoint lacks {key:?}")))?;
                if t.shape() != slot.shape() {
                    return Err(HarnessError::Data(format!("{key:?} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(opt)
    }
}
