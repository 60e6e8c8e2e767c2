//! Loading a generated dataset directory into memory.

use std::path::{Path, PathBuf};

use misra::mask::NUM_CLASSES;
use misra::preprocess::{input_tensor, InputChannels};
use misra::synth::{read_scene, Manifest};
use misra::{LabelMask, LabeledScene, Tensor};

use crate::error::{HarnessError, Result};

/// Which part of the manifest to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(format!("unknown split {other:?} (train, test, all)")),
        }
    }
}

/// A dataset directory with every scene decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Indexed by scene id.
    pub scenes: Vec<LabeledScene>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
        let mut scenes = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let scene = read_scene(dir, i).map_err(|e| HarnessError::Data(format!("scene {i}: {e}")))?;
            scene.mask.check_classes(NUM_CLASSES)?;
            scenes.push(scene);
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, scenes })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.manifest.train.clone(),
            Split::Test => self.manifest.test.clone(),
            Split::All => (0..self.scenes.len()).collect(),
        }
    }

    pub fn masks(&self, indices: &[usize]) -> Vec<LabelMask> {
        indices.iter().map(|&i| self.scenes[i].mask.clone()).collect()
    }

    /// Network inputs `[C, H, W]` for every scene.
    pub fn inputs(&self, channels: InputChannels) -> Result<Vec<Tensor<f32>>> {
        self.scenes.iter().map(|s| input_tensor::<f32>(&s.image, channels).map_err(HarnessError::from)).collect()
    }
}

/// Stacks `[C, H, W]` items into an `[N, C, H, W]` batch.
pub fn batch(inputs: &[Tensor<f32>], indices: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = indices.iter().map(|&i| inputs[i].clone()).collect();
    Ok(Tensor::stack(&items)?)
}
