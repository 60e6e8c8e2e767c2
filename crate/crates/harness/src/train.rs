//! Deterministic single-threaded training loop.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use misra::losses::{compute_class_weights, total_loss, ClassWeights, LossCoefficients, Targets};
use misra::mask::NUM_CLASSES;
use misra::model::{iteration_weights, Mode};
use misra::rng::SeededRng;
use misra::{Binding, Graph, LabelMask, LossBundle, Misra, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{batch, Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::optim::{clip_global_norm, global_norm, AdamW};

pub const CSV_HEADER: &str = "step,L_CE,L_Dice,L_FTL,L_SEG,L_IFL,L_total";

/// Stream id of the shuffling generator derived from the config seed.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBundle,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.step, l.ce, l.dice, l.ftl, l.seg, l.ifl, l.total)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Misra<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: usize,
    pub class_weights: ClassWeights,
    coefficients: LossCoefficients,
    eta: Vec<f64>,
}

impl Trainer {
    /// Fresh model; class weights come from the training masks.
    pub fn new(config: TrainConfig, train_masks: &[LabelMask]) -> Result<Self> {
        config.validate()?;
        let class_weights = compute_class_weights(train_masks, NUM_CLASSES, config.class_weight_mode)?;
        let model = Misra::new(config.model_config(), config.seed)?;
        let optimizer = AdamW::new(&model.params, config.lr, config.weight_decay);
        let rng = SeededRng::for_stream(config.seed, SHUFFLE_STREAM);
        Ok(Self::assemble(config, model, optimizer, rng, 0, class_weights))
    }

    /// Resumes from a checkpoint exactly where it stopped.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let optimizer = ckpt.optimizer(&model)?;
        let s = &ckpt.sidecar;
        Ok(Self::assemble(s.config.clone(), model, optimizer, s.rng.clone(), s.epoch, s.class_weights.clone()))
    }

    fn assemble(
        config: TrainConfig,
        model: Misra<f32>,
        optimizer: AdamW<f32>,
        rng: SeededRng,
        epoch: usize,
        class_weights: ClassWeights,
    ) -> Self {
        let coefficients = config.loss_coefficients();
        let eta = iteration_weights(model.config.effective_iterations(), config.w);
        Self { config, model, optimizer, rng, epoch, class_weights, coefficients, eta }
    }

    /// Forward, loss, backward and one optimizer update on a batch.
    pub fn step(&mut self, x: Tensor<f32>, masks: &[LabelMask]) -> Result<StepRecord> {
        let mut g = Graph::new();
        let mut binding = Binding::new(&self.model.params, true);
        let xv = g.constant(x);
        let out = self.model.forward(&mut g, &mut binding, xv, Mode::Train)?;
        let targets = Targets::new(&mut g, masks, &self.class_weights)?;
        let (loss, bundle) = total_loss(&mut g, &out, &targets, &self.eta, &self.coefficients)?;
        let step = self.optimizer.step + 1;
        if !bundle.is_finite() {
            return Err(HarnessError::Numeric(format!(
                "non-finite loss at epoch {} step {step}: {bundle:?}",
                self.epoch + 1
            )));
        }
        g.backward(loss)?;
        let mut grads = binding.grads(&g, &self.model.params);
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(HarnessError::Numeric(format!(
                "non-finite gradient for {:?} at step {step}",
                self.model.params.get(*id).name
            )));
        }
        let (grad_norm, clipped) = if self.config.grad_clip > 0.0 {
            let n = clip_global_norm(&mut grads, self.config.grad_clip);
            (n, n > self.config.grad_clip)
        } else {
            (global_norm(&grads), false)
        };
        if clipped {
            log::info!("step {step}: gradient norm {grad_norm:.4} clipped to {}", self.config.grad_clip);
        }
        self.optimizer.update(&mut self.model.params, &grads)?;
        Ok(StepRecord { step, epoch: self.epoch + 1, loss: bundle, grad_norm, clipped })
    }

    /// One shuffled pass over `train`; the last batch may be short.
    pub fn run_epoch(
        &mut self,
        inputs: &[Tensor<f32>],
        masks: &[LabelMask],
        train: &[usize],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        let mut order = train.to_vec();
        self.rng.shuffle(&mut order);
        for chunk in order.chunks(self.config.batch_size) {
            let x = batch(inputs, chunk)?;
            let m: Vec<LabelMask> = chunk.iter().map(|&i| masks[i].clone()).collect();
            let rec = self.step(x, &m)?;
            on_step(&rec)?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.config, &self.model, &self.optimizer, &self.rng, self.epoch, &self.class_weights)
    }
}

/// What a finished run left on disk.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub csv: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Checkpoint path for an epoch inside the run directory.
pub fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:03}.msra"))
}

/// Trains on the dataset's training split, writing `loss.csv`, per-epoch
/// checkpoints and `final.msra` into `config.out`.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainSummary> {
    config.validate()?;
    let train_masks = data.masks(&data.indices(Split::Train));
    let trainer = Trainer::new(config.clone(), &train_masks)?;
    std::fs::create_dir_all(&config.out)?;
    let csv = config.out.join("loss.csv");
    std::fs::write(&csv, format!("{CSV_HEADER}\n"))?;
    run(trainer, data)
}

/// Continues a checkpointed run up to `config.epochs`. Rows of `loss.csv`
/// written after the checkpoint are dropped first.
pub fn resume(config: &TrainConfig, ckpt: &Checkpoint, data: &Dataset) -> Result<TrainSummary> {
    let mut trainer = Trainer::resume(ckpt)?;
    trainer.config.epochs = config.epochs;
    trainer.config.out = config.out.clone();
    trainer.config.validate()?;
    std::fs::create_dir_all(&config.out)?;
    let csv = config.out.join("loss.csv");
    let done = trainer.optimizer.step;
    let mut kept = format!("{CSV_HEADER}\n");
    if let Ok(text) = std::fs::read_to_string(&csv) {
        for line in text.lines().skip(1) {
            match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(step) if step <= done => {
                    kept.push_str(line);
                    kept.push('\n');
                }
                _ => {}
            }
        }
    }
    std::fs::write(&csv, kept)?;
    run(trainer, data)
}

fn run(mut trainer: Trainer, data: &Dataset) -> Result<TrainSummary> {
    let config = trainer.config.clone();
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(HarnessError::Data("training split is empty".into()));
    }
    let masks: Vec<LabelMask> = data.scenes.iter().map(|s| s.mask.clone()).collect();
    let inputs = data.inputs(trainer.model.config.input_channels())?;
    log::info!(
        "training {} parameters on {} scenes from epoch {}; class weights {:?}",
        trainer.model.params.trainable_count(),
        train.len(),
        trainer.epoch + 1,
        trainer.class_weights.values
    );

    let csv = config.out.join("loss.csv");
    let mut w = BufWriter::new(OpenOptions::new().append(true).open(&csv)?);
    let mut records = Vec::new();
    let final_checkpoint = config.out.join("final.msra");
    while trainer.epoch < config.epochs {
        let start = records.len();
        trainer.run_epoch(&inputs, &masks, &train, |rec| {
            writeln!(w, "{}", rec.csv_row())?;
            records.push(rec.clone());
            Ok(())
        })?;
        w.flush()?;
        let epoch = trainer.epoch;
        let mean = records[start..].iter().map(|r| r.loss.total).sum::<f64>() / (records.len() - start) as f64;
        log::info!("epoch {epoch}/{}: mean L_total {mean:.5}", config.epochs);
        let ckpt = trainer.checkpoint()?;
        if config.checkpoint_every_epoch || epoch == config.epochs {
            ckpt.save(&epoch_checkpoint(&config.out, epoch))?;
        }
        if epoch == config.epochs {
            ckpt.save(&final_checkpoint)?;
        }
    }
    Ok(TrainSummary { records, csv, final_checkpoint })
}
