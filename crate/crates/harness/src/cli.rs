//! Subcommands of the `misra` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use misra::archive::TensorArchive;
use misra::imageio::{read_rgb_png, write_gray_png, write_mask_png};
use misra::mask::CLASS_NAMES;
use misra::preprocess::{build_five_channel, SIZE_MULTIPLE};
use misra::synth::{dataset_stats, write_dataset};
use misra::SceneSpec;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, infer_image};
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "misra", version, about = "Thin-structure segmentation: data, training, evaluation, inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset with manifest.json.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        /// Fraction of scenes in the training split.
        #[arg(long, default_value_t = 0.81)]
        split: f64,
    },
    /// Build the five-channel input of an RGB PNG and store it as an MSRA archive.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        /// Output archive with a single `input` entry of shape [5, H, W].
        #[arg(long)]
        out: PathBuf,
        /// Also write the five channels as grayscale PNGs into this directory.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
        /// Zero-pad symmetrically to a multiple of 8 instead of rejecting the size.
        #[arg(long)]
        pad: bool,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Segment one image into an indexed-palette mask PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the mask of every pass; earlier passes go to `<stem>_t<t>.png`.
        #[arg(long)]
        per_iteration: bool,
    },
    /// Per-class pixel fractions of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        split: Split,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("height {h:?}: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width {w:?}: {e}"))?;
    Ok((h, w))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { out, count, seed, size: (height, width), split } => {
            let spec = SceneSpec { seed, height, width, ..SceneSpec::default() };
            spec.validate()?;
            let m = write_dataset(&out, &spec, count, split)?;
            println!("wrote {count} scenes ({} train, {} test) to {}", m.train.len(), m.test.len(), out.display());
        }
        Command::Preprocess { image, out, debug_dir, pad } => preprocess(&image, &out, debug_dir.as_deref(), pad)?,
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let data = Dataset::load(&cfg.data)?;
            let summary = match resume {
                None => train(&cfg, &data)?,
                Some(path) => crate::train::resume(&cfg, &Checkpoint::load(&path)?, &data)?,
            };
            println!("loss log {}; checkpoint {}", summary.csv.display(), summary.final_checkpoint.display());
        }
        Command::Eval { ckpt, data, report, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut model = ck.model()?;
            let data = Dataset::load(&data)?;
            let inputs = data.inputs(model.config.input_channels())?;
            let masks = data.masks(&(0..data.scenes.len()).collect::<Vec<_>>());
            let r = evaluate(&mut model, &inputs, &masks, &data.indices(split))?;
            let text = serde_json::to_string_pretty(&r).map_err(|e| HarnessError::Data(e.to_string()))?;
            std::fs::write(&report, text + "\n")?;
            println!(
                "mcIoU {:.2}  ISI-IoU {:.2}  mDice {:.2}  mAP50 {:.2}  mAP95 {:.2}",
                r.mciou, r.isi_iou, r.mdice, r.map50, r.map95
            );
        }
        Command::Infer { ckpt, image, out, per_iteration } => {
            let mut model = Checkpoint::load(&ckpt)?.model()?;
            let img = read_rgb_png(&image)?;
            let masks = infer_image(&mut model, &img)?;
            let last = masks.len() - 1;
            write_mask_png(&out, &masks[last])?;
            if per_iteration {
                for (t, m) in masks[..last].iter().enumerate() {
                    write_mask_png(iteration_path(&out, t), m)?;
                }
            }
        }
        Command::Stats { data, split } => {
            let data = Dataset::load(&data)?;
            let masks = data.masks(&data.indices(split));
            let s = dataset_stats(&masks);
            #[derive(Serialize)]
            struct ClassStat {
                pixel_fraction: f64,
                scenes_with_class: usize,
            }
            let classes: BTreeMap<&str, ClassStat> = CLASS_NAMES
                .iter()
                .enumerate()
                .map(|(c, n)| {
                    (*n, ClassStat { pixel_fraction: s.pixel_fraction[c], scenes_with_class: s.scenes_with_class[c] })
                })
                .collect();
            let json = serde_json::json!({ "scenes": s.scenes, "classes": classes });
            println!("{}", serde_json::to_string_pretty(&json).map_err(|e| HarnessError::Data(e.to_string()))?);
        }
    }
    Ok(())
}

/// `<stem>_t<t>.<ext>` next to `out`.
pub fn iteration_path(out: &Path, t: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    out.with_file_name(format!("{stem}_t{t}.{ext}"))
}

fn preprocess(image: &Path, out: &Path, debug_dir: Option<&Path>, pad: bool) -> Result<()> {
    let mut img = read_rgb_png(image)?;
    if pad {
        img = img.pad_to_multiple(SIZE_MULTIPLE).0;
    }
    let x = build_five_channel::<f32>(&img)?;
    let mut a = TensorArchive::new();
    a.push("input", x.values.clone())?;
    a.save(out)?;
    if let Some(dir) = debug_dir {
        std::fs::create_dir_all(dir)?;
        let plane = img.height() * img.width();
        for (c, name) in ["r", "g", "b", "erosion", "dilation"].iter().enumerate() {
            let bytes: Vec<u8> = x.values.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            write_gray_png(dir.join(format!("channel{c}_{name}.png")), img.height(), img.width(), &bytes)?;
        }
    }
    Ok(())
}
