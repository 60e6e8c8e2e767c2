//! Split evaluation and single-image inference.

use misra::mask::NUM_CLASSES;
use misra::metrics::Evaluator;
use misra::preprocess::{input_tensor, SIZE_MULTIPLE};
use misra::{LabelMask, MetricsReport, Misra, RgbImage, Tensor};

use crate::data::batch;
use crate::error::{HarnessError, Result};

/// Images per eval-mode forward.
pub const EVAL_BATCH: usize = 8;

fn check_classes(model: &Misra<f32>) -> Result<()> {
    if model.config.num_classes != NUM_CLASSES {
        return Err(HarnessError::Config(format!(
            "checkpoint predicts {} classes, data has {NUM_CLASSES}",
            model.config.num_classes
        )));
    }
    Ok(())
}

/// Argmax of the final pass over `indices`, scored against their masks.
pub fn evaluate(
    model: &mut Misra<f32>,
    inputs: &[Tensor<f32>],
    masks: &[LabelMask],
    indices: &[usize],
) -> Result<MetricsReport> {
    check_classes(model)?;
    let mut ev = Evaluator::new(NUM_CLASSES);
    for chunk in indices.chunks(EVAL_BATCH) {
        let probs = model.predict(&batch(inputs, chunk)?)?;
        let last = probs.last().expect("at least one pass");
        for (n, &i) in chunk.iter().enumerate() {
            let p = last.index_first(n)?;
            let pred = LabelMask::argmax(&p)?;
            ev.add(&pred, &masks[i], Some(&p))?;
        }
    }
    Ok(ev.report())
}

/// Masks `y^(0..=T)` for one image of any size. The image is zero-padded
/// symmetrically to a multiple of 8 and each mask is cropped back.
pub fn infer_image(model: &mut Misra<f32>, img: &RgbImage) -> Result<Vec<LabelMask>> {
    let (padded, (top, left)) = img.pad_to_multiple(SIZE_MULTIPLE);
    let x = input_tensor::<f32>(&padded, model.config.input_channels())?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let probs = model.predict(&x.reshape(&[1, c, h, w])?)?;
    probs
        .iter()
        .map(|p| {
            let full = LabelMask::argmax(&p.index_first(0)?)?;
            Ok(full.crop(top, left, img.height(), img.width())?)
        })
        .collect()
}
