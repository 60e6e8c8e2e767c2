//! Segmentation metrics over a split.
//!
//! Semantic scores come from a streaming confusion accumulator. Instance
//! scores treat every 8-connected component of an instrument class as one
//! instance and match predictions to ground truth greedily by mask IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelMask, CLASS_NAMES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MIN_AREA: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub pred: u64,
    pub target: u64,
}

impl ClassCounts {
    pub fn union(&self) -> u64 {
        self.pred + self.target - self.intersection
    }

    fn add(&mut self, o: &ClassCounts) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.target += o.target;
    }
}

/// Running per-class counts, split-wide and per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    totals: Vec<ClassCounts>,
    per_image: Vec<Vec<ClassCounts>>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, totals: vec![ClassCounts::default(); num_classes], per_image: Vec::new() }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn totals(&self) -> &[ClassCounts] {
        &self.totals
    }

    pub fn per_image(&self) -> &[Vec<ClassCounts>] {
        &self.per_image
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim(
                "accumulate",
                format!("prediction {}x{} vs target {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
            ));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        let mut counts = vec![ClassCounts::default(); self.num_classes];
        for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
            counts[p as usize].pred += 1;
            counts[t as usize].target += 1;
            if p == t {
                counts[p as usize].intersection += 1;
            }
        }
        for (tot, c) in self.totals.iter_mut().zip(&counts) {
            tot.add(c);
        }
        self.per_image.push(counts);
        Ok(())
    }

    /// Associative merge; image order follows `self` then `other`.
    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (tot, c) in self.totals.iter_mut().zip(&other.totals) {
            tot.add(c);
        }
        self.per_image.extend(other.per_image.iter().cloned());
    }

    /// Split-wide IoU of class `c` in percent; `None` if the class never
    /// appears in either prediction or ground truth.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let t = &self.totals[c];
        (t.union() > 0).then(|| 100.0 * t.intersection as f64 / t.union() as f64)
    }

    pub fn class_dice(&self, c: usize) -> Option<f64> {
        let t = &self.totals[c];
        (t.pred + t.target > 0).then(|| 100.0 * 2.0 * t.intersection as f64 / (t.pred + t.target) as f64)
    }

    /// Mean IoU over instrument classes (background excluded).
    pub fn mciou(&self) -> f64 {
        mean_defined((1..self.num_classes).map(|c| self.class_iou(c)))
    }

    pub fn mdice(&self) -> f64 {
        mean_defined((1..self.num_classes).map(|c| self.class_dice(c)))
    }

    /// Per class, the mean per-image IoU over images where the class occurs
    /// in prediction or ground truth; then the mean over classes.
    pub fn isi_iou(&self) -> f64 {
        mean_defined((1..self.num_classes).map(|c| {
            mean_opt(self.per_image.iter().filter_map(|img| {
                let k = &img[c];
                (k.union() > 0).then(|| 100.0 * k.intersection as f64 / k.union() as f64)
            }))
        }))
    }
}

fn mean_opt(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean of the defined values, zero when none is defined.
fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> f64 {
    mean_opt(vals.flatten()).unwrap_or(0.0)
}

/// A connected region of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: u8,
    /// Sorted row-major pixel indices.
    pub pixels: Vec<u32>,
    pub score: f64,
}

/// 8-connected components of the pixels labelled `class`, each as sorted indices.
pub fn connected_components(mask: &LabelMask, class: u8) -> Vec<Vec<u32>> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] != class {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i as u32);
            let (y, x) = (i / w, i % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if !seen[j] && labels[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Instrument-class components of at least `min_area` pixels. With `probs`
/// (`[C, H, W]`), each score is the mean class probability over the component;
/// without, scores are 1.
pub fn extract_instances<F: Scalar>(
    mask: &LabelMask,
    probs: Option<&Tensor<F>>,
    num_classes: usize,
    min_area: usize,
) -> Result<Vec<Instance>> {
    let plane = mask.height() * mask.width();
    if let Some(p) = probs {
        if p.shape() != [num_classes, mask.height(), mask.width()] {
            return Err(Error::dim("extract_instances", format!("probabilities {:?} do not match mask", p.shape())));
        }
    }
    let mut out = Vec::new();
    for class in 1..num_classes as u8 {
        for pixels in connected_components(mask, class) {
            if pixels.len() < min_area {
                continue;
            }
            let score = match probs {
                Some(p) => {
                    let d = &p.data()[class as usize * plane..(class as usize + 1) * plane];
                    pixels.iter().map(|&i| d[i as usize].as_f64()).sum::<f64>() / pixels.len() as f64
                }
                None => 1.0,
            };
            out.push(Instance { class, pixels, score });
        }
    }
    Ok(out)
}

/// IoU of two sorted index sets.
pub fn mask_iou(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Area under the precision-recall curve with the precision envelope
/// (all-points interpolation). `hits` lists match outcomes in descending score order.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Mean AP (percent) at IoU threshold `tau` over classes with at least one
/// ground-truth instance. `preds[i]` and `gts[i]` belong to image `i`.
pub fn map_at(preds: &[Vec<Instance>], gts: &[Vec<Instance>], num_classes: usize, tau: f64) -> f64 {
    let mut aps = Vec::new();
    for class in 1..num_classes as u8 {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|i| i.class == class).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, &Instance)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, ps)| ps.iter().filter(|i| i.class == class).map(move |i| (img, i)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, p)| {
                let best = gts[img]
                    .iter()
                    .enumerate()
                    .filter(|(k, g)| g.class == class && !used[img][*k])
                    .map(|(k, g)| (k, mask_iou(&p.pixels, &g.pixels)))
                    .filter(|&(_, iou)| iou >= tau)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((k, _)) => {
                        used[img][k] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        aps.push(average_precision(&hits, num_gt));
    }
    mean_opt(aps.into_iter()).map_or(0.0, |m| 100.0 * m)
}

/// Split-level scores in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// IoU of classes `1..C`; `None` where the class never occurs.
    pub iou_per_class: Vec<Option<f64>>,
    pub mciou: f64,
    pub isi_iou: f64,
    pub mdice: f64,
    pub map50: f64,
    pub map95: f64,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    #[serde(rename = "mcIoU")]
    mciou: f64,
    #[serde(rename = "ISI-IoU")]
    isi_iou: f64,
    #[serde(rename = "mDice")]
    mdice: f64,
    #[serde(rename = "mAP50")]
    map50: f64,
    #[serde(rename = "mAP95")]
    map95: f64,
    per_class: BTreeMap<String, Option<f64>>,
}

impl Serialize for MetricsReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let per_class = self
            .iou_per_class
            .iter()
            .enumerate()
            .map(|(i, v)| (CLASS_NAMES.get(i + 1).map_or_else(|| format!("C{}", i + 1), |n| n.to_string()), *v))
            .collect();
        ReportJson {
            mciou: self.mciou,
            isi_iou: self.isi_iou,
            mdice: self.mdice,
            map50: self.map50,
            map95: self.map95,
            per_class,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricsReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ReportJson::deserialize(d)?;
        let mut iou_per_class = Vec::new();
        for name in CLASS_NAMES.iter().skip(1) {
            let v = r.per_class.get(*name).ok_or_else(|| serde::de::Error::missing_field("per_class entry"))?;
            iou_per_class.push(*v);
        }
        Ok(Self { iou_per_class, mciou: r.mciou, isi_iou: r.isi_iou, mdice: r.mdice, map50: r.map50, map95: r.map95 })
    }
}

/// Collects everything a split report needs, one image at a time.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub acc: ConfusionAccumulator,
    pub pred_instances: Vec<Vec<Instance>>,
    pub gt_instances: Vec<Vec<Instance>>,
    pub min_area: usize,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            acc: ConfusionAccumulator::new(num_classes),
            pred_instances: Vec::new(),
            gt_instances: Vec::new(),
            min_area: DEFAULT_MIN_AREA,
        }
    }

    /// Adds one image; `probs` is the `[C, H, W]` final-pass probability map.
    pub fn add<F: Scalar>(&mut self, pred: &LabelMask, gt: &LabelMask, probs: Option<&Tensor<F>>) -> Result<()> {
        let c = self.acc.num_classes();
        self.acc.accumulate(pred, gt)?;
        self.pred_instances.push(extract_instances(pred, probs, c, self.min_area)?);
        self.gt_instances.push(extract_instances::<f32>(gt, None, c, self.min_area)?);
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let c = self.acc.num_classes();
        MetricsReport {
            iou_per_class: (1..c).map(|k| self.acc.class_iou(k)).collect(),
            mciou: self.acc.mciou(),
            isi_iou: self.acc.isi_iou(),
            mdice: self.acc.mdice(),
            map50: map_at(&self.pred_instances, &self.gt_instances, c, 0.5),
            map95: map_at(&self.pred_instances, &self.gt_instances, c, 0.95),
        }
    }
}
