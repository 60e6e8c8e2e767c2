//! Class weighting and the training objective.
//!
//! Every soft sum runs over the whole batch: for a `[N, C, H, W]` probability
//! map the per-class statistics pool `N * H * W` pixels before the class mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::{one_hot, LabelMask, CLASS_NAMES};
use crate::model::IterationOutputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard used in every ratio.
pub const EPS: f64 = 1e-6;
/// Floor applied to probabilities before the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    Mfb,
    #[default]
    Nmfb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub mode: WeightMode,
    pub values: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self { mode: WeightMode::Uniform, values: vec![1.0; num_classes] }
    }

    /// MFB weights from per-class frequencies: `median(f) / f_c`, optionally rescaled to mean 1.
    pub fn from_frequencies(freq: &[f64], mode: WeightMode) -> Self {
        if mode == WeightMode::Uniform {
            return Self::uniform(freq.len());
        }
        let med = median(freq);
        let mut values: Vec<f64> = freq.iter().map(|f| med / f).collect();
        if mode == WeightMode::Nmfb {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            values.iter_mut().for_each(|v| *v /= mean);
        }
        Self { mode, values }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `f_c` = pixels of class `c` over the pixels of all images that contain `c`.
pub fn class_frequencies(masks: &[LabelMask], num_classes: usize) -> Result<Vec<f64>> {
    let mut class_pixels = vec![0u64; num_classes];
    let mut image_pixels = vec![0u64; num_classes];
    for m in masks {
        m.check_classes(num_classes)?;
        let mut counts = vec![0u64; num_classes];
        for &l in m.labels() {
            counts[l as usize] += 1;
        }
        let total = m.labels().len() as u64;
        for c in 0..num_classes {
            if counts[c] > 0 {
                class_pixels[c] += counts[c];
                image_pixels[c] += total;
            }
        }
    }
    (0..num_classes)
        .map(|c| {
            if class_pixels[c] == 0 {
                let name = CLASS_NAMES.get(c).map_or_else(|| format!("class {c}"), |n| n.to_string());
                return Err(Error::DegenerateFrequency { class: c, name });
            }
            Ok(class_pixels[c] as f64 / image_pixels[c] as f64)
        })
        .collect()
}

pub fn compute_class_weights(masks: &[LabelMask], num_classes: usize, mode: WeightMode) -> Result<ClassWeights> {
    if mode == WeightMode::Uniform {
        return Ok(ClassWeights::uniform(num_classes));
    }
    Ok(ClassWeights::from_frequencies(&class_frequencies(masks, num_classes)?, mode))
}

/// Coefficients of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossCoefficients {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_ftl: f64,
    /// CE weight inside each feedback-iteration term.
    pub lambda_iter_ce: f64,
    pub lambda_iou: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub focal_gamma: f64,
    pub use_ftl: bool,
    pub use_ifl: bool,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            lambda_ce: 10.0,
            lambda_dice: 4.0,
            lambda_ftl: 0.3,
            lambda_iter_ce: 1.0,
            lambda_iou: 1.0,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            focal_gamma: 4.0 / 3.0,
            use_ftl: true,
            use_ifl: true,
        }
    }
}

/// Ground truth placed on a graph as constants.
#[derive(Clone, Copy, Debug)]
pub struct Targets {
    /// `[N, C, H, W]` one-hot labels.
    pub onehot: Var,
    /// One-hot labels scaled by the weight of the true class.
    pub weighted: Var,
    /// `[C]` class weights.
    pub class_weights: Var,
    pub pixels: usize,
}

impl Targets {
    pub fn new<F: Scalar>(g: &mut Graph<F>, masks: &[LabelMask], weights: &ClassWeights) -> Result<Self> {
        let c = weights.values.len();
        let oh = one_hot::<F>(masks, c)?;
        let plane = masks[0].height() * masks[0].width();
        let mut weighted = oh.clone();
        for (i, chunk) in weighted.data_mut().chunks_mut(plane).enumerate() {
            let w = F::lit(weights.values[i % c]);
            chunk.iter_mut().for_each(|v| *v *= w);
        }
        let cw = Tensor::new(&[c], weights.values.iter().map(|&w| F::lit(w)).collect())?;
        Ok(Self {
            onehot: g.constant(oh),
            weighted: g.constant(weighted),
            class_weights: g.constant(cw),
            pixels: masks.len() * plane,
        })
    }
}

fn check_probs<F: Scalar>(g: &Graph<F>, p: Var, t: &Targets) -> Result<()> {
    if g.value(p).shape() != g.value(t.onehot).shape() {
        return Err(Error::dim(
            "loss",
            format!("prediction {:?} vs target {:?}", g.value(p).shape(), g.value(t.onehot).shape()),
        ));
    }
    Ok(())
}

/// `1 - x`.
fn complement<F: Scalar>(g: &mut Graph<F>, x: Var) -> Var {
    let neg = g.scale(x, -F::one());
    g.add_scalar(neg, F::one())
}

/// Weighted cross-entropy on probabilities, `-(1/|Omega|) sum w(y) log p_y`.
pub fn weighted_ce_probs<F: Scalar>(g: &mut Graph<F>, p: Var, t: &Targets) -> Result<Var> {
    check_probs(g, p, t)?;
    let safe = g.clamp_min(p, F::lit(LOG_CLAMP));
    let lp = g.log(safe);
    let picked = g.mul(lp, t.weighted)?;
    let s = g.sum(picked);
    Ok(g.scale(s, F::lit(-1.0 / t.pixels as f64)))
}

/// Weighted cross-entropy on logits.
pub fn weighted_ce<F: Scalar>(g: &mut Graph<F>, z: Var, t: &Targets) -> Result<Var> {
    let p = g.softmax_channel(z)?;
    weighted_ce_probs(g, p, t)
}

/// Per-class soft `(TP, sum p)` as `[C]` vectors, plus the constant `sum y`.
fn soft_counts<F: Scalar>(g: &mut Graph<F>, p: Var, t: &Targets) -> Result<(Var, Var, Var)> {
    check_probs(g, p, t)?;
    let py = g.mul(p, t.onehot)?;
    let tp = g.sum_per_channel(py)?;
    let ps = g.sum_per_channel(p)?;
    let ys = g.sum_per_channel(t.onehot)?;
    Ok((tp, ps, ys))
}

/// `1 - (1/C) sum_c 2 TP_c / (sum p_c + sum y_c + eps)`.
pub fn dice_loss<F: Scalar>(g: &mut Graph<F>, p: Var, t: &Targets) -> Result<Var> {
    let (tp, ps, ys) = soft_counts(g, p, t)?;
    let num = g.scale(tp, F::lit(2.0));
    let den = g.add(ps, ys)?;
    let den = g.add_scalar(den, F::lit(EPS));
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio);
    Ok(complement(g, m))
}

/// `(1/C) sum_c w_c (1 - TI_c)^gamma` with `TI = TP / (TP + alpha FP + beta FN + eps)`.
pub fn focal_tversky<F: Scalar>(
    g: &mut Graph<F>,
    p: Var,
    t: &Targets,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<Var> {
    let (tp, ps, ys) = soft_counts(g, p, t)?;
    let fp = g.sub(ps, tp)?;
    let fn_ = g.sub(ys, tp)?;
    let afp = g.scale(fp, F::lit(alpha));
    let bfn = g.scale(fn_, F::lit(beta));
    let den = g.add(tp, afp)?;
    let den = g.add(den, bfn)?;
    let den = g.add_scalar(den, F::lit(EPS));
    let ti = g.div(tp, den)?;
    let miss = complement(g, ti);
    let miss = g.clamp_min(miss, F::zero());
    let focal = g.powf(miss, F::lit(gamma));
    let weighted = g.mul(focal, t.class_weights)?;
    Ok(g.mean(weighted))
}

/// `(1/C) sum_c TP_c / (sum p_c + sum y_c - TP_c + eps)`.
pub fn soft_miou<F: Scalar>(g: &mut Graph<F>, p: Var, t: &Targets) -> Result<Var> {
    let (tp, ps, ys) = soft_counts(g, p, t)?;
    let den = g.add(ps, ys)?;
    let den = g.sub(den, tp)?;
    let den = g.add_scalar(den, F::lit(EPS));
    let iou = g.div(tp, den)?;
    Ok(g.mean(iou))
}

/// `lambda_ce CE + lambda_dice Dice + lambda_ftl FTL` on one probability map.
/// Returns `(seg, ce, dice, ftl)`; FTL is absent when disabled.
pub fn seg_loss<F: Scalar>(
    g: &mut Graph<F>,
    p: Var,
    t: &Targets,
    k: &LossCoefficients,
) -> Result<(Var, Var, Var, Option<Var>)> {
    let ce = weighted_ce_probs(g, p, t)?;
    let dice = dice_loss(g, p, t)?;
    let a = g.scale(ce, F::lit(k.lambda_ce));
    let b = g.scale(dice, F::lit(k.lambda_dice));
    let mut seg = g.add(a, b)?;
    let ftl = if k.use_ftl {
        let f = focal_tversky(g, p, t, k.tversky_alpha, k.tversky_beta, k.focal_gamma)?;
        let c = g.scale(f, F::lit(k.lambda_ftl));
        seg = g.add(seg, c)?;
        Some(f)
    } else {
        None
    };
    Ok((seg, ce, dice, ftl))
}

/// `sum_t eta_t [lambda_ce CE^(t) + lambda_iou (1 - mIoU^(t))]`.
pub fn ifl<F: Scalar>(g: &mut Graph<F>, probs: &[Var], t: &Targets, eta: &[f64], k: &LossCoefficients) -> Result<Var> {
    if eta.len() != probs.len() {
        return Err(Error::Contract(format!("{} iteration weights for {} passes", eta.len(), probs.len())));
    }
    let mut acc: Option<Var> = None;
    for (&p, &e) in probs.iter().zip(eta) {
        let ce = weighted_ce_probs(g, p, t)?;
        let iou = soft_miou(g, p, t)?;
        let miss = complement(g, iou);
        let a = g.scale(ce, F::lit(k.lambda_iter_ce));
        let b = g.scale(miss, F::lit(k.lambda_iou));
        let term = g.add(a, b)?;
        let term = g.scale(term, F::lit(e));
        acc = Some(match acc {
            Some(s) => g.add(s, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("no passes to supervise".into()))
}

/// Logged loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub dice: f64,
    pub ftl: f64,
    pub seg: f64,
    pub ifl: f64,
    pub total: f64,
    pub coefficients: LossCoefficients,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.dice, self.ftl, self.seg, self.ifl, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L_SEG` on the final pass plus `L_IFL` over all passes. Disabled terms log as zero.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    out: &IterationOutputs,
    t: &Targets,
    eta: &[f64],
    k: &LossCoefficients,
) -> Result<(Var, LossBundle)> {
    let (seg, ce, dice, ftl) = seg_loss(g, out.final_probs(), t, k)?;
    let ifl_var = if k.use_ifl { Some(ifl(g, &out.probs, t, eta, k)?) } else { None };
    let total = match ifl_var {
        Some(i) => g.add(seg, i)?,
        None => seg,
    };
    let val = |g: &Graph<F>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let bundle = LossBundle {
        ce: val(g, Some(ce)),
        dice: val(g, Some(dice)),
        ftl: val(g, ftl),
        seg: val(g, Some(seg)),
        ifl: val(g, ifl_var),
        total: val(g, Some(total)),
        coefficients: k.clone(),
    };
    Ok((total, bundle))
}
