//! Objective terms against direct per-pixel summation, closed forms and finite differences.

use misra::gradcheck::GradCheck;
use misra::losses::{
    compute_class_weights, dice_loss, focal_tversky, ifl, seg_loss, soft_miou, total_loss, weighted_ce,
    weighted_ce_probs, ClassWeights, LossCoefficients, Targets, WeightMode,
};
use misra::model::{iteration_weights, IterationOutputs};
use misra::rng::SeededRng;
use misra::{Graph, LabelMask, Tensor};
use proptest::prelude::*;

type LossFn = fn(&mut Graph<f64>, misra::Var, &Targets) -> misra::Var;

const EPS: f64 = 1e-6;

struct Case {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    /// `[N, C, H, W]` probabilities.
    p: Vec<f64>,
    masks: Vec<LabelMask>,
    weights: Vec<f64>,
}

impl Case {
    fn random(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Self {
        let mut r = SeededRng::new(seed);
        let mut p = vec![0.0; n * c * h * w];
        for b in 0..n {
            for i in 0..h * w {
                let z: Vec<f64> = (0..c).map(|_| r.range(-3.0, 3.0)).collect();
                let s: f64 = z.iter().map(|v| v.exp()).sum();
                for k in 0..c {
                    p[(b * c + k) * h * w + i] = z[k].exp() / s;
                }
            }
        }
        let masks =
            (0..n).map(|_| LabelMask::new(h, w, (0..h * w).map(|_| r.below(c) as u8).collect()).unwrap()).collect();
        let weights = (0..c).map(|_| r.range(0.2, 2.0)).collect();
        Self { n, c, h, w, p, masks, weights }
    }

    fn prob(&self, b: usize, k: usize, i: usize) -> f64 {
        self.p[(b * self.c + k) * self.h * self.w + i]
    }

    fn label(&self, b: usize, i: usize) -> usize {
        self.masks[b].labels()[i] as usize
    }

    fn class_weights(&self) -> ClassWeights {
        ClassWeights { mode: WeightMode::Mfb, values: self.weights.clone() }
    }

    fn tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.n, self.c, self.h, self.w], self.p.clone()).unwrap()
    }

    /// Soft `(TP, sum p, sum y)` per class.
    fn counts(&self) -> Vec<(f64, f64, f64)> {
        (0..self.c)
            .map(|k| {
                let mut acc = (0.0, 0.0, 0.0);
                for b in 0..self.n {
                    for i in 0..self.h * self.w {
                        let p = self.prob(b, k, i);
                        let y = (self.label(b, i) == k) as u8 as f64;
                        acc.0 += p * y;
                        acc.1 += p;
                        acc.2 += y;
                    }
                }
                acc
            })
            .collect()
    }

    fn ce(&self) -> f64 {
        let mut s = 0.0;
        for b in 0..self.n {
            for i in 0..self.h * self.w {
                let y = self.label(b, i);
                s -= self.weights[y] * self.prob(b, y, i).max(1e-12).ln();
            }
        }
        s / (self.n * self.h * self.w) as f64
    }

    fn dice(&self) -> f64 {
        let terms: f64 = self.counts().iter().map(|(tp, ps, ys)| 2.0 * tp / (ps + ys + EPS)).sum();
        1.0 - terms / self.c as f64
    }

    fn ftl(&self, alpha: f64, beta: f64, gamma: f64) -> f64 {
        let s: f64 = self
            .counts()
            .iter()
            .zip(&self.weights)
            .map(|((tp, ps, ys), w)| {
                let ti = tp / (tp + alpha * (ps - tp) + beta * (ys - tp) + EPS);
                w * (1.0 - ti).max(0.0).powf(gamma)
            })
            .sum();
        s / self.c as f64
    }

    fn miou(&self) -> f64 {
        let s: f64 = self.counts().iter().map(|(tp, ps, ys)| tp / (ps + ys - tp + EPS)).sum();
        s / self.c as f64
    }
}

fn eval(case: &Case, f: impl Fn(&mut Graph<f64>, misra::Var, &Targets) -> misra::Var) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(case.tensor());
    let t = Targets::new(&mut g, &case.masks, &case.class_weights()).unwrap();
    let v = f(&mut g, p, &t);
    g.value(v).item()
}

fn shapes(seed: u64) -> (usize, usize, usize, usize) {
    (1 + seed as usize % 3, 2 + seed as usize % 5, 2 + seed as usize % 4, 3 + (seed as usize / 3) % 4)
}

#[test]
fn every_term_matches_direct_summation() {
    let k = LossCoefficients::default();
    for seed in 0..120 {
        let (n, c, h, w) = shapes(seed);
        let case = Case::random(seed, n, c, h, w);
        let ce = eval(&case, |g, p, t| weighted_ce_probs(g, p, t).unwrap());
        assert!((ce - case.ce()).abs() < 1e-6 * case.ce().max(1.0), "CE seed {seed}");
        let dice = eval(&case, |g, p, t| dice_loss(g, p, t).unwrap());
        assert!((dice - case.dice()).abs() < 1e-6, "Dice seed {seed}");
        let ftl = eval(&case, |g, p, t| focal_tversky(g, p, t, 0.3, 0.7, 4.0 / 3.0).unwrap());
        assert!((ftl - case.ftl(0.3, 0.7, 4.0 / 3.0)).abs() < 1e-6, "FTL seed {seed}");
        let miou = eval(&case, |g, p, t| soft_miou(g, p, t).unwrap());
        assert!((miou - case.miou()).abs() < 1e-6, "mIoU seed {seed}");
        let seg = eval(&case, |g, p, t| seg_loss(g, p, t, &k).unwrap().0);
        let want = 10.0 * case.ce() + 4.0 * case.dice() + 0.3 * case.ftl(0.3, 0.7, 4.0 / 3.0);
        assert!((seg - want).abs() < 1e-6 * want.max(1.0), "SEG seed {seed}");
    }
}

#[test]
fn iteration_loss_matches_weighted_sum_of_pass_terms() {
    let k = LossCoefficients::default();
    for seed in 0..100 {
        let (n, c, h, w) = shapes(seed);
        let passes: Vec<Case> = (0..4)
            .map(|t| {
                let mut case = Case::random(1000 + seed * 4 + t, n, c, h, w);
                case.masks = Case::random(seed, n, c, h, w).masks;
                case.weights = Case::random(seed, n, c, h, w).weights;
                case
            })
            .collect();
        let eta = iteration_weights(3, 0.1);
        let want: f64 = passes.iter().zip(&eta).map(|(p, e)| e * (p.ce() + 1.0 - p.miou())).sum();
        let mut g = Graph::new();
        let probs: Vec<_> = passes.iter().map(|p| g.constant(p.tensor())).collect();
        let t = Targets::new(&mut g, &passes[0].masks, &passes[0].class_weights()).unwrap();
        let got = ifl(&mut g, &probs, &t, &eta, &k).unwrap();
        assert!((g.value(got).item() - want).abs() < 1e-6 * want.max(1.0), "seed {seed}");
        assert!(ifl(&mut g, &probs[..3], &t, &eta, &k).is_err());
    }
}

#[test]
fn single_pass_iteration_loss() {
    let case = Case::random(5, 2, 3, 4, 4);
    let v = eval(&case, |g, p, t| ifl(g, &[p], t, &[0.1], &LossCoefficients::default()).unwrap());
    assert!((v - 0.1 * (case.ce() + 1.0 - case.miou())).abs() < 1e-9);
}

fn one_hot_case(labels: &[u8], pred: &[u8], c: usize) -> Case {
    let n = labels.len();
    let mut p = vec![0.0; c * n];
    for (i, &l) in pred.iter().enumerate() {
        p[l as usize * n + i] = 1.0;
    }
    Case { n: 1, c, h: 1, w: n, p, masks: vec![LabelMask::new(1, n, labels.to_vec()).unwrap()], weights: vec![1.0; c] }
}

#[test]
fn closed_forms() {
    let labels = [0, 1, 1, 0, 1, 0];
    let perfect = one_hot_case(&labels, &labels, 2);
    let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
    let disjoint = one_hot_case(&labels, &flipped, 2);
    assert!(eval(&perfect, |g, p, t| dice_loss(g, p, t).unwrap()) <= 1e-6);
    assert!((eval(&disjoint, |g, p, t| dice_loss(g, p, t).unwrap()) - 1.0).abs() < 1e-12);
    let ftl = |c: &Case| eval(c, |g, p, t| focal_tversky(g, p, t, 0.3, 0.7, 4.0 / 3.0).unwrap());
    assert!(ftl(&perfect) <= 1e-6);
    assert!((ftl(&disjoint) - 1.0).abs() < 1e-12);
    assert!((eval(&perfect, |g, p, t| soft_miou(g, p, t).unwrap()) - 1.0).abs() < 1e-6);
    assert!(eval(&perfect, |g, p, t| seg_loss(g, p, t, &LossCoefficients::default()).unwrap().0) <= 1e-5);

    // Uniform prediction on one background pixel, C = 2: IoU_0 = 0.5 / 1, IoU_1 = 0.
    let mut single = one_hot_case(&[0], &[0], 2);
    single.p = vec![0.5, 0.5];
    let m = eval(&single, |g, p, t| soft_miou(g, p, t).unwrap());
    assert!((m - 0.5 * (0.5 / (1.0 + EPS) + 0.0)).abs() < 1e-12);

    // Uniform logits, uniform weights, C = 7.
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 7, 3, 3]));
    let masks = vec![LabelMask::new(3, 3, (0..9).map(|i| (i % 7) as u8).collect()).unwrap()];
    let t = Targets::new(&mut g, &masks, &ClassWeights::uniform(7)).unwrap();
    let ce = weighted_ce(&mut g, z, &t).unwrap();
    assert!((g.value(ce).item() - 7f64.ln()).abs() < 1e-12);

    // Confident correct logits.
    let mut zt = Tensor::<f64>::zeros(&[1, 7, 3, 3]);
    for i in 0..9 {
        zt.data_mut()[(i % 7) * 9 + i] = 25.0;
    }
    let z = g.constant(zt);
    let ce = weighted_ce(&mut g, z, &t).unwrap();
    assert!(g.value(ce).item() < 1e-6);
}

#[test]
fn seg_is_linear_in_components() {
    let k = LossCoefficients { use_ftl: true, ..LossCoefficients::default() };
    assert!((k.lambda_ce * 0.5 + k.lambda_dice * 0.2 + k.lambda_ftl * 0.1 - 5.83).abs() < 1e-12);
    let case = Case::random(3, 2, 4, 4, 4);
    let mut g = Graph::new();
    let p = g.constant(case.tensor());
    let t = Targets::new(&mut g, &case.masks, &case.class_weights()).unwrap();
    let (seg, ce, dice, ftl) = seg_loss(&mut g, p, &t, &k).unwrap();
    let want = 10.0 * g.value(ce).item() + 4.0 * g.value(dice).item() + 0.3 * g.value(ftl.unwrap()).item();
    assert!((g.value(seg).item() - want).abs() < 1e-12);
    let off = LossCoefficients { use_ftl: false, ..k };
    assert!(seg_loss(&mut g, p, &t, &off).unwrap().3.is_none());
}

fn outputs_from(g: &mut Graph<f64>, probs: &[Tensor<f64>]) -> IterationOutputs {
    let vars: Vec<_> = probs.iter().map(|p| g.constant(p.clone())).collect();
    IterationOutputs { features: vec![], skips: vec![], decoded: vec![], logits: vars.clone(), probs: vars }
}

#[test]
fn total_is_seg_plus_iteration_loss() {
    let case = Case::random(9, 2, 3, 4, 4);
    let other = Case::random(10, 2, 3, 4, 4);
    let eta = iteration_weights(1, 0.1);
    let k = LossCoefficients::default();
    let mut g = Graph::new();
    let out = outputs_from(&mut g, &[other.tensor(), case.tensor()]);
    let t = Targets::new(&mut g, &case.masks, &case.class_weights()).unwrap();
    let (total, b) = total_loss(&mut g, &out, &t, &eta, &k).unwrap();
    assert!((b.seg + b.ifl - b.total).abs() < 1e-12);
    assert_eq!(g.value(total).item(), b.total);
    assert_eq!(b.coefficients, k);
    let no_ifl = LossCoefficients { use_ifl: false, use_ftl: false, ..k };
    let (_, b) = total_loss(&mut g, &out, &t, &eta, &no_ifl).unwrap();
    assert_eq!((b.ifl, b.ftl), (0.0, 0.0));
    assert_eq!(b.total, b.seg);

    let labels = [0u8, 1, 2, 1, 0, 2];
    let perfect = one_hot_case(&labels, &labels, 3);
    let mut g = Graph::new();
    let out = outputs_from(&mut g, &[perfect.tensor(), perfect.tensor()]);
    let t = Targets::new(&mut g, &perfect.masks, &perfect.class_weights()).unwrap();
    let (_, b) = total_loss(&mut g, &out, &t, &eta, &k).unwrap();
    assert!(b.total <= 1e-4, "{b:?}");
}

#[test]
fn gradients_of_every_term() {
    let case = Case::random(12, 2, 3, 4, 4);
    let logits = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 37) % 11) as f64 * 0.3 - 1.5);
    let weights = case.class_weights();
    let masks = case.masks.clone();
    type Build = fn(&mut Graph<f64>, misra::Var, &Targets) -> misra::Var;
    let terms: [(&str, Build); 6] = [
        ("ce", |g, p, t| weighted_ce_probs(g, p, t).unwrap()),
        ("dice", |g, p, t| dice_loss(g, p, t).unwrap()),
        ("ftl", |g, p, t| focal_tversky(g, p, t, 0.3, 0.7, 4.0 / 3.0).unwrap()),
        ("miou", |g, p, t| soft_miou(g, p, t).unwrap()),
        ("seg", |g, p, t| seg_loss(g, p, t, &LossCoefficients::default()).unwrap().0),
        ("ifl", |g, p, t| ifl(g, &[p, p], t, &[0.1, 0.2], &LossCoefficients::default()).unwrap()),
    ];
    for (name, build) in terms {
        let rep = GradCheck { step: 1e-6, floor: 1e-6 }
            .check(std::slice::from_ref(&logits), |g, v| {
                let p = g.softmax_channel(v[0])?;
                let t = Targets::new(g, &masks, &weights)?;
                Ok(build(g, p, &t))
            })
            .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{name}: {rep:?}");
    }
}

#[test]
fn equal_frequencies_give_unit_weights() {
    let m = LabelMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    for mode in [WeightMode::Mfb, WeightMode::Nmfb] {
        assert_eq!(compute_class_weights(std::slice::from_ref(&m), 2, mode).unwrap().values, vec![1.0, 1.0]);
    }
    assert_eq!(compute_class_weights(&[m], 2, WeightMode::Uniform).unwrap().values, vec![1.0, 1.0]);
}

/// Applies the class permutation `perm` to labels, probability planes and weights.
fn permuted(case: &Case, perm: &[usize]) -> Case {
    let plane = case.h * case.w;
    let mut p = case.p.clone();
    for b in 0..case.n {
        for (k, &to) in perm.iter().enumerate() {
            let src = (b * case.c + k) * plane;
            let dst = (b * case.c + to) * plane;
            p[dst..dst + plane].copy_from_slice(&case.p[src..src + plane]);
        }
    }
    let masks = case
        .masks
        .iter()
        .map(|m| {
            LabelMask::new(m.height(), m.width(), m.labels().iter().map(|&l| perm[l as usize] as u8).collect()).unwrap()
        })
        .collect();
    let mut weights = vec![0.0; case.c];
    for k in 0..case.c {
        weights[perm[k]] = case.weights[k];
    }
    Case { p, masks, weights, ..*case }
}

/// Moves pixel `i` to `perm[i]` in every plane and mask.
fn pixel_permuted(case: &Case, perm: &[usize]) -> Case {
    let plane = case.h * case.w;
    let mut p = case.p.clone();
    for chunk in 0..case.n * case.c {
        for i in 0..plane {
            p[chunk * plane + perm[i]] = case.p[chunk * plane + i];
        }
    }
    let masks = case
        .masks
        .iter()
        .map(|m| {
            let mut l = vec![0u8; plane];
            for i in 0..plane {
                l[perm[i]] = m.labels()[i];
            }
            LabelMask::new(m.height(), m.width(), l).unwrap()
        })
        .collect();
    Case { p, masks, weights: case.weights.clone(), ..*case }
}

proptest! {
    #[test]
    fn losses_are_finite_and_nonnegative(seed in any::<u64>()) {
        let (n, c, h, w) = shapes(seed % 1000);
        let case = Case::random(seed, n, c, h, w);
        for v in [case.ce(), case.dice(), case.ftl(0.3, 0.7, 4.0 / 3.0), 1.0 - case.miou()] {
            prop_assert!(v.is_finite() && v >= -1e-12);
        }
        let v = eval(&case, |g, p, t| seg_loss(g, p, t, &LossCoefficients::default()).unwrap().0);
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn class_relabeling_leaves_losses_unchanged(seed in any::<u64>()) {
        let case = Case::random(seed, 2, 4, 3, 3);
        let mut perm: Vec<usize> = (0..4).collect();
        SeededRng::new(seed ^ 1).shuffle(&mut perm);
        let moved = permuted(&case, &perm);
        let builds: [LossFn; 3] = [
            |g, p, t| weighted_ce_probs(g, p, t).unwrap(),
            |g, p, t| dice_loss(g, p, t).unwrap(),
            |g, p, t| focal_tversky(g, p, t, 0.3, 0.7, 4.0 / 3.0).unwrap(),
        ];
        for build in builds {
            prop_assert!((eval(&case, build) - eval(&moved, build)).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_shuffle_leaves_overlap_losses_unchanged(seed in any::<u64>()) {
        let case = Case::random(seed, 2, 3, 4, 4);
        let mut perm: Vec<usize> = (0..16).collect();
        SeededRng::new(seed ^ 2).shuffle(&mut perm);
        let moved = pixel_permuted(&case, &perm);
        let d = |c: &Case| eval(c, |g, p, t| dice_loss(g, p, t).unwrap());
        let f = |c: &Case| eval(c, |g, p, t| focal_tversky(g, p, t, 0.3, 0.7, 4.0 / 3.0).unwrap());
        prop_assert!((d(&case) - d(&moved)).abs() < 1e-9);
        prop_assert!((f(&case) - f(&moved)).abs() < 1e-9);
    }

    #[test]
    fn normalized_weights_have_unit_mean(seed in any::<u64>(), c in 2usize..9) {
        let mut r = SeededRng::new(seed);
        let freq: Vec<f64> = (0..c).map(|_| r.range(1e-4, 1.0)).collect();
        let w = ClassWeights::from_frequencies(&freq, WeightMode::Nmfb);
        prop_assert!((w.values.iter().sum::<f64>() / c as f64 - 1.0).abs() < 1e-6);
        prop_assert!(w.values.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn worse_pass_raises_iteration_loss(seed in any::<u64>(), t in 0usize..4, shrink in 0.05f64..0.95) {
        let base: Vec<Case> = (0..4).map(|k| Case::random(seed.wrapping_add(k), 1, 3, 3, 3)).collect();
        let masks = base[0].masks.clone();
        let weights = ClassWeights::uniform(3);
        let k = LossCoefficients { lambda_iou: 0.0, ..LossCoefficients::default() };
        let eta = iteration_weights(3, 0.1);
        let loss = |cases: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let probs: Vec<_> = cases.iter().map(|p| g.constant(p.clone())).collect();
            let tg = Targets::new(&mut g, &masks, &weights).unwrap();
            let v = ifl(&mut g, &probs, &tg, &eta, &k).unwrap();
            g.value(v).item()
        };
        let tensors: Vec<Tensor<f64>> = base.iter().map(|c| c.tensor()).collect();
        // Shrink the true-class probability at one pixel and spread the loss elsewhere.
        let mut worse = tensors.clone();
        let y = masks[0].labels()[4] as usize;
        let p = &mut worse[t].data_mut();
        let old = p[y * 9 + 4];
        p[y * 9 + 4] = old * shrink;
        for c in (0..3).filter(|&c| c != y) {
            p[c * 9 + 4] += old * (1.0 - shrink) / 2.0;
        }
        prop_assert!(loss(&worse) > loss(&tensors));
    }
}
