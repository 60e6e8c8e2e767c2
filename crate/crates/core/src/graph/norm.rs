use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance over `N * H * W`.
    pub var: Vec<F>,
    pub count: usize,
}

impl<F: Scalar> Graph<F> {
    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(input).dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batchnorm2d",
                    format!("{name} shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch normalization over `(N, H, W)` per channel.
    pub fn batchnorm2d_train(&mut self, input: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let (n, c, hw) = self.check_affine(input, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return Err(Error::DegenerateStatistics {
                op: "batchnorm2d",
                detail: format!("{count} value(s) per channel; training statistics need at least 2"),
            });
        }
        let x = self.value(input).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let inv_count = F::one() / F::lit(count as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for b in 0..n {
                s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<F>();
            }
            let m = s * inv_count;
            let mut q = F::zero();
            for b in 0..n {
                for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q * inv_count;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let out = Tensor::new(self.value(input).shape(), out)?;
        let stats = BatchStats { mean, var, count };
        let v = self.push(out, Op::BatchNorm { input, gamma, beta, xhat, inv_std }, &[input, gamma, beta]);
        Ok((v, stats))
    }

    /// Inference-mode normalization with fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        let (n, c, hw) = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm2d", format!("running statistics do not cover {c} channels")));
        }
        let x = self.value(input).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut out = vec![F::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    out[i] = (x[i] - running_mean[ch]) * inv_std[ch] * gv[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::new(self.value(input).shape(), out)?;
        let mean = running_mean.to_vec();
        Ok(self.push(out, Op::BatchNormEval { input, gamma, beta, mean, inv_std }, &[input, gamma, beta]))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batchnorm_backward(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: &[F],
        inv_std: &[F],
        gout: &[F],
        grads: &mut Grads<'_, F>,
    ) {
        let (n, c, h, w) = self.value(input).dims4("batchnorm2d").expect("validated");
        let hw = h * w;
        let gv = self.value(gamma).data();
        let mut sum_d = vec![F::zero(); c];
        let mut sum_dx = vec![F::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    sum_d[ch] += gout[i];
                    sum_dx[ch] += gout[i] * xhat[i];
                }
            }
        }
        if let Some(g) = grads.slot(gamma) {
            g.iter_mut().zip(&sum_dx).for_each(|(g, &s)| *g += s);
        }
        if let Some(g) = grads.slot(beta) {
            g.iter_mut().zip(&sum_d).for_each(|(g, &s)| *g += s);
        }
        if let Some(g) = grads.slot(input) {
            let m = F::lit((n * hw) as f64);
            for b in 0..n {
                for ch in 0..c {
                    let k = gv[ch] * inv_std[ch] / m;
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        g[i] += k * (m * gout[i] - sum_d[ch] - xhat[i] * sum_dx[ch]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batchnorm_eval_backward(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        inv_std: &[F],
        gout: &[F],
        grads: &mut Grads<'_, F>,
    ) {
        let (n, c, h, w) = self.value(input).dims4("batchnorm2d").expect("validated");
        let hw = h * w;
        let x = self.value(input).data();
        let gv = self.value(gamma).data();
        if let Some(g) = grads.slot(gamma) {
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        g[ch] += gout[i] * (x[i] - mean[ch]) * inv_std[ch];
                    }
                }
            }
        }
        if let Some(g) = grads.slot(beta) {
            for b in 0..n {
                for ch in 0..c {
                    g[ch] += gout[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<F>();
                }
            }
        }
        if let Some(g) = grads.slot(input) {
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        g[i] += gout[i] * gv[ch] * inv_std[ch];
                    }
                }
            }
        }
    }
}
