use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binomial taps `[1, 2, 1] / 4`; the 2-D blur kernel is their outer product.
const BINOMIAL: [f64; 3] = [0.25, 0.5, 0.25];

/// Reflect index into `0..n` for `i` in `-1..=n` (edge sample not repeated).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Source taps and weights of half-pixel 2x bilinear upsampling along one axis.
#[inline]
pub(crate) fn bilinear_taps(dst: usize, n: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

impl<F: Scalar> Graph<F> {
    /// Non-overlapping `k x k` max pooling; ties resolve to the first cell in row-major order.
    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("maxpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("maxpool2d", format!("extent {h}x{w} not divisible by window {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avgpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("avgpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("avgpool2d", format!("extent {h}x{w} not divisible by window {k}")));
        }
        if k == 1 {
            let out = self.value(input).clone();
            return Ok(self.push(out, Op::AvgPool { input, k }, &[input]));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = F::one() / F::lit((k * k) as f64);
        let x = self.value(input).data();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * ho * wo + (y / k) * wo + xx / k] += x[plane * h * w + y * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool { input, k }, &[input]))
    }

    pub(super) fn avgpool_backward(&self, input: Var, k: usize, gout: &[F], grads: &mut Grads<'_, F>) {
        let (n, c, h, w) = self.value(input).dims4("avgpool2d").expect("validated");
        let (ho, wo) = (h / k, w / k);
        let inv = F::one() / F::lit((k * k) as f64);
        if let Some(g) = grads.slot(input) {
            for plane in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        g[plane * h * w + y * w + xx] += gout[plane * ho * wo + (y / k) * wo + xx / k] * inv;
                    }
                }
            }
        }
    }

    /// Anti-aliased stride-2 downsampling: depthwise 3x3 binomial blur with reflect padding.
    pub fn blurpool2d(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("blurpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("blurpool2d", format!("extent {h}x{w} must be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let taps = BINOMIAL.map(F::lit);
        let x = self.value(input).data();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let xp = &x[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for (di, ti) in taps.iter().enumerate() {
                        let iy = reflect(2 * oy as isize + di as isize - 1, h);
                        for (dj, tj) in taps.iter().enumerate() {
                            let ix = reflect(2 * ox as isize + dj as isize - 1, w);
                            acc += *ti * *tj * xp[iy * w + ix];
                        }
                    }
                    op[oy * wo + ox] = acc;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::BlurPool(input), &[input]))
    }

    pub(super) fn blurpool_backward(&self, input: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (n, c, h, w) = self.value(input).dims4("blurpool2d").expect("validated");
        let (ho, wo) = (h / 2, w / 2);
        let taps = BINOMIAL.map(F::lit);
        if let Some(g) = grads.slot(input) {
            for plane in 0..n * c {
                let gp = &mut g[plane * h * w..(plane + 1) * h * w];
                let go = &gout[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let d = go[oy * wo + ox];
                        for (di, ti) in taps.iter().enumerate() {
                            let iy = reflect(2 * oy as isize + di as isize - 1, h);
                            for (dj, tj) in taps.iter().enumerate() {
                                let ix = reflect(2 * ox as isize + dj as isize - 1, w);
                                gp[iy * w + ix] += *ti * *tj * d;
                            }
                        }
                    }
                }
            }
        }
    }

    /// 2x bilinear upsampling with half-pixel centres (align-corners off).
    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample_bilinear2x")?;
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(input).data();
        let rows: Vec<_> = (0..ho).map(|d| bilinear_taps(d, h)).collect();
        let colt: Vec<_> = (0..wo).map(|d| bilinear_taps(d, w)).collect();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let xp = &x[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                let (ly, my) = (F::lit(ly), F::lit(1.0 - ly));
                for (ox, &(x0, x1, lx)) in colt.iter().enumerate() {
                    let (lx, mx) = (F::lit(lx), F::lit(1.0 - lx));
                    let top = mx * xp[y0 * w + x0] + lx * xp[y0 * w + x1];
                    let bot = mx * xp[y1 * w + x0] + lx * xp[y1 * w + x1];
                    op[oy * wo + ox] = my * top + ly * bot;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::Upsample2x(input), &[input]))
    }

    pub(super) fn upsample_backward(&self, input: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (n, c, h, w) = self.value(input).dims4("upsample_bilinear2x").expect("validated");
        let (ho, wo) = (2 * h, 2 * w);
        let rows: Vec<_> = (0..ho).map(|d| bilinear_taps(d, h)).collect();
        let colt: Vec<_> = (0..wo).map(|d| bilinear_taps(d, w)).collect();
        if let Some(g) = grads.slot(input) {
            for plane in 0..n * c {
                let gp = &mut g[plane * h * w..(plane + 1) * h * w];
                let go = &gout[plane * ho * wo..(plane + 1) * ho * wo];
                for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                    let (ly, my) = (F::lit(ly), F::lit(1.0 - ly));
                    for (ox, &(x0, x1, lx)) in colt.iter().enumerate() {
                        let (lx, mx) = (F::lit(lx), F::lit(1.0 - lx));
                        let d = go[oy * wo + ox];
                        gp[y0 * w + x0] += my * mx * d;
                        gp[y0 * w + x1] += my * lx * d;
                        gp[y1 * w + x0] += ly * mx * d;
                        gp[y1 * w + x1] += ly * lx * d;
                    }
                }
            }
        }
    }

    /// Spatial mean per channel, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = F::one() / F::lit(hw as f64);
        let out: Vec<F> = self.value(input).data().chunks(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    pub(super) fn gap_backward(&self, input: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (_, _, h, w) = self.value(input).dims4("global_avg_pool").expect("validated");
        let hw = h * w;
        let inv = F::one() / F::lit(hw as f64);
        if let Some(g) = grads.slot(input) {
            for (plane, d) in g.chunks_mut(hw).zip(gout) {
                plane.iter_mut().for_each(|v| *v += *d * inv);
            }
        }
    }
}
