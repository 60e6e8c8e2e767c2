use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<F: Scalar> Graph<F> {
    /// Per-pixel softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("softmax_channel")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![F::zero(); x.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut mx = F::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(x[base + ch * hw + p]);
                }
                let mut s = F::zero();
                for ch in 0..c {
                    let e = (x[base + ch * hw + p] - mx).exp();
                    out[base + ch * hw + p] = e;
                    s += e;
                }
                let inv = F::one() / s;
                for ch in 0..c {
                    out[base + ch * hw + p] *= inv;
                }
            }
        }
        let out = Tensor::new(self.value(input).shape(), out)?;
        Ok(self.push(out, Op::SoftmaxChannel(input), &[input]))
    }

    pub(super) fn softmax_backward(&self, input: Var, y: &[F], gout: &[F], grads: &mut Grads<'_, F>) {
        let (n, c, h, w) = self.value(input).dims4("softmax_channel").expect("validated");
        let hw = h * w;
        if let Some(g) = grads.slot(input) {
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut dot = F::zero();
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        dot += gout[i] * y[i];
                    }
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        g[i] += y[i] * (gout[i] - dot);
                    }
                }
            }
        }
    }

    /// Sums an NCHW tensor over batch and space, leaving a `[C]` vector.
    pub fn sum_per_channel(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("sum_per_channel")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![F::zero(); c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<F>();
            }
        }
        Ok(self.push(Tensor::new(&[c], out)?, Op::SumPerChannel(input), &[input]))
    }

    pub(super) fn sum_per_channel_backward(&self, input: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (n, c, h, w) = self.value(input).dims4("sum_per_channel").expect("validated");
        let hw = h * w;
        if let Some(g) = grads.slot(input) {
            for b in 0..n {
                for ch in 0..c {
                    g[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter_mut().for_each(|v| *v += gout[ch]);
                }
            }
        }
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("axes 0,2,3 mismatch: {:?} vs {:?}", self.value(p).shape(), self.value(first).shape()),
                ));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), parts))
    }

    pub(super) fn concat_backward(&self, parts: &[Var], gout: &[F], grads: &mut Grads<'_, F>) {
        let first = self.value(parts[0]).shape();
        let (n, hw) = (first[0], first[2] * first[3]);
        let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        let mut offset = 0;
        for &p in parts {
            let pc = self.value(p).shape()[1];
            if let Some(g) = grads.slot(p) {
                for b in 0..n {
                    let src = &gout[(b * total + offset) * hw..(b * total + offset + pc) * hw];
                    super::add_into(&mut g[b * pc * hw..(b + 1) * pc * hw], src);
                }
            }
            offset += pc;
        }
    }

    /// `x * gate` with `gate: [N, C, 1, 1]` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("mul_channel")?;
        if self.value(gate).shape() != [n, c, 1, 1] {
            return Err(Error::dim("mul_channel", format!("gate shape {:?}", self.value(gate).shape())));
        }
        let hw = h * w;
        let gv = self.value(gate).data();
        let out: Vec<F> = self.value(x).data().iter().enumerate().map(|(i, &v)| v * gv[i / hw]).collect();
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::MulChannel(x, gate), &[x, gate]))
    }

    pub(super) fn mul_channel_backward(&self, x: Var, gate: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (_, _, h, w) = self.value(x).dims4("mul_channel").expect("validated");
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        if let Some(g) = grads.slot(x) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += gout[i] * gv[i / hw];
            }
        }
        if let Some(g) = grads.slot(gate) {
            for (plane, gg) in g.iter_mut().enumerate() {
                let r = plane * hw..(plane + 1) * hw;
                *gg += gout[r.clone()].iter().zip(&xv[r]).map(|(&d, &v)| d * v).sum::<F>();
            }
        }
    }

    /// `x * gate` with `gate: [N, 1, H, W]` broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("mul_spatial")?;
        if self.value(gate).shape() != [n, 1, h, w] {
            return Err(Error::dim("mul_spatial", format!("gate shape {:?}", self.value(gate).shape())));
        }
        let hw = h * w;
        let gv = self.value(gate).data();
        let out: Vec<F> =
            self.value(x).data().iter().enumerate().map(|(i, &v)| v * gv[(i / (c * hw)) * hw + i % hw]).collect();
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::MulSpatial(x, gate), &[x, gate]))
    }

    pub(super) fn mul_spatial_backward(&self, x: Var, gate: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (_, c, h, w) = self.value(x).dims4("mul_spatial").expect("validated");
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        if let Some(g) = grads.slot(x) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += gout[i] * gv[(i / (c * hw)) * hw + i % hw];
            }
        }
        if let Some(g) = grads.slot(gate) {
            for (i, (&d, &v)) in gout.iter().zip(xv).enumerate() {
                g[(i / (c * hw)) * hw + i % hw] += d * v;
            }
        }
    }

    /// Mean over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("channel_mean")?;
        let hw = h * w;
        let x = self.value(input).data();
        let inv = F::one() / F::lit(c as f64);
        let mut out = vec![F::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[b * hw + p] += x[(b * c + ch) * hw + p];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.push(out, Op::ChannelMean(input), &[input]))
    }

    pub(super) fn channel_mean_backward(&self, input: Var, gout: &[F], grads: &mut Grads<'_, F>) {
        let (n, c, h, w) = self.value(input).dims4("channel_mean").expect("validated");
        let hw = h * w;
        let inv = F::one() / F::lit(c as f64);
        if let Some(g) = grads.slot(input) {
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        g[(b * c + ch) * hw + p] += gout[b * hw + p] * inv;
                    }
                }
            }
        }
    }

    /// Max over channels, `[N, C, H, W] -> [N, 1, H, W]`; ties go to the lowest channel.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("channel_max")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * hw);
        let mut argmax = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let mut best = b * c * hw + p;
                for ch in 1..c {
                    let i = (b * c + ch) * hw + p;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.push(out, Op::ChannelMax { input, argmax }, &[input]))
    }
}
