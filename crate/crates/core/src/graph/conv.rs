use super::{add_into, Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded sliding window.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    let span = input + 2 * padding;
    if span < kernel || !(span - kernel).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "extent {input} with kernel {kernel}, stride {stride}, padding {padding} gives a non-integral output"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose stride-1 tap `kj` lands inside the row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo).max(lo);
        (lo, hi)
    }

    fn im2col<F: Scalar>(&self, x: &[F], cols: &mut [F]) {
        let p = self.cols();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let seg = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            seg.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kj);
                            seg[..lo].fill(F::zero());
                            seg[hi..].fill(F::zero());
                            if hi > lo {
                                let off = lo + kj - self.pad;
                                seg[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, d) in seg.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { F::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], dx: &mut [F]) {
        let p = self.cols();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kj);
                            if hi > lo {
                                let off = lo + kj - self.pad;
                                add_into(&mut dst[off..off + hi - lo], &src[oy * self.wo + lo..oy * self.wo + hi]);
                            }
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<F: Scalar> Graph<F> {
    fn conv_geom(&self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<(usize, usize, ConvGeom)> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::dim("conv2d", format!("axis 1: input has {cin} channels, weight expects {wcin}")));
        }
        let ho = conv_output_extent(h, kh, stride, padding)?;
        let wo = conv_output_extent(w, kw, stride, padding)?;
        Ok((n, cout, ConvGeom { cin, h, w, kh, kw, stride, pad: padding, ho, wo }))
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cout, geom) = self.conv_geom(input, weight, stride, padding)?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::dim("conv2d", format!("bias shape {bs:?}, expected [{cout}]")));
            }
        }
        let (p, k) = (geom.cols(), geom.rows());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![F::zero(); n * cout * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
        let in_stride = geom.cin * geom.h * geom.w;
        for b in 0..n {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let ob = &mut out[b * cout * p..(b + 1) * cout * p];
            if geom.is_pointwise() {
                matmul(false, false, cout, p, k, wt, xb, F::zero(), ob);
            } else {
                geom.im2col(xb, &mut cols);
                matmul(false, false, cout, p, k, wt, &cols, F::zero(), ob);
            }
            if let Some(bv) = bias {
                for (row, &bias) in ob.chunks_mut(p).zip(self.value(bv).data()) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride, padding }, &inputs))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        gout: &[F],
        grads: &mut Grads<'_, F>,
    ) {
        let (n, cout, geom) = self.conv_geom(input, weight, stride, padding).expect("validated in forward");
        let (p, k) = (geom.cols(), geom.rows());
        let in_stride = geom.cin * geom.h * geom.w;
        let x = self.value(input).data();
        let wt = self.value(weight).data();

        if let Some(b) = bias {
            if let Some(gb) = grads.slot(b) {
                for bi in 0..n {
                    for (c, g) in gb.iter_mut().enumerate() {
                        let start = (bi * cout + c) * p;
                        *g += gout[start..start + p].iter().copied().sum::<F>();
                    }
                }
            }
        }
        if let Some(gw) = grads.slot(weight) {
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
            for bi in 0..n {
                let xb = &x[bi * in_stride..(bi + 1) * in_stride];
                let gb = &gout[bi * cout * p..(bi + 1) * cout * p];
                if geom.is_pointwise() {
                    matmul(false, true, cout, k, p, gb, xb, F::one(), gw);
                } else {
                    geom.im2col(xb, &mut cols);
                    matmul(false, true, cout, k, p, gb, &cols, F::one(), gw);
                }
            }
        }
        if let Some(gx) = grads.slot(input) {
            let mut dcols = vec![F::zero(); k * p];
            for bi in 0..n {
                let gb = &gout[bi * cout * p..(bi + 1) * cout * p];
                matmul(true, false, k, p, cout, wt, gb, F::zero(), &mut dcols);
                let dxb = &mut gx[bi * in_stride..(bi + 1) * in_stride];
                if geom.is_pointwise() {
                    add_into(dxb, &dcols);
                } else {
                    geom.col2im(&dcols, dxb);
                }
            }
        }
    }
}
