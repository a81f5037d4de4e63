//! Direct 2-D cross-correlation kernels, forward and backward.
//!
//! Input `c_in × h × w`, weight `c_out × c_in × k × k`, bias `c_out`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn infer(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [c_in, h, w] = x.dims()[..] else {
            return Err(Error::Shape(format!("conv2d: input must be c×h×w, got {:?}", x.dims())));
        };
        let [c_out, wc_in, kh, kw] = weight.dims()[..] else {
            return Err(Error::Shape(format!(
                "conv2d: weight must be c_out×c_in×k×k, got {:?}",
                weight.dims()
            )));
        };
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if bias.dims() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d: bias dims {:?}, expected [{c_out}]",
                bias.dims()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn valid_out_range(&self, kx: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // ix = ox*s + kx - pad must satisfy 0 <= ix < in_len
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let limit = in_len + self.pad; // ox*s + kx < limit
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ohw, hw, kk) = (g.out_h * g.out_w, g.h * g.w, g.k * g.k);
    let mut out = vec![0.0; g.c_out * ohw];
    for co in 0..g.c_out {
        let plane = &mut out[co * ohw..(co + 1) * ohw];
        plane.fill(bias[co]);
        for ci in 0..g.c_in {
            let input = &x[ci * hw..(ci + 1) * hw];
            let wbase = (co * g.c_in + ci) * kk;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_out_range(ky, g.h, g.out_h);
                for kx in 0..g.k {
                    let wv = weight[wbase + ky * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_out_range(kx, g.w, g.out_w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &input[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            for (o, &v) in orow[ox_lo..ox_hi].iter_mut().zip(&row[ix0..]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(g: &ConvGeometry, x: &[f64], weight: &[f64], grad_out: &[f64]) -> ConvGrads {
    let (ohw, hw, kk) = (g.out_h * g.out_w, g.h * g.w, g.k * g.k);
    let mut gx = vec![0.0; g.c_in * hw];
    let mut gw = vec![0.0; g.c_out * g.c_in * kk];
    let gb: Vec<f64> = grad_out.chunks_exact(ohw).map(|p| p.iter().sum()).collect();
    for co in 0..g.c_out {
        let gplane = &grad_out[co * ohw..(co + 1) * ohw];
        for ci in 0..g.c_in {
            let input = &x[ci * hw..(ci + 1) * hw];
            let ginput = &mut gx[ci * hw..(ci + 1) * hw];
            let wbase = (co * g.c_in + ci) * kk;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_out_range(ky, g.h, g.out_h);
                for kx in 0..g.k {
                    let wv = weight[wbase + ky * g.k + kx];
                    let (ox_lo, ox_hi) = g.valid_out_range(kx, g.w, g.out_w);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        let row = &input[iy * g.w..(iy + 1) * g.w];
                        let rowg = &mut ginput[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let span = ox_hi - ox_lo;
                            for ((&gv, &v), gi) in grow[ox_lo..ox_hi]
                                .iter()
                                .zip(&row[ix0..ix0 + span])
                                .zip(&mut rowg[ix0..ix0 + span])
                            {
                                acc += gv * v;
                                *gi += wv * gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += grow[ox] * row[ix];
                                rowg[ix] += wv * grow[ox];
                            }
                        }
                    }
                    gw[wbase + ky * g.k + kx] += acc;
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Cross-correlation plus bias: `h' = floor((h + 2·pad − k)/stride) + 1`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::infer(x, weight, bias, stride, pad)?;
    let out = conv2d_forward(&g, x.data(), weight.data(), bias.data());
    Tensor::from_op(vec![g.c_out, g.out_h, g.out_w], out, "conv2d")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook definition with explicit zero padding, used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let [c_in, h, wd] = x.dims()[..] else { unreachable!() };
        let [c_out, _, k, _] = w.dims()[..] else { unreachable!() };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.get(&[co, ci, ky, kx]).unwrap()
                                    * x.get(&[ci, iy as usize, ix as usize]).unwrap();
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64 * 2654435761 + salt * 40503) % 1000;
                v as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let x = Tensor::new(vec![1, 3, 3], pseudo(9, 1)).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let x = Tensor::new(vec![2, 4, 4], pseudo(32, 2)).unwrap();
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::vector(&[0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.dims(), &[3, 4, 4]);
        for co in 0..3 {
            assert!(y.data()[co * 16..(co + 1) * 16].iter().all(|&v| v == b.data()[co]));
        }
    }

    #[test]
    fn ones_kernel_gives_local_sums() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        // 1+2+4+5, 2+3+5+6, 4+5+7+8, 5+6+8+9
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn matches_naive_reference_across_strides_and_padding() {
        for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 0, 2), (2, 1, 3), (3, 2, 3)] {
            let x = Tensor::new(vec![2, 7, 6], pseudo(84, stride as u64 + pad as u64)).unwrap();
            let w = Tensor::new(vec![3, 2, k, k], pseudo(6 * k * k, 9)).unwrap();
            let b = Tensor::vector(&[0.1, 0.2, -0.3]).unwrap();
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let expect = naive_conv(&x, &w, &b, stride, pad);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0), Err(Error::Shape(_))));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0), Err(Error::Shape(_))));
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[1]), 0, 0), Err(Error::Shape(_))));
    }
}
