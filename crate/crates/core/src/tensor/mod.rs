//! Dense row-major `f64` tensors and the handful of array routines the rest of
//! the crate is built on.
//!
//! A [`Tensor`] is a value object: every constructor validates that the
//! shape matches the payload and that all values are finite, so any tensor
//! that exists is well formed. Operations return `Result` whenever their
//! input can break that guarantee.

pub mod xvt;

pub use xvt::{read_xvt, read_xvt_record, write_xvt, write_xvt_record, XVT_MAGIC, XVT_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn check_finite(data: &[f64], what: &str, err: fn(String) -> Error) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(err(format!("{what}: non-finite value {} at flat index {i}", data[i]))),
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction", Error::Contract)?;
        Ok(Self { dims, data })
    }

    /// Internal constructor for results whose shape is known to be right.
    /// A non-finite result is an overflow and reported as `Numeric`.
    pub(crate) fn from_op(dims: Vec<usize>, data: Vec<f64>, op: &str) -> Result<Self> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        check_finite(&data, op, Error::Numeric)?;
        Ok(Self { dims, data })
    }

    /// Caller guarantees shape and finiteness (used for zero/constant fills).
    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        assert!(dims.iter().all(|&d| d > 0), "zero-sized dimension in {dims:?}");
        let n = dims.iter().product();
        Self::from_parts_unchecked(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Mutable access for the explicitly mutating routines (optimizer, EMA).
    /// Callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Overwrite one element; used by finite-difference probes and tests.
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Contract(format!("set: non-finite value {value}")));
        }
        let len = self.data.len();
        let slot = self
            .data
            .get_mut(index)
            .ok_or_else(|| Error::Shape(format!("index {index} out of range for {len} values")))?;
        *slot = value;
        Ok(())
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "index rank {} for tensor of rank {}",
                index.len(),
                self.dims.len()
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return Err(Error::Shape(format!("index {index:?} out of bounds {:?}", self.dims)));
            }
            flat = flat * d + i;
        }
        Ok(self.data[flat])
    }

    /// Metadata-only reshape.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        Ok(Self::from_parts_unchecked(dims.to_vec(), self.data.clone()))
    }

    pub fn into_reshaped(self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        Ok(Self::from_parts_unchecked(dims.to_vec(), self.data))
    }

    fn same_dims(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::from_op(self.dims.clone(), data, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::from_op(self.dims.clone(), data, "sub")
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Tensor::from_op(self.dims.clone(), data, "scale")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.dims.clone(), data, "map")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn as_matrix(&self, op: &str) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("{op}: expected a matrix, got dims {:?}", self.dims))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![c, r], out))
    }

    /// Split a `c × (n·k)` matrix into `n` column blocks of width `k`.
    pub fn split_columns(&self, parts: usize) -> Result<Vec<Tensor>> {
        let (r, c) = self.as_matrix("split_columns")?;
        if parts == 0 || c % parts != 0 {
            return Err(Error::Shape(format!("cannot split {c} columns into {parts} parts")));
        }
        let k = c / parts;
        Ok((0..parts)
            .map(|p| {
                let mut block = Vec::with_capacity(r * k);
                for i in 0..r {
                    block.extend_from_slice(&self.data[i * c + p * k..i * c + (p + 1) * k]);
                }
                Tensor::from_parts_unchecked(vec![r, k], block)
            })
            .collect())
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_columns(blocks: &[Tensor]) -> Result<Tensor> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Shape("concat_columns: no blocks".into()))?;
        let (r, _) = first.as_matrix("concat_columns")?;
        let mut widths = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (br, bc) = b.as_matrix("concat_columns")?;
            if br != r {
                return Err(Error::Shape(format!("concat_columns: row counts {r} vs {br}")));
            }
            widths.push(bc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (b, &w) in blocks.iter().zip(&widths) {
                out.extend_from_slice(&b.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![r, total], out))
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner dims differ ({m}x{k} · {k2}x{n})"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_op(vec![m, n], out, "matmul")
}

/// Temperature softmax over a flat vector of logits.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Param(format!("softmax temperature must be > 0, got {temperature}")));
    }
    let probs = softmax_slice(logits.data(), temperature);
    Tensor::from_op(logits.dims().to_vec(), probs, "softmax_t")
}

pub(crate) fn softmax_slice(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Global average pooling of a `c × h × w` map into a length-`c` vector.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = x.dims()[..] else {
        return Err(Error::Shape(format!("gap: expected c×h×w, got {:?}", x.dims())));
    };
    let hw = h * w;
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_op(vec![c], out, "gap")
}

/// Rescale to `[0, 1]`; a constant tensor maps to all zeros.
pub fn minmax_normalize(x: &Tensor) -> Tensor {
    let (lo, hi) = (x.min(), x.max());
    let range = hi - lo;
    let data = if range > 0.0 {
        x.data().iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; x.len()]
    };
    Tensor::from_parts_unchecked(x.dims().to_vec(), data)
}

/// Bilinear resampling of an `h × w` map with corner pixels pinned to corners.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Param(format!("bilinear_resize: target {out_h}x{out_w}")));
    }
    let [h, w] = x.dims()[..] else {
        return Err(Error::Shape(format!("bilinear_resize: expected h×w, got {:?}", x.dims())));
    };
    let src = x.data();
    let coord = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        if out_n == 1 || in_n == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
        let lo = (pos.floor() as usize).min(in_n - 1);
        let hi = (lo + 1).min(in_n - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|ox| coord(ox, out_w, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::from_op(vec![out_h, out_w], out, "bilinear_resize")
}
