//! Affordance invariance mining: a non-negative factorization whose
//! dictionary is shared by all exocentric features of one sample group,
//! followed by a residual projection of the reconstruction.

use rand::Rng;

use crate::autodiff::{relu, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NmfConfig {
    pub rank: usize,
    pub iterations: usize,
    pub epsilon: f64,
    /// EMA coefficient for the persisted dictionary.
    pub alpha: f64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            iterations: 6,
            epsilon: 1e-12,
            alpha: 0.9,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.rank == 0 || self.rank > channels {
            return Err(Error::Config(format!(
                "nmf rank {} must be in 1..={channels}",
                self.rank
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("nmf iterations must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("nmf epsilon must be > 0".into()));
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("EMA alpha {alpha} outside [0, 1]")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmfResult {
    /// Dictionary, `c × r`.
    pub w: Tensor,
    /// Coefficients, `r × (N·h·w)`.
    pub h: Tensor,
    /// Reconstruction `w·h`.
    pub m: Tensor,
    /// `‖X − W·H‖_F` at the returned factors.
    pub residual_error: f64,
    /// Error before the first round followed by the error after each round.
    pub error_trace: Vec<f64>,
}

/// The persisted initial dictionary `W⁽⁰⁾`.
#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryState {
    pub w0: Tensor,
}

impl DictionaryState {
    /// Uniform in `(0, 1]` so no atom starts dead under multiplicative updates.
    pub fn init<R: Rng>(channels: usize, rank: usize, rng: &mut R) -> Self {
        let data = (0..channels * rank).map(|_| 1.0 - rng.gen::<f64>()).collect();
        Self {
            w0: Tensor::new(vec![channels, rank], data).expect("positive finite init"),
        }
    }

    /// `W⁽⁰⁾ ← α·W⁽⁰⁾ + (1 − α)·W̄`.
    pub fn ema_update(&mut self, w_batch_mean: &Tensor, alpha: f64) -> Result<()> {
        self.w0 = dictionary_ema_update(&self.w0, w_batch_mean, alpha)?;
        Ok(())
    }
}

/// Seeded `rows × cols` matrix with entries uniform in `[0, 1)`.
pub fn random_nonnegative(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, Stream::Nmf, 0);
    let data = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(vec![rows, cols], data).expect("finite")
}

pub fn dictionary_ema_update(w0: &Tensor, w_batch_mean: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if w0.dims() != w_batch_mean.dims() {
        return Err(Error::Shape(format!(
            "dictionary dims {:?} vs batch mean {:?}",
            w0.dims(),
            w_batch_mean.dims()
        )));
    }
    ensure_nonneg(w_batch_mean, "batch-mean dictionary")?;
    let data = w0
        .data()
        .iter()
        .zip(w_batch_mean.data())
        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Tensor::new(w0.dims().to_vec(), data)
}

fn ensure_nonneg(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().position(|&v| v < 0.0) {
        None => Ok(()),
        Some(i) => Err(Error::Contract(format!(
            "{what} must be non-negative, found {} at flat index {i}",
            t.data()[i]
        ))),
    }
}

fn residual(x: &Tensor, w: &Tensor, h: &Tensor) -> Result<f64> {
    Ok(x.sub(&matmul(w, h)?)?.frobenius_norm())
}

/// `target ← target ⊙ numer ⊘ (denom + ε)`.
fn multiplicative_step(target: &mut Tensor, numer: &Tensor, denom: &Tensor, eps: f64) {
    for ((t, n), d) in target.data_mut().iter_mut().zip(numer.data()).zip(denom.data()) {
        *t *= n / (d + eps);
    }
}

/// Factorize `x ≈ W·H` starting from dictionary `w0` and all-ones coefficients.
pub fn nmf_factorize(x: &Tensor, w0: &Tensor, cfg: &NmfConfig) -> Result<NmfResult> {
    let cols = *x
        .dims()
        .get(1)
        .ok_or_else(|| Error::Shape(format!("nmf input must be a matrix, got {:?}", x.dims())))?;
    let h0 = Tensor::full(&[cfg.rank, cols], 1.0);
    nmf_factorize_from(x, w0, h0, cfg)
}

/// Multiplicative updates from explicit initial factors; each round updates
/// `H` then `W`.
pub fn nmf_factorize_from(x: &Tensor, w0: &Tensor, h0: Tensor, cfg: &NmfConfig) -> Result<NmfResult> {
    let [c, cols] = x.dims()[..] else {
        return Err(Error::Shape(format!("nmf input must be a matrix, got {:?}", x.dims())));
    };
    cfg.validate(c)?;
    if w0.dims() != [c, cfg.rank] {
        return Err(Error::Shape(format!(
            "initial dictionary dims {:?}, expected [{c}, {}]",
            w0.dims(),
            cfg.rank
        )));
    }
    if h0.dims() != [cfg.rank, cols] {
        return Err(Error::Shape(format!(
            "initial coefficients dims {:?}, expected [{}, {cols}]",
            h0.dims(),
            cfg.rank
        )));
    }
    ensure_nonneg(x, "nmf input")?;
    ensure_nonneg(w0, "initial dictionary")?;
    ensure_nonneg(&h0, "initial coefficients")?;

    let mut w = w0.clone();
    let mut h = h0;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(residual(x, &w, &h)?);
    for _ in 0..cfg.iterations {
        let wt = w.transpose()?;
        let numer = matmul(&wt, x)?;
        let denom = matmul(&matmul(&wt, &w)?, &h)?;
        multiplicative_step(&mut h, &numer, &denom, cfg.epsilon);

        let ht = h.transpose()?;
        let numer = matmul(x, &ht)?;
        let denom = matmul(&w, &matmul(&h, &ht)?)?;
        multiplicative_step(&mut w, &numer, &denom, cfg.epsilon);

        trace.push(residual(x, &w, &h)?);
    }
    let m = matmul(&w, &h)?;
    let residual_error = x.sub(&m)?.frobenius_norm();
    Ok(NmfResult {
        w,
        h,
        m,
        residual_error,
        error_trace: trace,
    })
}

/// Parameter names of the reduction and residual 1×1 convolutions.
pub const RED_W: &str = "aim.red.w";
pub const RED_B: &str = "aim.red.b";
pub const RES_W: &str = "aim.res.w";
pub const RES_B: &str = "aim.res.b";

/// The residual convolution starts at zero, so mining begins as the
/// identity `F_i = Z_i` and the residual grows from there.
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    channels: usize,
    reduced: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_kaiming(RED_W, &[reduced, channels, 1, 1], channels, rng)?;
    store.insert(RED_B, Tensor::zeros(&[reduced]))?;
    store.insert(RES_W, Tensor::zeros(&[channels, reduced, 1, 1]))?;
    store.insert(RES_B, Tensor::zeros(&[channels]))?;
    Ok(())
}

/// `F_i = Z_i + conv_res(M_i)` where `M = W·H` factorizes the concatenated
/// reduced features `X_i = relu(conv_red(Z_i))`.
///
/// The factorization is a stop-gradient point: its output enters the tape
/// as a constant, so `conv_red` receives no gradient and `Z_i` receives
/// gradient through the identity path only.
pub fn aim_forward(
    tape: &mut Tape,
    params: &ParamStore,
    z_list: &[Var],
    state: &DictionaryState,
    cfg: &NmfConfig,
) -> Result<(Vec<Var>, NmfResult)> {
    let first = *z_list
        .first()
        .ok_or_else(|| Error::Shape("aim_forward needs at least one feature map".into()))?;
    let dims = tape.value(first).dims().to_vec();
    let [_, h, w] = dims[..] else {
        return Err(Error::Shape(format!("feature maps must be c×h×w, got {dims:?}")));
    };
    let red_w = params.get(RED_W)?;
    let red_b = params.get(RED_B)?;
    let reduced = red_w.dims()[0];

    let mut blocks = Vec::with_capacity(z_list.len());
    for &z in z_list {
        let zv = tape.value(z);
        if zv.dims() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "exocentric feature dims {:?} differ from {dims:?}",
                zv.dims()
            )));
        }
        let x = relu(&crate::autodiff::conv2d(zv, red_w, red_b, 1, 0)?);
        blocks.push(x.into_reshaped(&[reduced, h * w])?);
    }
    let x = Tensor::concat_columns(&blocks)?;
    let nmf = nmf_factorize(&x, &state.w0, cfg)?;

    let res_w = tape.param(params, RES_W)?;
    let res_b = tape.param(params, RES_B)?;
    let mut out = Vec::with_capacity(z_list.len());
    for (&z, m_i) in z_list.iter().zip(nmf.m.split_columns(z_list.len())?) {
        let m_i = tape.detached(m_i.into_reshaped(&[reduced, h, w])?)?;
        let r = tape.conv2d(m_i, res_w, res_b, 1, 0)?;
        out.push(tape.add(z, r)?);
    }
    Ok((out, nmf))
}
