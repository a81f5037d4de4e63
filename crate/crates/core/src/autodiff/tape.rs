//! Tensor-level reverse-mode tape.
//!
//! Each primitive application is appended to the tape together with the
//! inputs its backward rule needs. [`Tape::backward`] walks the records in
//! exact reverse order and accumulates parameter gradients into a
//! [`ParamStore`].
//!
//! Stop-gradient points ([`Tape::detached`]) are recorded in order. A tape
//! created with [`Tape::replaying`] substitutes previously recorded values
//! at those points, which lets a finite-difference probe evaluate exactly
//! the function whose gradient the tape reports.

use std::collections::HashMap;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Relu(Var),
    Add(Var, Var),
    Mean(Vec<Var>),
    Gap { x: Var, hw: usize },
    Fc { x: Var, w: Var, b: Var },
    SoftmaxT { x: Var, temperature: f64 },
    CrossEntropy { logits: Var, label: usize },
    CoRelationCe { p: Var, q: Var, eps: f64 },
    L2Distance { a: Var, b: Var, squared: bool },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose stop-gradient points return `frozen` in recording order.
    pub fn replaying(frozen: Vec<Tensor>) -> Self {
        Self {
            replay: Some(frozen),
            ..Self::default()
        }
    }

    /// Values recorded at stop-gradient points, in order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x > 0` for every ReLU input, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Insert a value that backward treats as a constant.
    pub fn detached(&mut self, value: Tensor) -> Result<Var> {
        let value = match &self.replay {
            Some(frozen) => {
                let idx = self.detached.len();
                let stored = frozen.get(idx).ok_or_else(|| {
                    Error::Contract(format!("replay tape has no frozen value #{idx}"))
                })?;
                if stored.dims() != value.dims() {
                    return Err(Error::Contract(format!(
                        "replayed value #{idx} has dims {:?}, expected {:?}",
                        stored.dims(),
                        value.dims()
                    )));
                }
                stored.clone()
            }
            None => value,
        };
        self.detached.push(value.clone());
        Ok(self.push(value, Op::Constant))
    }

    /// Leaf for a named parameter; repeated requests return the same node so
    /// shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::infer(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::from_op(vec![geom.c_out, geom.out_h, geom.out_w], out, "conv2d")?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0))?;
        Ok(self.push(value, Op::Relu(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("mean of zero tensors".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            acc = acc.add(self.value(x))?;
        }
        let value = acc.scale(1.0 / xs.len() as f64)?;
        Ok(self.push(value, Op::Mean(xs.to_vec())))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let value = crate::tensor::gap(self.value(x))?;
        let d = self.value(x).dims();
        let hw = d[1] * d[2];
        Ok(self.push(value, Op::Gap { x, hw }))
    }

    /// `w·x + b` with `w: n×d`, `x: d`, `b: n`.
    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = fc_apply(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Fc { x, w, b }))
    }

    pub fn softmax_t(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = crate::tensor::softmax_t(self.value(x), temperature)?;
        Ok(self.push(value, Op::SoftmaxT { x, temperature }))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let ce = cross_entropy_value(self.value(logits).data(), label)?;
        let value = Tensor::from_op(vec![1], vec![ce], "cross_entropy")?;
        Ok(self.push(value, Op::CrossEntropy { logits, label }))
    }

    /// `−Σ_jk P_jk·log(Q_jk + eps)` with `P = p·pᵀ`, `Q = q·qᵀ` built from
    /// probability vectors `p` and `q`.
    pub fn corelation_ce(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        let ce = corelation_ce_value(self.value(p).data(), self.value(q).data(), eps)?;
        let value = Tensor::from_op(vec![1], vec![ce], "corelation_ce")?;
        Ok(self.push(value, Op::CoRelationCe { p, q, eps }))
    }

    pub fn l2_distance(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let diff = self.value(a).sub(self.value(b))?;
        let sq: f64 = diff.data().iter().map(|v| v * v).sum();
        let value = Tensor::from_op(vec![1], vec![if squared { sq } else { sq.sqrt() }], "l2_distance")?;
        Ok(self.push(value, Op::L2Distance { a, b, squared }))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Shape("weighted sum of zero terms".into()))?;
        let mut acc = Tensor::zeros(self.value(first).dims());
        for &(v, c) in terms {
            acc = acc.add(&self.value(v).scale(c)?)?;
        }
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`; parameter gradients are added to
    /// `store`. Parameters the loss does not depend on are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::Conv2d { x, w, b, geom } => {
                    let cg = conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                    );
                    accumulate(&mut grads, *x, &cg.input);
                    accumulate(&mut grads, *w, &cg.weight);
                    accumulate(&mut grads, *b, &cg.bias);
                }
                Op::Relu(x) => {
                    let masked: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &masked);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mean(xs) => {
                    let scaled: Vec<f64> = g.iter().map(|v| v / xs.len() as f64).collect();
                    for &x in xs {
                        accumulate(&mut grads, x, &scaled);
                    }
                }
                Op::Gap { x, hw } => {
                    let spread: Vec<f64> = g
                        .iter()
                        .flat_map(|&gc| std::iter::repeat_n(gc / *hw as f64, *hw))
                        .collect();
                    accumulate(&mut grads, *x, &spread);
                }
                Op::Fc { x, w, b } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let d = xv.len();
                    let mut gw = vec![0.0; wv.len()];
                    let mut gx = vec![0.0; d];
                    for (i, &go) in g.iter().enumerate() {
                        let row = &wv[i * d..(i + 1) * d];
                        for j in 0..d {
                            gw[i * d + j] = go * xv[j];
                            gx[j] += row[j] * go;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                    accumulate(&mut grads, *b, &g);
                }
                Op::SoftmaxT { x, temperature } => {
                    let y = node.value.data();
                    let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let gx: Vec<f64> = y
                        .iter()
                        .zip(&g)
                        .map(|(&yi, &gi)| yi * (gi - dot) / temperature)
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::CrossEntropy { logits, label } => {
                    let mut probs = softmax_slice(self.value(*logits).data(), 1.0);
                    probs[*label] -= 1.0;
                    let scaled: Vec<f64> = probs.iter().map(|v| v * g[0]).collect();
                    accumulate(&mut grads, *logits, &scaled);
                }
                Op::CoRelationCe { p, q, eps } => {
                    let (gp, gq) =
                        corelation_ce_grads(self.value(*p).data(), self.value(*q).data(), *eps);
                    let up = g[0];
                    accumulate(&mut grads, *p, &gp.iter().map(|v| v * up).collect::<Vec<_>>());
                    accumulate(&mut grads, *q, &gq.iter().map(|v| v * up).collect::<Vec<_>>());
                }
                Op::L2Distance { a, b, squared } => {
                    let diff = self.value(*a).sub(self.value(*b))?;
                    let norm = diff.frobenius_norm();
                    let coef = if *squared {
                        2.0 * g[0]
                    } else if norm > 0.0 {
                        g[0] / norm
                    } else {
                        0.0
                    };
                    let ga: Vec<f64> = diff.data().iter().map(|v| v * coef).collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
                        accumulate(&mut grads, v, &scaled);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn fc_apply(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, d] = w.dims()[..] else {
        return Err(Error::Shape(format!("fc: weight must be n×d, got {:?}", w.dims())));
    };
    if x.dims() != [d] || b.dims() != [n] {
        return Err(Error::Shape(format!(
            "fc: weight {:?}, input {:?}, bias {:?}",
            w.dims(),
            x.dims(),
            b.dims()
        )));
    }
    let out = (0..n)
        .map(|i| {
            let row = &w.data()[i * d..(i + 1) * d];
            row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[i]
        })
        .collect();
    Tensor::from_op(vec![n], out, "fc")
}

pub(crate) fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

pub(crate) fn corelation_ce_value(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("co-relation lengths {} vs {}", p.len(), q.len())));
    }
    let mut loss = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        for (k, &pk) in p.iter().enumerate() {
            loss -= pj * pk * (q[j] * q[k] + eps).ln();
        }
    }
    Ok(loss)
}

/// Gradients of the co-relation cross-entropy w.r.t. `p` and `q`, using the
/// symmetry of both outer products.
fn corelation_ce_grads(p: &[f64], q: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = p.len();
    let mut gp = vec![0.0; n];
    let mut gq = vec![0.0; n];
    for m in 0..n {
        for k in 0..n {
            let qq = q[m] * q[k] + eps;
            gp[m] -= 2.0 * p[k] * qq.ln();
            gq[m] -= 2.0 * p[m] * p[k] * q[k] / qq;
        }
    }
    (gp, gq)
}
