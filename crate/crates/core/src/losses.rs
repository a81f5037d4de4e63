//! Training objectives: two-branch classification, co-relation preserving
//! alignment of class distributions, and exo/ego feature transfer.

use crate::autodiff::{corelation_ce_value, cross_entropy, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_t, Tensor};

/// Guard inside the logarithm of the co-relation cross-entropy.
pub const ACP_LOG_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_acp: f64,
    pub lambda_kt: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_acp: 0.5,
            lambda_kt: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda_cls),
            ("lambda2", self.lambda_acp),
            ("lambda3", self.lambda_kt),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature T must be > 0".into()));
        }
        Ok(())
    }
}

/// Which side of the co-relation loss receives gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AcpGradient {
    /// The exocentric matrix `P` is a fixed target; only `Q` is differentiated.
    #[default]
    TargetStopped,
    BothSides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    pub acp_gradient: AcpGradient,
    /// Use `‖f_exo − f_ego‖²` instead of the plain norm.
    pub kt_squared: bool,
    /// Treat `f_exo` as a fixed target so only the egocentric branch is
    /// pulled towards it.
    pub kt_target_stopped: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            acp_gradient: AcpGradient::TargetStopped,
            kt_squared: false,
            kt_target_stopped: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub acp: f64,
    pub kt: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.acp, self.kt, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_classes(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("co-relation loss needs >= 2 classes, got {n}")));
    }
    Ok(())
}

/// `−Σ_jk P_jk·log(Q_jk + ε)` with `P = p·pᵀ`, `Q = q·qᵀ`, `p = softmax(s/T)`,
/// `q = softmax(g/T)`.
pub fn acp_loss(s: &Tensor, g: &Tensor, temperature: f64) -> Result<f64> {
    if s.dims() != g.dims() {
        return Err(Error::Shape(format!("score dims {:?} vs {:?}", s.dims(), g.dims())));
    }
    check_classes(s.len())?;
    let p = softmax_t(s, temperature)?;
    let q = softmax_t(g, temperature)?;
    corelation_ce_value(p.data(), q.data(), ACP_LOG_EPS)
}

pub fn kt_loss(f_exo: &Tensor, f_ego: &Tensor) -> Result<f64> {
    Ok(f_exo.sub(f_ego)?.frobenius_norm())
}

pub fn cls_loss(s: &Tensor, g: &Tensor, label: usize) -> Result<f64> {
    Ok(cross_entropy(s, label)? + cross_entropy(g, label)?)
}

pub fn total_loss(
    s: &Tensor,
    g: &Tensor,
    f_exo: &Tensor,
    f_ego: &Tensor,
    label: usize,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(combine(
        cls_loss(s, g, label)?,
        acp_loss(s, g, weights.temperature)?,
        kt_loss(f_exo, f_ego)?,
        weights,
    ))
}

/// `λ1·L_cls + λ2·L_ACP + λ3·L_KT`.
pub fn combine(cls: f64, acp: f64, kt: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        cls,
        acp,
        kt,
        total: weights.lambda_cls * cls + weights.lambda_acp * acp + weights.lambda_kt * kt,
    }
}

pub fn acp_loss_on_tape(
    tape: &mut Tape,
    s: Var,
    g: Var,
    temperature: f64,
    gradient: AcpGradient,
) -> Result<Var> {
    check_classes(tape.value(s).len())?;
    let p = match gradient {
        AcpGradient::TargetStopped => {
            let probs = softmax_t(tape.value(s), temperature)?;
            tape.detached(probs)?
        }
        AcpGradient::BothSides => tape.softmax_t(s, temperature)?,
    };
    let q = tape.softmax_t(g, temperature)?;
    tape.corelation_ce(p, q, ACP_LOG_EPS)
}

/// Tape handles of the weighted objective and its components.
pub struct TapeLoss {
    pub total: Var,
    pub cls: Var,
    pub acp: Var,
    pub kt: Var,
}

impl TapeLoss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        LossBreakdown {
            cls: v(self.cls),
            acp: v(self.acp),
            kt: v(self.kt),
            total: v(self.total),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    s: Var,
    g: Var,
    f_exo: Var,
    f_ego: Var,
    label: usize,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<TapeLoss> {
    weights.validate()?;
    let ce_s = tape.cross_entropy(s, label)?;
    let ce_g = tape.cross_entropy(g, label)?;
    let cls = tape.weighted_sum(&[(ce_s, 1.0), (ce_g, 1.0)])?;
    let acp = acp_loss_on_tape(tape, s, g, weights.temperature, options.acp_gradient)?;
    let kt_target = if options.kt_target_stopped {
        let v = tape.value(f_exo).clone();
        tape.detached(v)?
    } else {
        f_exo
    };
    let kt = tape.l2_distance(kt_target, f_ego, options.kt_squared)?;
    let mut terms = vec![(cls, weights.lambda_cls)];
    if weights.lambda_acp != 0.0 {
        terms.push((acp, weights.lambda_acp));
    }
    if weights.lambda_kt != 0.0 {
        terms.push((kt, weights.lambda_kt));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(TapeLoss { total, cls, acp, kt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x).unwrap()
    }

    fn self_entropy(s: &Tensor, t: f64) -> f64 {
        let p = softmax_t(s, t).unwrap();
        let mut h = 0.0;
        for &a in p.data() {
            for &b in p.data() {
                h -= a * b * (a * b).ln();
            }
        }
        h
    }

    #[test]
    fn acp_examples() {
        // p = q = [.5, .5]; every P_jk = Q_jk = .25; L = -4 * .25 * ln .25
        let l = acp_loss(&v(&[1.0, 1.0]), &v(&[1.0, 1.0]), 1.0).unwrap();
        assert!((l - 1.3863).abs() < 1e-4, "{l}");

        let s = v(&[0.3, -1.2, 2.0, 0.1]);
        let l = acp_loss(&s, &s, 1.0).unwrap();
        assert!((l - self_entropy(&s, 1.0)).abs() < 1e-6);

        let l = acp_loss(&v(&[3.0, -2.0, 0.5]), &v(&[-1.0, 4.0, 0.0]), 1e6).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-4, "{l}");

        assert!(matches!(acp_loss(&v(&[1.0]), &v(&[1.0]), 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn kt_examples() {
        assert_eq!(kt_loss(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(kt_loss(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(kt_loss(&v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap(), 5.0);
        assert!(matches!(kt_loss(&v(&[1.0]), &v(&[1.0, 2.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn cls_examples() {
        let u = v(&[0.0; 4]);
        assert!((cls_loss(&u, &u, 1).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        let big = v(&[0.0, 1e6, 0.0, 0.0]);
        assert!(cls_loss(&big, &big, 1).unwrap() < 1e-12);
        let s = v(&[0.2, 0.1, -0.3, 0.0]);
        let exo_only = cross_entropy(&s, 2).unwrap();
        let ego_perfect = v(&[0.0, 0.0, 1e6, 0.0]);
        assert!((cls_loss(&s, &ego_perfect, 2).unwrap() - exo_only).abs() < 1e-12);
        assert!(cls_loss(&u, &u, 4).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(combine(2.0, 2.0, 2.0, &w).total, 4.0);
        assert_eq!(combine(0.0, 0.0, 0.0, &w).total, 0.0);
        let cls_only = LossWeights { lambda_acp: 0.0, lambda_kt: 0.0, ..w };
        let s = v(&[0.5, -0.5, 1.0]);
        let g = v(&[0.0, 1.0, -1.0]);
        let f = v(&[1.0, 2.0]);
        let h = v(&[0.0, 2.5]);
        let b = total_loss(&s, &g, &f, &h, 0, &cls_only).unwrap();
        assert_eq!(b.total, cls_loss(&s, &g, 0).unwrap());
    }

    #[test]
    fn tape_objective_matches_value_functions_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [AcpGradient::TargetStopped, AcpGradient::BothSides] {
            let mut store = ParamStore::new();
            let mut rv = |n: usize| v(&(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
            store.insert("s", rv(5)).unwrap();
            store.insert("g", rv(5)).unwrap();
            store.insert("fe", rv(4)).unwrap();
            store.insert("fg", rv(4)).unwrap();
            let weights = LossWeights { temperature: 1.7, ..LossWeights::default() };
            let opts = LossOptions { acp_gradient: mode, ..LossOptions::default() };
            let build = |tape: &mut Tape, p: &ParamStore| {
                let s = tape.param(p, "s")?;
                let g = tape.param(p, "g")?;
                let fe = tape.param(p, "fe")?;
                let fg = tape.param(p, "fg")?;
                Ok(total_loss_on_tape(tape, s, g, fe, fg, 3, &weights, &opts)?.total)
            };
            let mut tape = Tape::new();
            let loss = build(&mut tape, &store).unwrap();
            let direct = total_loss(
                store.get("s").unwrap(),
                store.get("g").unwrap(),
                store.get("fe").unwrap(),
                store.get("fg").unwrap(),
                3,
                &weights,
            )
            .unwrap();
            assert!((tape.value(loss).data()[0] - direct.total).abs() < 1e-12);
            let report = grad_check(&store, build, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(report.max_rel_error <= 1e-6, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn kt_exo_side_is_stopped_unless_asked() {
        let kt_only = LossWeights { lambda_cls: 0.0, lambda_acp: 0.0, ..LossWeights::default() };
        for stopped in [true, false] {
            let mut store = ParamStore::new();
            store.insert("s", v(&[0.4, -0.2, 1.0])).unwrap();
            store.insert("g", v(&[0.0, 0.3, -0.5])).unwrap();
            store.insert("fe", v(&[1.0, 2.0])).unwrap();
            store.insert("fg", v(&[0.5, -1.0])).unwrap();
            let opts = LossOptions { kt_target_stopped: stopped, ..LossOptions::default() };
            let mut tape = Tape::new();
            let [s, g, fe, fg] = ["s", "g", "fe", "fg"].map(|k| tape.param(&store, k).unwrap());
            let l = total_loss_on_tape(&mut tape, s, g, fe, fg, 0, &kt_only, &opts).unwrap();
            tape.backward(l.total, &mut store).unwrap();
            let exo_moves = store.grad("fe").unwrap().data().iter().any(|&x| x != 0.0);
            assert_eq!(exo_moves, !stopped);
            assert!(store.grad("fg").unwrap().data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn stopped_target_sends_no_acp_gradient_to_exo_scores() {
        let mut store = ParamStore::new();
        store.insert("s", v(&[0.4, -0.2, 1.0])).unwrap();
        store.insert("g", v(&[0.0, 0.3, -0.5])).unwrap();
        let mut tape = Tape::new();
        let s = tape.param(&store, "s").unwrap();
        let g = tape.param(&store, "g").unwrap();
        let l = acp_loss_on_tape(&mut tape, s, g, 1.0, AcpGradient::TargetStopped).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert!(store.grad("s").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(store.grad("g").unwrap().data().iter().any(|&x| x != 0.0));
    }

    fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-4.0f64..4.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn acp_dominates_self_entropy(s in logits(5), g in logits(5), t in 0.3f64..3.0) {
            let (s, g) = (v(&s), v(&g));
            let l = acp_loss(&s, &g, t).unwrap();
            prop_assert!(l >= self_entropy(&s, t) - 1e-9);
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn acp_is_shift_invariant(s in logits(4), g in logits(4), a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let base = acp_loss(&v(&s), &v(&g), 1.0).unwrap();
            let s2: Vec<f64> = s.iter().map(|x| x + a).collect();
            let g2: Vec<f64> = g.iter().map(|x| x + b).collect();
            let shifted = acp_loss(&v(&s2), &v(&g2), 1.0).unwrap();
            prop_assert!((base - shifted).abs() <= 1e-9);
        }

        #[test]
        fn kt_triangle_inequality(a in logits(6), b in logits(6), c in logits(6)) {
            let (a, b, c) = (v(&a), v(&b), v(&c));
            let ab = kt_loss(&a, &b).unwrap();
            let bc = kt_loss(&b, &c).unwrap();
            let ac = kt_loss(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
