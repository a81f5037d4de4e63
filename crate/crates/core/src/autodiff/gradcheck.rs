//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index where the maximum was observed.
    pub worst: Option<(String, usize)>,
    /// Coordinates left out because a perturbation flipped a ReLU input
    /// across zero, where central differences do not estimate the gradient.
    pub kink_skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_above(analytic, numeric, 1e-8)
}

/// Relative error whose denominator never drops below `floor`.
pub fn relative_error_above(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Smallest gradient a central difference can resolve at loss magnitude
/// `loss`: rounding in `f(x±h)` is a few ulps of the loss, divided by `2h`.
/// Padded by 1e4 so measured errors well inside the noise never count.
pub fn fd_resolution(loss: f64) -> f64 {
    (1e4 * f64::EPSILON * loss.abs() / FD_STEP).max(1e-8)
}

/// Compare the gradient of `build`'s scalar output against central
/// differences with step [`FD_STEP`].
///
/// At most `per_param` coordinates are sampled from each parameter tensor
/// (all of them when the tensor is smaller). Perturbed evaluations replay
/// the stop-gradient values captured in the reference pass. A coordinate is
/// skipped when either perturbed pass changes the ReLU activation pattern.
pub fn grad_check<F, R>(
    store: &ParamStore,
    build: F,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let frozen = tape.detached_values().to_vec();
    let pattern = tape.relu_pattern();

    let eval = |params: &ParamStore| -> Result<(f64, bool)> {
        let mut t = Tape::replaying(frozen.clone());
        let l = build(&mut t, params)?;
        Ok((t.value(l).data()[0], t.relu_pattern() == pattern))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
        kink_skipped: 0,
    };
    let names: Vec<String> = work.names().map(str::to_string).collect();
    let mut probe = work.clone();
    for name in names {
        let len = work.get(&name)?.len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, per_param).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let base = work.get(&name)?.data()[idx];
            let analytic = work.grad(&name)?.data()[idx];

            let mut t = probe.get(&name)?.clone();
            t.set(idx, base + FD_STEP)?;
            probe.set(&name, t.clone())?;
            let (plus, same_plus) = eval(&probe)?;
            t.set(idx, base - FD_STEP)?;
            probe.set(&name, t.clone())?;
            let (minus, same_minus) = eval(&probe)?;
            t.set(idx, base)?;
            probe.set(&name, t)?;

            if !(same_plus && same_minus) {
                report.kink_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error_above(analytic, numeric, fd_resolution(plus.abs().max(minus.abs())));
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
