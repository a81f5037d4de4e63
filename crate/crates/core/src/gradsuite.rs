//! Finite-difference checks of every tape layer and of the full training
//! objective on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aim::{aim_forward, init_params, DictionaryState, NmfConfig, RES_W};
use crate::autodiff::{grad_check, GradCheckReport, ParamStore, Tape, Var};
use crate::error::Result;
use crate::losses::{AcpGradient, LossOptions, LossWeights, ACP_LOG_EPS};
use crate::model::{CrossViewModel, ModelConfig};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub report: GradCheckReport,
}

impl LayerCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_error <= tol
    }
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("finite")
}

fn store_of(entries: Vec<(&str, Tensor)>) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v)?;
    }
    Ok(s)
}

/// `‖y − target‖²` turns any tensor output into a smooth scalar.
fn squared_to(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    tape.l2_distance(y, t, true)
}

fn check<F>(layer: &'static str, store: &ParamStore, rng: &mut ChaCha8Rng, per_param: usize, f: F) -> Result<LayerCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(LayerCheck {
        layer,
        report: grad_check(store, f, per_param, rng)?,
    })
}

/// Small configuration for the end-to-end objective check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: 8,
        reduced_channels: 4,
        head_dim: 6,
        num_classes: 3,
        nmf: NmfConfig {
            rank: 2,
            ..NmfConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Every layer check for one seed.
pub fn layer_checks(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (layer, stride, pad) in [("conv2d", 1, 1), ("conv2d_strided", 2, 0)] {
        let store = store_of(vec![
            ("x", random(&mut rng, &[3, 6, 6], -1.0, 1.0)),
            ("w", random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5)),
            ("b", random(&mut rng, &[4], -0.5, 0.5)),
        ])?;
        let out_hw = if stride == 1 { 6 } else { 2 };
        let target = random(&mut rng, &[4, out_hw, out_hw], -1.0, 1.0);
        out.push(check(layer, &store, &mut rng, 40, |t, p| {
            let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv2d(x, w, b, stride, pad)?;
            squared_to(t, y, &target)
        })?);
    }

    let store = store_of(vec![("x", random(&mut rng, &[2, 3, 4], -1.0, 1.0))])?;
    let target = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    out.push(check("relu", &store, &mut rng, 24, |t, p| {
        let x = t.param(p, "x")?;
        let y = t.relu(x)?;
        squared_to(t, y, &target)
    })?);

    let store = store_of(vec![
        ("a", random(&mut rng, &[2, 3, 3], -1.0, 1.0)),
        ("b", random(&mut rng, &[2, 3, 3], -1.0, 1.0)),
        ("c", random(&mut rng, &[2, 3, 3], -1.0, 1.0)),
    ])?;
    let target = random(&mut rng, &[2], -1.0, 1.0);
    out.push(check("add_mean_gap", &store, &mut rng, 18, |t, p| {
        let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
        let s = t.add(a, b)?;
        let m = t.mean(&[s, c, a])?;
        let g = t.gap(m)?;
        squared_to(t, g, &target)
    })?);

    let store = store_of(vec![
        ("x", random(&mut rng, &[5], -1.0, 1.0)),
        ("w", random(&mut rng, &[3, 5], -1.0, 1.0)),
        ("b", random(&mut rng, &[3], -1.0, 1.0)),
    ])?;
    let label = rng.gen_range(0..3);
    out.push(check("fc_cross_entropy", &store, &mut rng, 15, |t, p| {
        let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
        let y = t.fc(x, w, b)?;
        t.cross_entropy(y, label)
    })?);

    let temperature = rng.gen_range(0.5..2.0);
    let store = store_of(vec![("z", random(&mut rng, &[4], -2.0, 2.0))])?;
    let target = random(&mut rng, &[4], 0.0, 1.0);
    out.push(check("softmax_t", &store, &mut rng, 4, |t, p| {
        let z = t.param(p, "z")?;
        let y = t.softmax_t(z, temperature)?;
        squared_to(t, y, &target)
    })?);

    let store = store_of(vec![
        ("s", random(&mut rng, &[4], -2.0, 2.0)),
        ("g", random(&mut rng, &[4], -2.0, 2.0)),
    ])?;
    out.push(check("corelation_ce", &store, &mut rng, 4, |t, p| {
        let (s, g) = (t.param(p, "s")?, t.param(p, "g")?);
        let ps = t.softmax_t(s, temperature)?;
        let qs = t.softmax_t(g, temperature)?;
        t.corelation_ce(ps, qs, ACP_LOG_EPS)
    })?);

    let store = store_of(vec![
        ("a", random(&mut rng, &[6], -1.0, 1.0)),
        ("b", random(&mut rng, &[6], -1.0, 1.0)),
    ])?;
    let (wa, wb) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
    out.push(check("l2_weighted_sum", &store, &mut rng, 6, |t, p| {
        let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
        let plain = t.l2_distance(a, b, false)?;
        let sq = t.l2_distance(a, b, true)?;
        t.weighted_sum(&[(plain, wa), (sq, wb)])
    })?);

    // Residual reconstruction with the factorization held fixed.
    let mut store = store_of(vec![
        ("z0", random(&mut rng, &[4, 3, 3], -1.0, 1.0)),
        ("z1", random(&mut rng, &[4, 3, 3], -1.0, 1.0)),
    ])?;
    init_params(&mut store, 4, 3, &mut rng)?;
    store.set(RES_W, random(&mut rng, &[4, 3, 1, 1], -0.5, 0.5))?;
    let dict = DictionaryState::init(3, 2, &mut rng);
    let nmf = NmfConfig {
        rank: 2,
        ..NmfConfig::default()
    };
    let target = random(&mut rng, &[4, 3, 3], -1.0, 1.0);
    out.push(check("aim_residual", &store, &mut rng, 12, |t, p| {
        let z = vec![t.param(p, "z0")?, t.param(p, "z1")?];
        let (f, _) = aim_forward(t, p, &z, &dict, &nmf)?;
        let m = t.mean(&f)?;
        squared_to(t, m, &target)
    })?);

    Ok(out)
}

/// Full weighted objective of one group on a freshly initialized small model.
pub fn objective_check(seed: u64, acp_gradient: AcpGradient, per_param: usize) -> Result<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let mut model = CrossViewModel::new(cfg.clone(), &mut rng)?;
    // Exercise the residual path with a non-zero convolution.
    let c = cfg.channels;
    model
        .params
        .set(RES_W, random(&mut rng, &[c, cfg.reduced_channels, 1, 1], -0.5, 0.5))?;
    let n = cfg.image_size;
    let exo: Vec<Tensor> = (0..2).map(|_| random(&mut rng, &[3, n, n], 0.0, 1.0)).collect();
    let ego = random(&mut rng, &[3, n, n], 0.0, 1.0);
    let label = rng.gen_range(0..cfg.num_classes);
    let weights = LossWeights::default();
    let options = LossOptions {
        acp_gradient,
        kt_squared: false,
        kt_target_stopped: acp_gradient == AcpGradient::TargetStopped,
    };
    let layer = match acp_gradient {
        AcpGradient::TargetStopped => "objective",
        AcpGradient::BothSides => "objective_both_sides",
    };
    let report = grad_check(
        &model.params,
        |t, p| {
            let view = CrossViewModel {
                config: model.config.clone(),
                params: p.clone(),
                dictionary: model.dictionary.clone(),
            };
            Ok(view.objective_on_tape(t, &exo, &ego, label, &weights, &options)?.0)
        },
        per_param,
        &mut rng,
    )?;
    Ok(LayerCheck { layer, report })
}

/// Layers plus both objective variants.
pub fn gradient_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut out = layer_checks(seed)?;
    out.push(objective_check(seed, AcpGradient::TargetStopped, 4)?);
    out.push(objective_check(seed, AcpGradient::BothSides, 2)?);
    Ok(out)
}

/// Worst case per layer over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coordinates: usize,
    pub kink_skipped: usize,
}

pub fn summarize(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<LayerSummary>> {
    let mut out: Vec<LayerSummary> = Vec::new();
    for seed in seeds {
        for c in gradient_suite(seed)? {
            let row = match out.iter_mut().find(|r| r.layer == c.layer) {
                Some(r) => r,
                None => {
                    out.push(LayerSummary {
                        layer: c.layer,
                        max_rel_error: 0.0,
                        worst_seed: seed,
                        coordinates: 0,
                        kink_skipped: 0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            if c.report.max_rel_error > row.max_rel_error {
                row.max_rel_error = c.report.max_rel_error;
                row.worst_seed = seed;
            }
            row.coordinates += c.report.coordinates;
            row.kink_skipped += c.report.kink_skipped;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_pass_for_a_few_seeds() {
        for seed in 0..3 {
            for c in layer_checks(seed).unwrap() {
                assert!(c.passed(GRAD_TOLERANCE), "seed {seed}: {c:?}");
            }
        }
    }

    #[test]
    fn objective_passes() {
        let c = objective_check(0, AcpGradient::TargetStopped, 3).unwrap();
        assert!(c.passed(GRAD_TOLERANCE), "{c:?}");
    }
}
