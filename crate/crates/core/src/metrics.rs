//! Heatmap metrics (KLD, SIM, NSS), point-to-heatmap conversion and the
//! per-split report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METRIC_EPS: f64 = 1e-10;

/// Gaussian width used for 224 px ground truth; scaled with resolution.
pub const SIGMA_AT_224: f64 = 8.0;

pub fn default_sigma(image_size: usize) -> f64 {
    SIGMA_AT_224 * image_size as f64 / 224.0
}

/// Pixel coordinates `(x, y)`, 0-indexed, `x` = column.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointAnnotation {
    pub points: Vec<(usize, usize)>,
}

impl PointAnnotation {
    pub fn new(points: Vec<(usize, usize)>) -> Self {
        Self { points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if x >= w || y >= h {
                return Err(Error::Eval(format!("point ({x}, {y}) outside {w}x{h} image")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPair {
    pub prediction: Tensor,
    pub gt_map: Tensor,
    pub points: PointAnnotation,
}

/// Sum of isotropic Gaussians at each point, peak-normalized to 1.
pub fn points_to_heatmap(points: &PointAnnotation, h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Param("heatmap size must be positive".into()));
    }
    points.check_bounds(h, w).map_err(|e| match e {
        Error::Eval(msg) => Error::Data {
            path: "<annotation>".into(),
            line: None,
            msg,
        },
        other => other,
    })?;
    let mut map = vec![0.0; h * w];
    let denom = 2.0 * sigma * sigma;
    for &(px, py) in &points.points {
        for y in 0..h {
            let dy = y as f64 - py as f64;
            for x in 0..w {
                let dx = x as f64 - px as f64;
                map[y * w + x] += (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    let peak = map.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut map {
            *v /= peak;
        }
    }
    Tensor::new(vec![h, w], map)
}

fn as_distribution(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    if t.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Eval(format!("{what} has negative values")));
    }
    let s = t.sum();
    if !(s > 0.0) {
        return Err(Error::Eval(format!("{what} sums to zero")));
    }
    Ok(t.data().iter().map(|v| v / s).collect())
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("map dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `Σ Q·ln(Q/(P + ε) + ε)` with `P` the normalized prediction and `Q` the
/// normalized ground truth. Lower is better.
pub fn kld(prediction: &Tensor, gt_map: &Tensor) -> Result<f64> {
    same_dims(prediction, gt_map)?;
    let p = as_distribution(prediction, "prediction")?;
    let q = as_distribution(gt_map, "ground-truth map")?;
    Ok(q.iter()
        .zip(&p)
        .map(|(&qi, &pi)| qi * (qi / (pi + METRIC_EPS) + METRIC_EPS).ln())
        .sum())
}

/// Histogram intersection of the two normalized maps. Higher is better.
pub fn sim(prediction: &Tensor, gt_map: &Tensor) -> Result<f64> {
    same_dims(prediction, gt_map)?;
    let p = as_distribution(prediction, "prediction")?;
    let q = as_distribution(gt_map, "ground-truth map")?;
    Ok(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum())
}

/// Mean standardized prediction at the annotated pixels (population std).
/// A constant prediction scores 0.
pub fn nss(prediction: &Tensor, points: &PointAnnotation) -> Result<f64> {
    let [h, w] = prediction.dims()[..] else {
        return Err(Error::Shape(format!("nss: prediction must be h×w, got {:?}", prediction.dims())));
    };
    if points.is_empty() {
        return Err(Error::Eval("nss needs at least one annotated point".into()));
    }
    points.check_bounds(h, w)?;
    let mean = prediction.mean();
    let var = prediction.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / prediction.len() as f64;
    let std = var.sqrt();
    // rounding in the mean leaves a tiny spread on constant maps
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Ok(0.0);
    }
    let total: f64 = points
        .points
        .iter()
        .map(|&(x, y)| (prediction.data()[y * w + x] - mean) / std)
        .sum();
    Ok(total / points.points.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleMetrics {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

pub fn score_pair(pair: &HeatmapPair) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        kld: kld(&pair.prediction, &pair.gt_map)?,
        sim: sim(&pair.prediction, &pair.gt_map)?,
        nss: nss(&pair.prediction, &pair.points)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

impl MetricSummary {
    fn from_samples(samples: &[SampleMetrics]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
        Self {
            count: n,
            kld: mean(|s| s.kld),
            sim: mean(|s| s.sim),
            nss: mean(|s| s.nss),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub overall: MetricSummary,
    /// Keyed by affordance name, sorted.
    pub per_affordance: Vec<(String, MetricSummary)>,
    pub skipped: usize,
}

/// One scored sample awaiting aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub sample_id: String,
    pub affordance: String,
    pub metrics: SampleMetrics,
}

impl MetricReport {
    /// Unweighted means overall and per affordance. Samples are sorted by id
    /// before reducing, so the result does not depend on input order.
    pub fn aggregate(split: &str, mut samples: Vec<ScoredSample>, skipped: usize) -> Self {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.affordance.cmp(&b.affordance)));
        let all: Vec<SampleMetrics> = samples.iter().map(|s| s.metrics).collect();
        let mut groups: BTreeMap<&str, Vec<SampleMetrics>> = BTreeMap::new();
        for s in &samples {
            groups.entry(&s.affordance).or_default().push(s.metrics);
        }
        Self {
            split: split.to_string(),
            overall: MetricSummary::from_samples(&all),
            per_affordance: groups
                .into_iter()
                .map(|(k, v)| (k.to_string(), MetricSummary::from_samples(&v)))
                .collect(),
            skipped,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,affordance,count,kld,sim,nss\n");
        let mut row = |name: &str, m: &MetricSummary| {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                self.split, name, m.count, m.kld, m.sim, m.nss
            );
        };
        row("overall", &self.overall);
        for (name, m) in &self.per_affordance {
            row(name, m);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("split: {}\n", self.split);
        let _ = writeln!(
            out,
            "samples: {} (skipped {})\nKLD {:.4}  SIM {:.4}  NSS {:.4}\n",
            self.overall.count, self.skipped, self.overall.kld, self.overall.sim, self.overall.nss
        );
        let _ = writeln!(out, "{:<16} {:>5} {:>8} {:>8} {:>8}", "affordance", "n", "KLD", "SIM", "NSS");
        for (name, m) in &self.per_affordance {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>8.4} {:>8.4} {:>8.4}",
                name, m.count, m.kld, m.sim, m.nss
            );
        }
        out
    }
}
