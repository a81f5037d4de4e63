//! Split evaluation: CAM predictions against point annotations.

use std::path::Path;

use crate::cam::{compute_cam, postprocess, AffordanceHeatmap, CamOptions};
use crate::config::RunConfig;
use crate::data::{load_manifest, DataStore, DatasetManifest, ImageEntry, SplitMode};
use crate::error::{Error, Result};
use crate::metrics::{points_to_heatmap, score_pair, HeatmapPair, MetricReport, ScoredSample};
use crate::model::{CrossViewModel, FC_W};
use crate::tensor::Tensor;

/// Produces an `h×w` non-negative heatmap for one test image.
pub trait Predictor {
    fn predict(&self, image: &Tensor, entry: &ImageEntry, gt_map: &Tensor) -> Result<Tensor>;
}

pub struct CamPredictor<'a> {
    pub model: &'a CrossViewModel,
    pub options: CamOptions,
}

impl Predictor for CamPredictor<'_> {
    fn predict(&self, image: &Tensor, entry: &ImageEntry, _gt: &Tensor) -> Result<Tensor> {
        let [_, h, w] = image.dims()[..] else {
            return Err(Error::Shape(format!("image dims {:?}", image.dims())));
        };
        Ok(predict_heatmap(self.model, image, entry.affordance, h, w, self.options)?.map)
    }
}

/// Egocentric inference, CAM for `class`, normalized and resized to `out_h × out_w`.
pub fn predict_heatmap(
    model: &CrossViewModel,
    image: &Tensor,
    class: usize,
    out_h: usize,
    out_w: usize,
    options: CamOptions,
) -> Result<AffordanceHeatmap> {
    let (_, d_ego) = model.forward_infer(image)?;
    let raw = compute_cam(&d_ego, model.params.get(FC_W)?, class)?;
    Ok(AffordanceHeatmap {
        map: postprocess(&raw, out_h, out_w, options)?,
        affordance: class,
        image_id: String::new(),
    })
}

/// Returns the ground-truth map itself.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, _image: &Tensor, _entry: &ImageEntry, gt: &Tensor) -> Result<Tensor> {
        Ok(gt.clone())
    }
}

/// Constant map.
pub struct UniformPredictor;

impl Predictor for UniformPredictor {
    fn predict(&self, _image: &Tensor, _entry: &ImageEntry, gt: &Tensor) -> Result<Tensor> {
        Ok(Tensor::full(gt.dims(), 1.0))
    }
}

/// Score every test image that has annotation points. Samples without
/// points, or whose maps cannot be scored, are counted as skipped.
pub fn evaluate_split(
    store: &DataStore,
    manifest: &DatasetManifest,
    predictor: &dyn Predictor,
    sigma: f64,
) -> Result<MetricReport> {
    if manifest.test.is_empty() {
        return Err(Error::Eval(format!("the {} test split is empty", manifest.mode)));
    }
    let mut scored = Vec::new();
    let mut skipped = 0;
    for entry in &manifest.test {
        let Some(points) = entry.points.as_ref().filter(|p| !p.is_empty()) else {
            skipped += 1;
            continue;
        };
        let image = store.read_image(&entry.image)?;
        let [_, h, w] = image.dims()[..] else {
            return Err(Error::Shape(format!("image dims {:?}", image.dims())));
        };
        let gt_map = points_to_heatmap(points, h, w, sigma)?;
        let prediction = predictor.predict(&image, entry, &gt_map)?;
        let pair = HeatmapPair {
            prediction,
            gt_map,
            points: points.clone(),
        };
        match score_pair(&pair) {
            Ok(metrics) => scored.push(ScoredSample {
                sample_id: entry.id(),
                affordance: manifest.affordance_name(entry.affordance).to_string(),
                metrics,
            }),
            Err(Error::Eval(msg)) => {
                log::warn!("skipping {}: {msg}", entry.image.display());
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} test samples skipped");
    }
    Ok(MetricReport::aggregate(&manifest.mode.to_string(), scored, skipped))
}

pub fn metrics_csv_path(out_dir: &Path, split: SplitMode) -> std::path::PathBuf {
    out_dir.join(format!("metrics_{split}.csv"))
}

pub fn metrics_text_path(out_dir: &Path, split: SplitMode) -> std::path::PathBuf {
    out_dir.join(format!("metrics_{split}.txt"))
}

pub fn write_report(report: &MetricReport, out_dir: &Path, split: SplitMode) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (path, text) in [
        (metrics_csv_path(out_dir, split), report.to_csv()),
        (metrics_text_path(out_dir, split), report.to_text()),
    ] {
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Load `checkpoint` under `cfg`'s dimensions, evaluate `split` and write
/// the CSV and text reports into `out_dir`.
pub fn eval(
    store: &DataStore,
    cfg: &RunConfig,
    checkpoint: &Path,
    split: SplitMode,
    out_dir: &Path,
) -> Result<MetricReport> {
    cfg.validate()?;
    let model = CrossViewModel::load(cfg.model_config(), checkpoint)?;
    let manifest = load_manifest(store, split, cfg.seed)?;
    if manifest.affordances.len() != cfg.num_classes {
        return Err(Error::Compat(format!(
            "checkpoint classifies {} classes but the dataset has {} affordances",
            cfg.num_classes,
            manifest.affordances.len()
        )));
    }
    let predictor = CamPredictor {
        model: &model,
        options: CamOptions::default(),
    };
    let report = evaluate_split(store, &manifest, &predictor, cfg.sigma_for(cfg.image_size))?;
    write_report(&report, out_dir, split)?;
    Ok(report)
}
