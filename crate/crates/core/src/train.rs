//! Training loop over sample groups.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{make_sample_groups, scan_manifest, DataStore, DatasetManifest, ImageBank, SplitMode};
use crate::data::groups::epoch_augmenter;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::CrossViewModel;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

pub const CONFIG_ECHO: &str = "config.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.xvc";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const NUMERIC_DUMP: &str = "numeric_failure.txt";

/// Mean component losses over the groups of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub acp: f64,
    pub kt: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CrossViewModel,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn epoch_checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:03}.xvc"))
}

pub fn initial_model(cfg: &RunConfig) -> Result<CrossViewModel> {
    CrossViewModel::new(cfg.model_config(), &mut substream(cfg.seed, Stream::Init, 0))
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,cls,acp,kt,total\n");
    for r in log {
        let _ = writeln!(out, "{},{:.9},{:.9},{:.9},{:.9}", r.epoch, r.cls, r.acp, r.kt, r.total);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn numeric_dump(run_dir: &Path, epoch: usize, group: usize, err: &Error) {
    let text = format!("epoch = {epoch}\ngroup = {group}\nerror = {err}\n");
    let path = run_dir.join(NUMERIC_DUMP);
    if let Err(e) = write(&path, &text) {
        log::warn!("could not write {}: {e}", path.display());
    }
}

/// Train on the `split` training side of `store`. Only image files are read;
/// the manifest comes from a directory scan, so annotations stay untouched.
pub fn train(store: &DataStore, cfg: &RunConfig, split: SplitMode, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = scan_manifest(store, split, cfg.seed)?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    if manifest.affordances.len() != cfg.num_classes {
        return Err(Error::Config(format!(
            "num_classes = {} but the dataset has {} affordances",
            cfg.num_classes,
            manifest.affordances.len()
        )));
    }
    std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(run_dir, e))?;
    cfg.write_echo(&run_dir.join(CONFIG_ECHO))?;
    let bank = ImageBank::load_train(store, &manifest)?;
    let mut model = initial_model(cfg)?;
    let weights = cfg.loss_weights();
    let options = cfg.loss_options();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let groups = make_sample_groups(&manifest, cfg.group_size, cfg.seed, epoch as u64, cfg.pairing)?;
        let mut augment = epoch_augmenter(cfg.seed, epoch as u64);
        let lr = cfg.lr_at(epoch);
        let mut sums = LossBreakdown::default();
        for (bi, chunk) in groups.chunks(cfg.batch).enumerate() {
            let mut w_sum: Option<Tensor> = None;
            for (k, spec) in chunk.iter().enumerate() {
                let gi = bi * cfg.batch + k;
                let group = if cfg.augment {
                    bank.materialize(&manifest, spec, Some(&mut augment))?
                } else {
                    bank.materialize(&manifest, spec, None)?
                };
                let (b, w) = match model.accumulate_gradients(
                    &group.exo_images,
                    &group.ego_image,
                    group.affordance,
                    &weights,
                    &options,
                ) {
                    Ok(v) => v,
                    Err(e @ Error::Numeric(_)) => {
                        numeric_dump(run_dir, epoch, gi, &e);
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                if let Some(w) = w {
                    w_sum = Some(match w_sum {
                        Some(acc) => acc.add(&w)?,
                        None => w,
                    });
                }
                sums.cls += b.cls;
                sums.acp += b.acp;
                sums.kt += b.kt;
                sums.total += b.total;
            }
            // Averaged gradient: the accumulated sum with the step scaled down.
            let n = chunk.len() as f64;
            if cfg.clip > 0.0 {
                model.params.clip_grad_norm(cfg.clip * n);
            }
            if let Err(e) = model.params.sgd_step(lr / n) {
                if matches!(e, Error::Numeric(_)) {
                    numeric_dump(run_dir, epoch, bi * cfg.batch, &e);
                }
                return Err(e);
            }
            if let Some(w) = w_sum {
                model.dictionary.ema_update(&w.scale(1.0 / n)?, cfg.alpha)?;
            }
        }
        let n = groups.len().max(1) as f64;
        let row = EpochLog {
            epoch: epoch + 1,
            cls: sums.cls / n,
            acp: sums.acp / n,
            kt: sums.kt / n,
            total: sums.total / n,
        };
        log::info!(
            "epoch {} cls {:.4} acp {:.4} kt {:.4} total {:.4}",
            row.epoch, row.cls, row.acp, row.kt, row.total
        );
        log.push(row);
        model.save(&epoch_checkpoint_path(run_dir, epoch + 1))?;
        if epoch >= 2 {
            let old = epoch_checkpoint_path(run_dir, epoch - 1);
            std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
        }
        write(&run_dir.join(TRAIN_LOG), &log_csv(&log))?;
    }
    write(&run_dir.join(TRAIN_LOG), &log_csv(&log))?;
    let checkpoint = run_dir.join(FINAL_CHECKPOINT);
    model.save(&checkpoint)?;
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
        manifest,
    })
}
