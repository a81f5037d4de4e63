//! Train and evaluate every on/off combination of the three components.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{DataStore, SplitMode};
use crate::error::{Error, Result};
use crate::eval::eval;
use crate::metrics::MetricReport;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub aim: bool,
    pub acp: bool,
    pub kt: bool,
}

impl Toggles {
    /// All eight combinations, all-off first and all-on last.
    pub fn all() -> [Toggles; 8] {
        std::array::from_fn(|i| Toggles {
            aim: i & 4 != 0,
            acp: i & 2 != 0,
            kt: i & 1 != 0,
        })
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        RunConfig {
            aim: self.aim,
            acp: self.acp,
            kt: self.kt,
            ..base.clone()
        }
    }

    pub fn label(self) -> String {
        let b = |v: bool| if v { "on" } else { "off" };
        format!("aim-{}_acp-{}_kt-{}", b(self.aim), b(self.acp), b(self.kt))
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub split: SplitMode,
    pub toggles: Toggles,
    pub kld: Stat,
    pub sim: Stat,
    pub nss: Stat,
    pub reports: Vec<MetricReport>,
}

pub fn seed_list(base: &RunConfig) -> Vec<u64> {
    (0..base.seeds as u64).map(|i| base.seed + i).collect()
}

pub fn run_dir_for(out: &Path, split: SplitMode, toggles: Toggles, seed: u64) -> PathBuf {
    out.join(split.to_string()).join(toggles.label()).join(format!("seed{seed}"))
}

/// Train then evaluate one configuration from its written checkpoint.
pub fn train_and_eval(store: &DataStore, cfg: &RunConfig, split: SplitMode, run_dir: &Path) -> Result<MetricReport> {
    let outcome = train(store, cfg, split, run_dir)?;
    eval(store, cfg, &outcome.checkpoint, split, run_dir)
}

pub fn ablation_row(
    store: &DataStore,
    base: &RunConfig,
    split: SplitMode,
    toggles: Toggles,
    out: &Path,
) -> Result<AblationRow> {
    let mut reports = Vec::new();
    for seed in seed_list(base) {
        let cfg = RunConfig {
            seed,
            ..toggles.apply(base)
        };
        let dir = run_dir_for(out, split, toggles, seed);
        log::info!("ablation {split} {} seed {seed}", toggles.label());
        reports.push(train_and_eval(store, &cfg, split, &dir)?);
    }
    let col = |f: fn(&MetricReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AblationRow {
        split,
        toggles,
        kld: col(|r| r.overall.kld),
        sim: col(|r| r.overall.sim),
        nss: col(|r| r.overall.nss),
        reports,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("split,aim,acp,kt,kld,kld_std,sim,sim_std,nss,nss_std\n");
    let b = |v: bool| u8::from(v);
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.split,
            b(r.toggles.aim),
            b(r.toggles.acp),
            b(r.toggles.kt),
            r.kld.mean,
            r.kld.std,
            r.sim.mean,
            r.sim.std,
            r.nss.mean,
            r.nss.std
        );
    }
    out
}

/// Every combination on every requested split; writes `ablation.csv`.
pub fn ablate(store: &DataStore, base: &RunConfig, splits: &[SplitMode], out: &Path) -> Result<Vec<AblationRow>> {
    base.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    base.write_echo(&out.join(crate::train::CONFIG_ECHO))?;
    let mut rows = Vec::new();
    for &split in splits {
        for toggles in Toggles::all() {
            rows.push(ablation_row(store, base, split, toggles, out)?);
        }
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
