//! Run configuration: line-oriented `key = value` text with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::aim::NmfConfig;
use crate::data::Pairing;
use crate::error::{Error, Result};
use crate::losses::{AcpGradient, LossOptions, LossWeights};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lr: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` epochs; 0 keeps it constant.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    /// Exocentric images per group.
    pub group_size: usize,
    /// Sample groups whose gradients are averaged into one SGD step.
    pub batch: usize,
    /// Maximum joint gradient norm per step; 0 disables clipping.
    pub clip: f64,
    pub rank: usize,
    pub nmf_iters: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub seed: u64,
    pub aim: bool,
    pub acp: bool,
    pub kt: bool,
    pub image_size: usize,
    pub channels: usize,
    pub reduced_channels: usize,
    pub d: usize,
    pub num_classes: usize,
    pub share_backbone: bool,
    pub head_relu: bool,
    pub augment: bool,
    pub pairing: Pairing,
    pub kt_squared: bool,
    pub acp_both_sides: bool,
    /// Let the transfer loss also move the exocentric features.
    pub kt_both_sides: bool,
    /// Ground-truth Gaussian width in pixels; 0 picks the resolution-scaled default.
    pub sigma: f64,
    /// Seeds averaged by the ablation driver.
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            lr: 1e-3,
            lr_step: 0,
            lr_gamma: 0.1,
            epochs: 20,
            group_size: 3,
            batch: 1,
            clip: 0.0,
            rank: m.nmf.rank,
            nmf_iters: m.nmf.iterations,
            alpha: m.nmf.alpha,
            temperature: w.temperature,
            lambda1: w.lambda_cls,
            lambda2: w.lambda_acp,
            lambda3: w.lambda_kt,
            seed: 0,
            aim: true,
            acp: true,
            kt: true,
            image_size: m.image_size,
            channels: m.channels,
            reduced_channels: m.reduced_channels,
            d: m.head_dim,
            num_classes: m.num_classes,
            share_backbone: m.share_backbone,
            head_relu: m.head_relu,
            augment: true,
            pairing: Pairing::Affordance,
            kt_squared: false,
            acp_both_sides: false,
            kt_both_sides: false,
            sigma: 0.0,
            seeds: 3,
        }
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

fn positive(v: f64) -> std::result::Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be > 0"))
    }
}

fn non_negative(v: f64) -> std::result::Result<f64, String> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be >= 0"))
    }
}

fn at_least(v: usize, min: usize) -> std::result::Result<usize, String> {
    if v >= min {
        Ok(v)
    } else {
        Err(format!("{v} must be >= {min}"))
    }
}

pub const KEYS: [&str; 32] = [
    "lr", "lr_step", "lr_gamma", "epochs", "N", "batch", "clip", "r", "nmf_iters", "alpha", "T", "lambda1", "lambda2",
    "lambda3", "seed", "aim", "acp", "kt", "image_size", "channels", "reduced_channels", "d",
    "num_classes", "share_backbone", "head_relu", "augment", "pairing", "kt_squared",
    "acp_both_sides", "kt_both_sides", "sigma", "seeds",
];

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "lr" => self.lr = positive(parse_num(v)?)?,
            "lr_step" => self.lr_step = parse_num(v)?,
            "lr_gamma" => self.lr_gamma = positive(parse_num(v)?)?,
            "epochs" => self.epochs = parse_num(v)?,
            "N" => self.group_size = at_least(parse_num(v)?, 1)?,
            "batch" => self.batch = at_least(parse_num(v)?, 1)?,
            "clip" => self.clip = non_negative(parse_num(v)?)?,
            "r" => self.rank = at_least(parse_num(v)?, 1)?,
            "nmf_iters" => self.nmf_iters = at_least(parse_num(v)?, 1)?,
            "alpha" => {
                let a: f64 = parse_num(v)?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(format!("{a} outside [0, 1]"));
                }
                self.alpha = a;
            }
            "T" => self.temperature = positive(parse_num(v)?)?,
            "lambda1" => self.lambda1 = non_negative(parse_num(v)?)?,
            "lambda2" => self.lambda2 = non_negative(parse_num(v)?)?,
            "lambda3" => self.lambda3 = non_negative(parse_num(v)?)?,
            "seed" => self.seed = parse_num(v)?,
            "aim" => self.aim = parse_bool(v)?,
            "acp" => self.acp = parse_bool(v)?,
            "kt" => self.kt = parse_bool(v)?,
            "image_size" => {
                let n = at_least(parse_num(v)?, 8)?;
                if n % 8 != 0 {
                    return Err(format!("{n} is not a multiple of 8"));
                }
                self.image_size = n;
            }
            "channels" => {
                let n = at_least(parse_num(v)?, 4)?;
                if n % 4 != 0 {
                    return Err(format!("{n} is not a multiple of 4"));
                }
                self.channels = n;
            }
            "reduced_channels" => self.reduced_channels = at_least(parse_num(v)?, 1)?,
            "d" => self.d = at_least(parse_num(v)?, 1)?,
            "num_classes" => self.num_classes = at_least(parse_num(v)?, 2)?,
            "share_backbone" => self.share_backbone = parse_bool(v)?,
            "head_relu" => self.head_relu = parse_bool(v)?,
            "augment" => self.augment = parse_bool(v)?,
            "pairing" => self.pairing = v.parse().map_err(|e: Error| e.to_string())?,
            "kt_squared" => self.kt_squared = parse_bool(v)?,
            "acp_both_sides" => self.acp_both_sides = parse_bool(v)?,
            "kt_both_sides" => self.kt_both_sides = parse_bool(v)?,
            "sigma" => self.sigma = non_negative(parse_num(v)?)?,
            "seeds" => self.seeds = at_least(parse_num(v)?, 1)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut lines: BTreeMap<&'static str, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigLine {
                    line: line_no,
                    key: line.to_string(),
                    msg: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let err = |msg: String| Error::ConfigLine {
                line: line_no,
                key: key.to_string(),
                msg,
            };
            if let Some(k) = KEYS.iter().find(|k| **k == key) {
                if let Some(prev) = lines.insert(k, line_no) {
                    return Err(err(format!("duplicate key, first set at line {prev}")));
                }
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate_with_lines(&lines)?;
        Ok(cfg)
    }

    /// Apply one `key=value` override; call [`RunConfig::validate`] afterwards.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((key, value)) = spec.split_once('=') else {
            return Err(Error::Config(format!("override `{spec}` is not KEY=VALUE")));
        };
        let key = key.trim();
        self.set(key, value.trim())
            .map_err(|msg| Error::Config(format!("override `{key}`: {msg}")))
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn validate_with_lines(&self, lines: &BTreeMap<&str, usize>) -> Result<()> {
        if self.rank > self.reduced_channels {
            let key = if lines.contains_key("r") { "r" } else { "reduced_channels" };
            return Err(Error::ConfigLine {
                line: lines.get(key).copied().unwrap_or(0),
                key: key.into(),
                msg: format!(
                    "rank {} exceeds reduced_channels {}",
                    self.rank, self.reduced_channels
                ),
            });
        }
        if self.image_size < 16 {
            return Err(Error::ConfigLine {
                line: lines.get("image_size").copied().unwrap_or(0),
                key: "image_size".into(),
                msg: "must be at least 16".into(),
            });
        }
        if self.acp && self.num_classes < 2 {
            return Err(Error::Config("the co-relation loss needs at least two classes".into()));
        }
        self.model_config().validate()?;
        self.loss_weights().validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_lines(&BTreeMap::new())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            reduced_channels: self.reduced_channels,
            head_dim: self.d,
            num_classes: self.num_classes,
            nmf: NmfConfig {
                rank: self.rank,
                iterations: self.nmf_iters,
                alpha: self.alpha,
                ..NmfConfig::default()
            },
            share_backbone: self.share_backbone,
            head_relu: self.head_relu,
            aim_enabled: self.aim,
        }
    }

    /// Toggles off zero the corresponding weight.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda1,
            lambda_acp: if self.acp { self.lambda2 } else { 0.0 },
            lambda_kt: if self.kt { self.lambda3 } else { 0.0 },
            temperature: self.temperature,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            acp_gradient: if self.acp_both_sides {
                AcpGradient::BothSides
            } else {
                AcpGradient::TargetStopped
            },
            kt_squared: self.kt_squared,
            kt_target_stopped: !self.kt_both_sides,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_step == 0 {
            self.lr
        } else {
            self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
        }
    }

    pub fn sigma_for(&self, image_size: usize) -> f64 {
        if self.sigma > 0.0 {
            self.sigma
        } else {
            crate::metrics::default_sigma(image_size)
        }
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_config_string(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let pairing = match self.pairing {
            Pairing::Affordance => "affordance",
            Pairing::Object => "object",
        };
        let values: [String; 32] = [
            format!("{:?}", self.lr),
            self.lr_step.to_string(),
            format!("{:?}", self.lr_gamma),
            self.epochs.to_string(),
            self.group_size.to_string(),
            self.batch.to_string(),
            format!("{:?}", self.clip),
            self.rank.to_string(),
            self.nmf_iters.to_string(),
            format!("{:?}", self.alpha),
            format!("{:?}", self.temperature),
            format!("{:?}", self.lambda1),
            format!("{:?}", self.lambda2),
            format!("{:?}", self.lambda3),
            self.seed.to_string(),
            b(self.aim).into(),
            b(self.acp).into(),
            b(self.kt).into(),
            self.image_size.to_string(),
            self.channels.to_string(),
            self.reduced_channels.to_string(),
            self.d.to_string(),
            self.num_classes.to_string(),
            b(self.share_backbone).into(),
            b(self.head_relu).into(),
            b(self.augment).into(),
            pairing.into(),
            b(self.kt_squared).into(),
            b(self.acp_both_sides).into(),
            b(self.kt_both_sides).into(),
            format!("{:?}", self.sigma),
            self.seeds.to_string(),
        ];
        let mut out = String::from("# effective configuration\n");
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string()).map_err(|e| Error::io(path, e))
    }
}
