use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossview::ablate::{ablate, ablation_csv};
use crossview::aim::{nmf_factorize, random_nonnegative, DictionaryState, NmfConfig};
use crossview::cam::CamOptions;
use crossview::config::RunConfig;
use crossview::data::image::{read_ppm, write_pgm};
use crossview::data::{generate_synthetic, scan_manifest, DataStore, SplitMode, SynthConfig};
use crossview::eval::{eval, predict_heatmap};
use crossview::gradsuite::{summarize, GRAD_TOLERANCE};
use crossview::model::CrossViewModel;
use crossview::rng::{substream, Stream};
use crossview::tensor::xvt::write_xvt;
use crossview::train::{train, CONFIG_ECHO};
use crossview::{Error, Result};

#[derive(Parser)]
#[command(name = "crossview", version, about = "Cross-view affordance grounding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file; absent keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse_file(p)?,
            None => RunConfig::default(),
        };
        for ov in &self.overrides {
            cfg.apply_override(ov)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cross-view dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_objects: usize,
        #[arg(long, default_value_t = 5)]
        n_affordances: usize,
        /// Egocentric and exocentric images per object.
        #[arg(long, default_value_t = 12)]
        images_per: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the training side of a split; writes checkpoints and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "seen")]
        split: SplitMode,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test side of a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "seen")]
        split: SplitMode,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Affordance heatmap for one egocentric image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class id, or an affordance name resolved against `--data`.
        #[arg(long)]
        affordance: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Clamp negative activations before normalizing.
        #[arg(long)]
        relu: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Factorize a seeded random non-negative matrix (or an .xvt input).
    Nmf {
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 6)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        rows: usize,
        #[arg(long, default_value_t = 48)]
        cols: usize,
        /// Matrix to factorize instead of a random one.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Train and evaluate all eight component combinations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated splits.
        #[arg(long, default_value = "seen,unseen", value_delimiter = ',')]
        splits: Vec<SplitMode>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n_objects,
            n_affordances,
            images_per,
            size,
            seed,
        } => {
            let cfg = SynthConfig {
                n_affordances,
                n_objects,
                images_per_object: images_per,
                image_size: size,
                seed,
                ..SynthConfig::default()
            };
            let summary = generate_synthetic(&cfg, &out)?;
            println!(
                "wrote {} images over {} affordances to {}",
                summary.records.len(),
                summary.affordances.len(),
                out.display()
            );
        }
        Command::Train { data, out, split, cfg } => {
            let cfg = cfg.load()?;
            let store = DataStore::new(&data);
            let outcome = train(&store, &cfg, split, &out)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: cls {:.4} acp {:.4} kt {:.4} total {:.4}",
                    last.epoch, last.cls, last.acp, last.kt, last.total
                );
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            out,
            cfg,
        } => {
            let cfg = cfg.load()?;
            create_dir(&out)?;
            cfg.write_echo(&out.join(CONFIG_ECHO))?;
            let report = eval(&DataStore::new(&data), &cfg, &checkpoint, split, &out)?;
            print!("{}", report.to_text());
        }
        Command::Cam {
            checkpoint,
            image,
            affordance,
            data,
            out,
            relu,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let class = match affordance.parse::<usize>() {
                Ok(id) => id,
                Err(_) => {
                    let data = data.ok_or_else(|| {
                        Error::Config("an affordance name needs --data to resolve it".into())
                    })?;
                    let m = scan_manifest(&DataStore::new(&data), SplitMode::Seen, cfg.seed)?;
                    m.affordances
                        .iter()
                        .position(|a| *a == affordance)
                        .ok_or_else(|| Error::Config(format!("unknown affordance `{affordance}`")))?
                }
            };
            let model = CrossViewModel::load(cfg.model_config(), &checkpoint)?;
            let img = read_ppm(&image)?;
            let [_, h, w] = img.dims()[..] else {
                return Err(Error::Shape(format!("image dims {:?}", img.dims())));
            };
            let options = CamOptions {
                relu_before_normalize: relu,
            };
            let heat = predict_heatmap(&model, &img, class, h, w, options)?;
            create_dir(&out)?;
            cfg.write_echo(&out.join(CONFIG_ECHO))?;
            write_xvt(&out.join("heatmap.xvt"), &heat.map)?;
            write_pgm(&out.join("heatmap.pgm"), &heat.map)?;
            println!("heatmap for class {class} written to {}", out.display());
        }
        Command::Nmf {
            rank,
            iters,
            seed,
            rows,
            cols,
            input,
            out,
        } => {
            let x = match &input {
                Some(p) => crossview::tensor::xvt::read_xvt(p)?,
                None => random_nonnegative(rows, cols, seed),
            };
            let [c, _] = x.dims()[..] else {
                return Err(Error::Shape(format!("nmf input must be a matrix, got {:?}", x.dims())));
            };
            let cfg = NmfConfig {
                rank,
                iterations: iters,
                ..NmfConfig::default()
            };
            cfg.validate(c)?;
            let w0 = DictionaryState::init(c, rank, &mut substream(seed, Stream::Nmf, 1)).w0;
            let res = nmf_factorize(&x, &w0, &cfg)?;
            create_dir(&out)?;
            write_xvt(&out.join("W.xvt"), &res.w)?;
            write_xvt(&out.join("H.xvt"), &res.h)?;
            let mut report = String::from("round,frobenius_error\n");
            for (i, e) in res.error_trace.iter().enumerate() {
                let _ = writeln!(report, "{i},{e:.12e}");
            }
            write_text(&out.join("nmf_report.csv"), &report)?;
            print!("{report}");
        }
        Command::Gradcheck { seeds, first_seed } => {
            let rows = summarize(first_seed..first_seed + seeds)?;
            let mut failed = Vec::new();
            for r in &rows {
                let ok = r.max_rel_error <= GRAD_TOLERANCE;
                println!(
                    "{:<24} max rel err {:.3e} (seed {}) over {} coords, {} kink-skipped  {}",
                    r.layer,
                    r.max_rel_error,
                    r.worst_seed,
                    r.coordinates,
                    r.kink_skipped,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.layer);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {failed:?}")));
            }
        }
        Command::Ablate { data, out, splits, cfg } => {
            let cfg = cfg.load()?;
            let rows = ablate(&DataStore::new(&data), &cfg, &splits, &out)?;
            print!("{}", ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
