//! Command-line front end. Results go to stdout as JSON (and to `--out`
//! where a file is produced); progress and errors go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ahan::config::{load_config, RunConfig};
use ahan::gradcheck::DEFAULT_EPS;
use ahan::metrics::Scenario;
use ahan::train::unsupported_augmentations;
use ahan::workflow;
use ahan::{AhanError, Result};

#[derive(Parser)]
#[command(name = "ahan", version, about = "Twin-level face verification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file, or a shipped profile name (desk, paper).
    #[arg(long, default_value = "desk")]
    config: PathBuf,
    /// Overrides the data, training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            workflow::reseed(&mut cfg, seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic twin dataset (images plus manifest.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and write model.ckpt and train.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score test-split pairs of one scenario and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        /// Report file (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the end-to-end training loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Weight elements probed per seed.
        #[arg(long, default_value_t = 20)]
        params: usize,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one attention map of an image as a PGM heatmap.
    VizAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// backbone:<layer>, hca:<region>:<scale> or faam:{lr,rl}
        #[arg(long)]
        select: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `score,label` rows for one scenario's pairs.
    ExportScores {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: AhanError| e.to_string())
}

fn emit<T: Serialize>(value: &T, file: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    if let Some(path) = file {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| AhanError::io(dir, e))?;
        }
        std::fs::write(path, &json).map_err(|e| AhanError::io(path, e))?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{json}") {
        // a closed reader (e.g. `| head`) is not a failure of the command
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(AhanError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let summary = workflow::gen_data(&cfg, &out)?;
            eprintln!("wrote {} images to {}", summary.images, out.display());
            emit(&summary, None)
        }
        Command::Train { common, manifest, out } => {
            let cfg = common.load()?;
            for name in unsupported_augmentations(&cfg.train.augment) {
                eprintln!("warning: augmentation `{name}` is configured but not applied");
            }
            let every = (cfg.train.steps / 20).max(1);
            let summary = workflow::train_model(&cfg, &manifest, &out, |r| {
                if r.step == 1 || r.step % every == 0 || r.step == cfg.train.steps {
                    eprintln!(
                        "step {:>5}  total {:>9.4}  arcface {:>9.4}  triplet {:.4}  lr {:.2e}{}",
                        r.step,
                        r.total,
                        r.arcface,
                        r.triplet,
                        r.lr,
                        if r.gated { "  gated" } else { "" }
                    );
                }
            })?;
            eprintln!("checkpoint: {}", summary.checkpoint.display());
            emit(&summary, Some(&out.join("train.json")))
        }
        Command::Eval {
            common,
            manifest,
            checkpoint,
            scenario,
            out,
        } => {
            let cfg = common.load()?;
            let ev = workflow::evaluate_checkpoint(&cfg, &manifest, &checkpoint, scenario)?;
            eprint!("{}", ev.report.to_table());
            emit(&ev.report, out.as_deref())
        }
        Command::Gradcheck {
            common,
            params,
            eps,
            tolerance,
            out,
        } => {
            let cfg = load_config(&common.config)?;
            let seeds = match common.seed {
                Some(s) => vec![s],
                None => vec![0, 1, 2],
            };
            let checks = seeds
                .iter()
                .map(|&s| workflow::end_to_end_gradcheck(&cfg, s, params, eps))
                .collect::<Result<Vec<_>>>()?;
            for c in &checks {
                eprintln!("seed {}: max relative error {:.3e} at {}", c.seed, c.max_rel_err, c.worst);
            }
            emit(&checks, out.as_deref())?;
            match checks.iter().find(|c| !(c.max_rel_err <= tolerance)) {
                Some(c) => Err(AhanError::invalid(
                    "gradcheck",
                    format!("seed {} exceeds tolerance {tolerance:e}", c.seed),
                )),
                None => Ok(()),
            }
        }
        Command::VizAttention {
            common,
            checkpoint,
            image,
            select,
            out,
        } => {
            let cfg = common.load()?;
            let map = workflow::visualize(&cfg, &checkpoint, &image, &select, &out)?;
            eprintln!("wrote {}", out.display());
            emit(
                &serde_json::json!({ "out": out, "selector": select, "shape": map.shape() }),
                None,
            )
        }
        Command::ExportScores {
            common,
            manifest,
            checkpoint,
            scenario,
            out,
        } => {
            let cfg = common.load()?;
            let ev = workflow::evaluate_checkpoint(&cfg, &manifest, &checkpoint, scenario)?;
            ev.scores.write_csv(&out)?;
            eprintln!("wrote {} scores to {}", ev.scores.len(), out.display());
            emit(&ev.report, None)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
