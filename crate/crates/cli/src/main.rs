use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pdnjode::io::Dataset;
use pdnjode::train::{self, Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "pdnjode", version, about = "Path-dependent neural jump ODE harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by a config and write it to disk.
    Generate(Common),
    /// Train a model; `--resume` continues from a checkpoint instead.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the exact oracle) on a dataset's test split.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to regenerating the checkpoint's dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the conditional expectation itself.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n_plot: usize,
    },
    /// Train every model/loss variant of the sweep and tabulate the results.
    Compare(Common),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(c) => {
            let cfg = c.load()?;
            let ds = Dataset::generate(&cfg.data.spec, cfg.seed, cfg.data.n_train, cfg.data.n_test)?;
            let dir = cfg.data.path.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
            ds.save(&dir)?;
            println!("wrote {} train / {} test paths to {}", ds.train.len(), ds.test.len(), dir.display());
        }
        Command::Train { common, resume } => {
            let report = match resume {
                Some(ck) => train::resume_training(&ck, common.epochs)?,
                None => {
                    let cfg = common.load()?;
                    std::fs::create_dir_all(&cfg.out_dir)?;
                    cfg.save(&cfg.out_dir.join("config.toml"))?;
                    train::run_training(&cfg)?
                }
            };
            println!(
                "best eval metric {:.6e} at epoch {} ({})",
                report.best_metric,
                report.best_epoch,
                report.out_dir.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            oracle,
            out,
            n_plot,
        } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let ds = match (&data, &ck) {
                (Some(d), _) => Dataset::load(d)?,
                (None, Some(c)) => train::load_or_generate(&c.config)?,
                (None, None) => bail!("--oracle needs --data"),
            };
            let r = train::evaluate_checkpoint(if oracle { None } else { ck.as_ref() }, &ds, out.as_deref(), n_plot)?;
            println!("eval metric {:.6e} on {} test paths", r.metric, r.n_samples);
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            println!("{:<28} {:>14} {:>6}", "run", "best metric", "epoch");
            for row in train::compare(&cfg)? {
                println!("{:<28} {:>14.6e} {:>6}", row.label, row.best_metric, row.best_epoch);
            }
        }
    }
    Ok(())
}
