use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lps::data::{generate_synthetic, load_dataset};
use lps::experiment::{
    dump_embeddings, run_experiment, run_sweep, sweep_csv, DataSource, ExperimentConfig, SweepGrid,
};
use lps::model::Model;

#[derive(Parser)]
#[command(
    name = "lps",
    version,
    about = "Open-world semi-supervised classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value settings applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation, initialization and batching
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, summary, checkpoint and config echo
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Replace the adaptive-margin loss with plain cross-entropy
        #[arg(long)]
        no_am: bool,
        /// Drop the pseudo-label contrastive term
        #[arg(long)]
        no_pc: bool,
        /// Drop the unsupervised contrastive term
        #[arg(long)]
        no_uc: bool,
        /// Drop the entropy regularizer
        #[arg(long)]
        no_entropy: bool,
    },
    /// Train once per point of a hyperparameter grid, e.g. "C=1,5,10;tau=0.2,0.4"
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        grid: String,
    },
    /// Write per-sample logits of a checkpoint on a dataset as CSV
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as CSV plus metadata
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Destination CSV path
        #[arg(long)]
        path: PathBuf,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            no_am,
            no_pc,
            no_uc,
            no_entropy,
        } => {
            let mut cfg = config.load()?;
            cfg.ablation.no_am |= no_am;
            cfg.ablation.no_pc |= no_pc;
            cfg.ablation.no_uc |= no_uc;
            cfg.ablation.no_entropy |= no_entropy;
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("runs").join(cfg.ablation.label()));
            }
            let summary = run_experiment(&cfg)?;
            let r = &summary.final_record;
            println!(
                "epoch {} seen {} novel {} all {} nmi {} kl {:.5}",
                r.epoch,
                fmt_opt(r.seen_acc),
                fmt_opt(r.novel_acc),
                fmt_opt(r.all_acc),
                fmt_opt(r.nmi_novel),
                r.kl_to_prior
            );
            if let Some(dir) = summary.out_dir {
                println!("outputs in {}", dir.display());
            }
        }
        Command::Sweep { config, grid } => {
            let cfg = config.load()?;
            let grid = SweepGrid::parse(&grid)?;
            let rows = run_sweep(&cfg, &grid)?;
            print!("{}", sweep_csv(&grid, &rows));
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                bail!("{failed} of {} sweep points failed", rows.len());
            }
        }
        Command::Dump {
            checkpoint,
            data,
            out,
        } => {
            let model = Model::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let csv = dump_embeddings(&model, &ds)?;
            match out {
                Some(p) => {
                    fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{csv}"),
            }
        }
        Command::Generate { config, path } => {
            let cfg = config.load()?;
            let DataSource::Synthetic(syn) = &cfg.data else {
                bail!("generate needs a synthetic data source");
            };
            let ds = generate_synthetic(syn)?;
            ds.save(&path)?;
            println!(
                "wrote {} samples ({} labeled, {} unlabeled) to {}",
                ds.len(),
                ds.n_labeled(),
                ds.n_unlabeled(),
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
