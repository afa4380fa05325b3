//! `focal`: train, sweep, evaluate, adapt and diagnose focal-attention models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 4 I/O error. `FOCAL_LOG` sets log verbosity (default `info`);
//! `FOCAL_OUT_DIR` overrides the output root when `--out` is absent.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use focal_core::diagnostics::ReportFormat;
use focal_core::harness::{self, Counterpart, ExperimentConfig, SweepMode, TrialRunner};
use focal_core::{FocalError, TemperaturePolicy};

#[derive(Parser)]
#[command(name = "focal", version, about = "Focal attention transformer lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sweep constant temperature scales; t=1 is always included.
    SweepConst {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scales, e.g. 0.3,0.4,1.0.
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<f64>>,
    },
    /// Sweep learned-temperature clip bands plus the baseline.
    SweepLearned {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        tau_min: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        tau_max: Option<Vec<f64>>,
    },
    /// Score a checkpoint on synthetic tasks across context lengths.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Switch a checkpoint to a new policy and continue training.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `baseline`, `t=0.4` or `learned:5:10`.
        #[arg(long)]
        policy: TemperaturePolicy,
        /// Overrides train.peak_lr.
        #[arg(long)]
        lr: Option<f64>,
        /// Overrides train.total_steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Compare attention sharpness of two checkpoints or two policies.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint (side b).
        #[arg(long, conflicts_with = "policy")]
        checkpoint_b: Option<PathBuf>,
        /// Policy for side b, applied to the first checkpoint's weights.
        #[arg(long, required_unless_present = "checkpoint_b")]
        policy: Option<TemperaturePolicy>,
        /// Policy for side a; defaults to the checkpoint's own.
        #[arg(long)]
        policy_a: Option<TemperaturePolicy>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), FocalError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.resolve()?;
    }
    let out = cfg.output_dir(common.out.as_deref());
    Ok((cfg, out))
}

fn runner(cfg: &ExperimentConfig) -> Result<TrialRunner, FocalError> {
    Ok(match cfg.sweep.mode {
        SweepMode::Inline => TrialRunner::Inline,
        SweepMode::Process => {
            let exe =
                std::env::current_exe().map_err(|e| FocalError::io("current executable", e))?;
            TrialRunner::Process(exe)
        }
    })
}

fn print_summary(out: &Path) {
    println!("{}", out.join("summary.json").display());
}

fn run(cli: Cli) -> Result<(), FocalError> {
    match cli.command {
        Cmd::Train { common, resume } => {
            let (cfg, out) = load(&common)?;
            harness::cmd_train(&cfg, &out, resume, common.format)?;
            print_summary(&out);
        }
        Cmd::SweepConst { common, t } => {
            let (cfg, out) = load(&common)?;
            let s =
                harness::cmd_sweep_const(&cfg, t.as_deref(), &out, &runner(&cfg)?, common.format)?;
            for m in &s.means {
                println!(
                    "{:<20} val {:.4} acc {:.3}",
                    m.label, m.final_val_loss, m.recall_accuracy
                );
            }
            print_summary(&out);
        }
        Cmd::SweepLearned {
            common,
            tau_min,
            tau_max,
        } => {
            let (cfg, out) = load(&common)?;
            let s = harness::cmd_sweep_learned(
                &cfg,
                tau_min.as_deref(),
                tau_max.as_deref(),
                &out,
                &runner(&cfg)?,
                common.format,
            )?;
            for m in &s.means {
                println!(
                    "{:<20} val {:.4} acc {:.3}",
                    m.label, m.final_val_loss, m.recall_accuracy
                );
            }
            print_summary(&out);
        }
        Cmd::Eval { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            harness::cmd_eval(&cfg, &checkpoint, &out, common.format)?;
            print_summary(&out);
        }
        Cmd::Adapt {
            common,
            checkpoint,
            policy,
            lr,
            steps,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(lr) = lr {
                cfg.train.peak_lr = lr;
            }
            if let Some(steps) = steps {
                cfg.train.total_steps = steps;
            }
            harness::cmd_adapt(&cfg, &checkpoint, policy, &out, common.format)?;
            print_summary(&out);
        }
        Cmd::Diagnose {
            common,
            checkpoint,
            checkpoint_b,
            policy,
            policy_a,
        } => {
            let (cfg, out) = load(&common)?;
            let other = match (checkpoint_b, policy) {
                (Some(b), _) => Counterpart::Checkpoint(b),
                (None, Some(p)) => Counterpart::Policy(p),
                (None, None) => unreachable!("clap requires one of them"),
            };
            harness::cmd_diagnose(&cfg, &checkpoint, policy_a, &other, &out, common.format)?;
            print_summary(&out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOCAL_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
