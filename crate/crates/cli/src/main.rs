//! Command line driver for the training and evaluation pipeline. Every
//! subcommand is a thin wrapper over a pipeline function: configs come from
//! TOML files, seeds and run directories can be overridden per invocation,
//! and exit codes separate domain failures (1) from usage mistakes (2).

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskplan_core::config::ExperimentConfig;
use maskplan_core::decoding::SelectionMode;
use maskplan_core::pipeline::{
    cmd_demo_bimodal, cmd_evaluate, cmd_export_heatmap, cmd_init_planner, cmd_pretrain,
    cmd_train_grpo, EvalStage,
};
use maskplan_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "maskplan", version, about = "Masked diffusion language modeling with a learned unmasking planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Heuristic,
    Planner,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> SelectionMode {
        match m {
            ModeArg::Heuristic => SelectionMode::Heuristic,
            ModeArg::Planner => SelectionMode::Planner,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    /// Pretrained backbone with the warm-started planner
    Init,
    /// The policy after reward optimization
    Grpo,
}

impl From<StageArg> for EvalStage {
    fn from(s: StageArg) -> EvalStage {
        match s {
            StageArg::Init => EvalStage::Init,
            StageArg::Grpo => EvalStage::Grpo,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config TOML
    #[arg(long)]
    config: PathBuf,
    /// Override every stage seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and, if configured, the distillation teacher
    Pretrain(RunArgs),
    /// Fit the planner to the confidence heuristic's unmasking decisions
    InitPlanner(RunArgs),
    /// Optimize the joint policy against the composite task reward
    TrainGrpo {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this run's previous optimization artifacts
        #[arg(long)]
        resume: bool,
    },
    /// Sweep the planner scaling factor and report accuracy and mean NFE
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Which checkpoint pair to load
        #[arg(long, value_enum, default_value_t = StageArg::Init)]
        checkpoint: StageArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Planner)]
        mode: ModeArg,
        /// Scaling factors to sweep; defaults to the config's list
        #[arg(long = "alpha", num_args = 1..)]
        alphas: Vec<f64>,
        /// Stochastic trials per sweep point in planner mode
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Convert a rollout trace JSON file into an unmasking-order CSV matrix
    ExportHeatmap {
        /// Trace JSON produced by a rollout
        #[arg(long)]
        trace: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-mode mass of the two-mode toy: exact parallel and sequential
    /// numbers, then the learned policy after training
    DemoBimodal {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the report and training curve
        #[arg(long)]
        out: PathBuf,
        /// Optimization groups to run
        #[arg(long, default_value_t = 300)]
        groups: usize,
    },
    /// Write the default experiment config as a starting point
    WriteConfig {
        /// Destination TOML path
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.load()?;
            let art = cmd_pretrain(&cfg)?;
            let last = art.backbone_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrained denoiser for {} steps, final loss {last:.4}",
                art.backbone_losses.len()
            );
            if let Some(ppl) = art.teacher_perplexities {
                println!(
                    "teacher perplexity {:.3} -> {:.3} over {} steps",
                    ppl.first().copied().unwrap_or(f64::NAN),
                    ppl.last().copied().unwrap_or(f64::NAN),
                    ppl.len()
                );
            }
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::InitPlanner(args) => {
            let cfg = args.load()?;
            let metrics = cmd_init_planner(&cfg)?;
            println!(
                "planner initialized: held-out agreement {:.1}% over {} slots, mean probability {:.3}",
                100.0 * metrics.holdout_agreement,
                metrics.holdout_size,
                metrics.holdout_mean_prob
            );
        }
        Command::TrainGrpo { run, resume } => {
            let cfg = run.load()?;
            let art = cmd_train_grpo(&cfg, resume)?;
            println!(
                "optimized groups {}..{}",
                art.start_group, cfg.grpo.total_groups
            );
            if let Some(last) = art.logs.last() {
                println!(
                    "last group: accuracy {:.2}, mean NFE {:.2}, mean reward {:.3}",
                    last.accuracy, last.mean_nfe, last.mean_r_total
                );
            }
        }
        Command::Evaluate {
            run,
            checkpoint,
            mode,
            alphas,
            trials,
        } => {
            let cfg = run.load()?;
            let alphas = if alphas.is_empty() {
                cfg.alphas.clone()
            } else {
                alphas
            };
            let trials = trials.unwrap_or(cfg.eval_trials);
            let rows = cmd_evaluate(&cfg, checkpoint.into(), mode.into(), &alphas, trials)?;
            println!("alpha,trials,accuracy,mean_nfe");
            for r in &rows {
                println!("{},{},{:.4},{:.3}", r.alpha, r.trials, r.accuracy, r.mean_nfe);
            }
        }
        Command::ExportHeatmap { trace, out } => {
            let matrix = cmd_export_heatmap(&trace, &out)?;
            let steps = matrix.first().map_or(0, Vec::len);
            println!(
                "wrote {} positions x {} steps to {}",
                matrix.len(),
                steps,
                out.display()
            );
        }
        Command::DemoBimodal { seed, out, groups } => {
            let report = cmd_demo_bimodal(seed, &out, groups)?;
            println!(
                "cross-mode mass: parallel {:.4}, sequential {:.4}, trained {:.4} (mean NFE {:.2})",
                report.parallel_cross_mass,
                report.sequential_cross_mass,
                report.trained_cross_mass,
                report.trained_mean_nfe
            );
        }
        Command::WriteConfig { out } => {
            ExperimentConfig::default().save(&out)?;
            println!("wrote default config to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
