//! Binary front end: argv parsing and exit codes only. All behavior lives in
//! the library's `cli` module so it can be tested directly.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use debias_cl::cli::{self, Ablation, CliError, CommonArgs, Preset};

#[derive(Parser)]
#[command(
    name = "debias-cl",
    version,
    about = "Continual-learning engine for brain-response retrieval, with a synthetic memory-decay benchmark"
)]
struct Cli {
    /// Config file (INI-style key = value sections) applied over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (command-specific default otherwise).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Command-specific seed override: gen-data → data seed,
    /// train/analyze → run seed, eval → distractor-sampling seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Scale preset: `desk` finishes in minutes on one core, `paper` keeps
    /// the full published hyperparameters.
    #[arg(long, global = true, value_name = "NAME", default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic memory-decay dataset and a session-stat summary.
    GenData,
    /// Train through the session-incremental protocol, leaving a run
    /// directory with checkpoints, reports, and a manifest.
    Train {
        /// Existing dataset file; generated from [data] config if omitted.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Method overlay: wo_cl, exp1_noncl, exp2_baseline, exp3_dcl_l2,
        /// exp4_dcl_ba_afm, exp5_rehearsal, exp6_ours.
        #[arg(long, value_name = "NAME")]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on a session range of a dataset.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Session range `LO-HI` (defaults to every session).
        #[arg(long, value_name = "LO-HI")]
        range: Option<String>,
    },
    /// Behavioral decline curves and the fresh-model-per-window probe.
    Analyze {
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
    },
    /// Verify every analytic gradient against central finite differences.
    GradCheck {
        /// Random instances per objective family.
        #[arg(long, default_value_t = 20)]
        instances: u32,
    },
    /// Pivot finished run directories into one comparison table.
    Report {
        /// Run directories (each holding manifest.json).
        #[arg(required = true, value_name = "DIR")]
        runs: Vec<PathBuf>,
    },
}

fn run(args: Cli) -> Result<(), CliError> {
    let common = CommonArgs {
        config: args.config,
        out: args.out,
        seed: args.seed,
        preset: Some(Preset::parse(&args.preset)?),
    };
    match args.cmd {
        Cmd::GenData => cli::cmd_gen_data(&common).map(drop),
        Cmd::Train { dataset, ablation } => {
            let ablation = ablation.as_deref().map(Ablation::parse).transpose()?;
            cli::cmd_train(&common, dataset.as_deref(), ablation).map(drop)
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            range,
        } => {
            let range = range.as_deref().map(cli::parse_range).transpose()?;
            cli::cmd_eval(&common, &checkpoint, &dataset, range).map(drop)
        }
        Cmd::Analyze { dataset } => cli::cmd_analyze(&common, &dataset),
        Cmd::GradCheck { instances } => cli::cmd_grad_check(instances),
        Cmd::Report { runs } => cli::cmd_report(&common, &runs).map(drop),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
