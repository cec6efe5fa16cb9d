//! `embryo`: synthetic cohorts, ingestion, training, scoring and reports.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use embryo_core::stats::Tail;
use embryo_net::Profile;

use commands::SplitPart;
use config::Overrides;
use error::{CliError, ErrorClass};

#[derive(Parser)]
#[command(name = "embryo", version, about = "Time-lapse embryo scoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum TailArg {
    One,
    Two,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file overriding the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ReportFlags {
    /// Clinics need more than this many KID embryos for a hold-out fold.
    #[arg(long)]
    threshold_kid: Option<usize>,
    /// Significance level for starring.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    tail: Option<TailArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its ground-truth sidecar.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Label a cohort from its transfer events and split it.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Cohort directory holding manifest.jsonl, events.jsonl and sequences/.
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Train a network on the training split of an ingested dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory of `ingest`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score embryos with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitPart,
    },
    /// Score the test split and report KID and whole-cohort AUC.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Synthetic ground-truth sidecar, for agreement with latent viability.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// KID AUC by patient and treatment subgroup.
    Subgroups {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        report: ReportFlags,
        /// Output directory of `score` or `eval`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Leave-one-clinic-out training and evaluation.
    Holdout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        report: ReportFlags,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score distributions by morphokinetic group.
    Morpho {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Paired comparison with the rule-based model or another scoring run.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        report: ReportFlags,
        #[arg(long)]
        scores: PathBuf,
        /// Second scoring run; defaults to the rule-based morphokinetic model.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
}

fn overrides(c: &Common, r: Option<&ReportFlags>) -> Overrides {
    Overrides {
        config: c.config.clone(),
        seed: c.seed,
        profile: c.profile.map(|p| match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Tiny => Profile::Tiny,
        }),
        threshold_kid: r.and_then(|r| r.threshold_kid),
        alpha: r.and_then(|r| r.alpha),
        tail: r.and_then(|r| r.tail).map(|t| match t {
            TailArg::One => Tail::One,
            TailArg::Two => Tail::Two,
        }),
    }
}

fn run(cli: Cli) -> error::Result<()> {
    match &cli.command {
        Command::Synth { common } => commands::synth(&overrides(common, None), &common.out),
        Command::Ingest { common, cohort } => commands::ingest(&overrides(common, None), cohort, &common.out),
        Command::Train { common, data } => commands::train_cmd(&overrides(common, None), data, &common.out),
        Command::Score {
            common,
            checkpoint,
            data,
            split,
        } => commands::score(&overrides(common, None), checkpoint, data, *split, &common.out),
        Command::Eval {
            common,
            checkpoint,
            data,
            truth,
        } => commands::eval(&overrides(common, None), checkpoint, data, truth.as_deref(), &common.out),
        Command::Subgroups {
            common,
            report,
            scores,
            data,
        } => commands::subgroups(&overrides(common, Some(report)), scores, data, &common.out),
        Command::Holdout { common, report, data } => commands::holdout(&overrides(common, Some(report)), data, &common.out),
        Command::Morpho { common, scores, data } => commands::morpho(&overrides(common, None), scores, data, &common.out),
        Command::Compare {
            common,
            report,
            scores,
            baseline,
            data,
        } => commands::compare(&overrides(common, Some(report)), scores, baseline.as_deref(), data, &common.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
            return fail(CliError::new(ErrorClass::Usage, first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.line());
    ExitCode::from(e.class.exit_code() as u8)
}
