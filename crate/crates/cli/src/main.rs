mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use aird::synth::Split;
use aird::train::Mode;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use run::CliError;

#[derive(Parser)]
#[command(
    name = "aird",
    version,
    about = "Cross-resolution distillation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Pipeline config file; built-in defaults fill missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to `$AIRD_OUT_ROOT/<verb>`, or `runs/<verb>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed; takes precedence over the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Config overrides such as `student.beta=1.5`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// `NAME=PATH`, or a bare `PATH` named `student`.
#[derive(Clone, Debug)]
pub struct Named {
    pub name: String,
    pub path: PathBuf,
}

fn parse_named(s: &str) -> Result<Named, String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok(Named {
            name: name.to_string(),
            path: path.into(),
        }),
        Some(_) => Err(format!("expected NAME=PATH, got {s:?}")),
        None => Ok(Named {
            name: "student".into(),
            path: s.into(),
        }),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown split {s:?} (train|test|test_shifted)"))
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic dataset and its evaluation protocols.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Mine positive and hard-negative training pairs with the teacher.
    MinePairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train the high-resolution teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a low-resolution student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Needed by every mode except scratch_lr.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Mined pairs; mined on the fly when absent.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Overrides `student.mode`.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Re-estimate a student's batch-norm statistics on unlabeled images.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test_shifted")]
        split: Split,
    },
    /// Pair verification on the clean and shifted test splits.
    EvalVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `NAME=PATH`, evaluated on the clean test pairs. Repeatable.
        #[arg(long, value_parser = parse_named)]
        student: Vec<Named>,
        /// `NAME=PATH`, evaluated on the shifted test pairs. Repeatable.
        #[arg(long, value_parser = parse_named)]
        shifted: Vec<Named>,
        /// Score LR probes against HR images.
        #[arg(long)]
        lrhr: bool,
        /// Embeds the HR side under --lrhr unless `eval.student_only` is set.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Closed-set identification against a gallery.
    EvalIdentify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_named, required = true)]
        student: Vec<Named>,
        /// Identification protocol; defaults to the one stored with the data.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
    },
    /// Component ablation over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Student accuracy and training time against the negative count.
    SweepNegatives {
        #[command(flatten)]
        common: Common,
    },
    /// Per-pair scores and the score histogram as CSV.
    ExportScores {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Embeds the HR side of each pair.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn dispatch(verb: Verb) -> Result<PathBuf, CliError> {
    use commands::*;
    match verb {
        Verb::GenData { common } => gen_data(&common),
        Verb::MinePairs {
            common,
            data,
            teacher,
        } => mine_pairs(&common, &data, &teacher),
        Verb::TrainTeacher { common, data } => train_teacher(&common, &data),
        Verb::Distill {
            common,
            data,
            teacher,
            pairs,
            mode,
        } => distill(&common, &data, teacher.as_deref(), pairs.as_deref(), mode),
        Verb::Adapt {
            common,
            data,
            student,
            split,
        } => adapt(&common, &data, &student, split),
        Verb::EvalVerify {
            common,
            data,
            student,
            shifted,
            lrhr,
            teacher,
        } => eval_verify(&common, &data, &student, &shifted, lrhr, teacher.as_deref()),
        Verb::EvalIdentify {
            common,
            data,
            student,
            protocol,
            k,
        } => eval_identify(&common, &data, &student, protocol.as_deref(), &k),
        Verb::Ablate { common } => ablate(&common),
        Verb::SweepNegatives { common } => sweep_negatives(&common),
        Verb::ExportScores {
            common,
            data,
            student,
            split,
            teacher,
        } => export_scores(&common, &data, &student, split, teacher.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let parsed = Cli::command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m).map(|c| (c, m)));
    let (cli, matches) = match parsed {
        Ok(v) => v,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let verb = matches.subcommand_name().unwrap_or_default().to_string();
    match dispatch(cli.verb) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(
                e,
                CliError::Usage(_) | CliError::Core(aird::Error::Config(_))
            ) {
                if let Some(sub) = Cli::command().find_subcommand_mut(&verb) {
                    let mut sub = sub.clone().bin_name(format!("aird {verb}"));
                    eprintln!("\n{}", sub.render_help());
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
