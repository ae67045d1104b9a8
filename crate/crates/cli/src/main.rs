use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "kidppg", about = "Heart-rate estimation from wrist PPG and acceleration")]
struct Cli {
    /// Base seed; every random stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Point,
    Prob,
    KidPpg,
}

impl VariantArg {
    fn variant(self) -> kidppg::pipeline::Variant {
        use kidppg::pipeline::Variant;
        match self {
            VariantArg::Point => Variant::POINT,
            VariantArg::Prob => Variant::PROB,
            VariantArg::KidPpg => Variant::KID_PPG,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Prob,
    Point,
}

#[derive(Args, Debug, Clone)]
struct WindowArgs {
    /// Window length in seconds.
    #[arg(long)]
    win: Option<f64>,
    /// Hop between window starts in seconds.
    #[arg(long)]
    stride: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sessions with known ground truth.
    #[command(group(ArgGroup::new("source").required(true).args(["spec", "scenario", "suite"])))]
    Synth {
        /// Generator spec file (key = value lines).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// One of: clean, ma_offband, ma_overlap, ma_erasure, hr_ramp.
        #[arg(long)]
        scenario: Option<String>,
        /// The four-subject benchmark suite, one directory per subject.
        #[arg(long)]
        suite: bool,
        #[arg(long, default_value = "S1")]
        subject: String,
        /// Base heart rate for --scenario, BPM.
        #[arg(long, default_value_t = 75.0)]
        hr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a session into windows and write their labels as CSV.
    Windows {
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the artifact filter for one activity, or one per activity.
    TrainFilter {
        #[arg(long)]
        session: PathBuf,
        /// Without this, one filter per activity is written to
        /// `<out>/<label>`.
        #[arg(long)]
        activity: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subtract predicted artifacts from a session's PPG.
    Clean {
        #[arg(long)]
        session: PathBuf,
        /// A filter directory, or a directory of per-activity filters.
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an augmented training set from (cleaned) sessions.
    Augment {
        /// Session directories, or directories holding sessions.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        adversarial_frac: f64,
        #[arg(long)]
        high_hr: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the estimator on sessions or on an augmented set.
    #[command(group(ArgGroup::new("source").required(true).args(["data", "cache"])))]
    Train {
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Session directories, or directories holding sessions.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Output of `augment`.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate heart rate for every window of a session.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
        /// The session is already cleaned; skip artifact filter fitting.
        #[arg(long)]
        no_adapt: bool,
        #[arg(long)]
        thr: Option<f64>,
        #[arg(long)]
        cl: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against window labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = kidppg::eval::DEFAULT_THR_BPM)]
        thr: f64,
        #[arg(long, default_value_t = kidppg::eval::DEFAULT_CL)]
        cl: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Prob)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out cross-validation.
    Loso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Folds to run as parallel processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run only the fold that tests this subject.
        #[arg(long)]
        fold: Option<String>,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tables and plot-ready CSVs from one or more runs.
    Report {
        /// Directories holding predictions.csv and truth.csv.
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        thr: Option<f64>,
        #[arg(long)]
        cl: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let version = format!("{} (format_version {})", env!("CARGO_PKG_VERSION"), kidppg::ingest::FORMAT_VERSION);
    let matches = Cli::command().version(&*version.leak()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let command = matches.subcommand_name().unwrap_or("kidppg").to_string();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.chain().find_map(|c| c.downcast_ref::<kidppg::Error>()).and_then(|k| k.stage());
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error [{}]: {msg}", stage.unwrap_or(&command));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, scenario, suite, subject, hr, out } => {
            commands::synth(spec.as_deref(), scenario.as_deref(), suite, &subject, hr, seed.unwrap_or(0), &out)
        }
        Command::Windows { session, window, out } => commands::windows(&session, &window, &out),
        Command::TrainFilter { session, activity, config, window, out } => {
            let cfg = commands::load_config(config.as_deref(), None, seed, &window)?;
            commands::train_filter(&session, activity.as_deref(), &cfg, &out)
        }
        Command::Clean { session, filter, out } => commands::clean(&session, &filter, &out),
        Command::Augment { input, adversarial_frac, high_hr, config, window, out } => {
            let mut cfg = commands::load_config(config.as_deref(), None, seed, &window)?;
            if !(0.0..=1.0).contains(&adversarial_frac) {
                bail!("--adversarial-frac must be in [0, 1], got {adversarial_frac}");
            }
            cfg.adversarial_fraction = adversarial_frac;
            cfg.variant.guided = adversarial_frac > 0.0;
            cfg.variant.high_hr = high_hr;
            commands::augment(&input, &cfg, &out)
        }
        Command::Train { variant, config, data, cache, window, out } => {
            let cfg = commands::load_config(config.as_deref(), variant, seed, &window)?;
            commands::train(&data, cache.as_deref(), &cfg, &out)
        }
        Command::Infer { model, session, no_adapt, thr, cl, out } => {
            commands::infer(&model, &session, no_adapt, thr, cl, seed, &out)
        }
        Command::Evaluate { pred, truth, thr, cl, mode, out } => commands::evaluate(&pred, &truth, thr, cl, mode, &out),
        Command::Loso { data, variant, config, jobs, fold, window, out } => {
            let cfg = commands::load_config(config.as_deref(), variant, seed, &window)?;
            commands::loso(&data, &cfg, jobs, fold.as_deref(), &out)
        }
        Command::Report { runs, thr, cl, out } => commands::report(&runs, thr, cl, &out),
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}
