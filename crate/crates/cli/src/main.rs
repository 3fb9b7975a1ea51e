use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vcc_cli::commands::{self, Report};
use vcc_cli::workspace::{append_run_log, hash_artifacts, RunLock, RunLogEntry};
use vcc_cli::{PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "vcc", version, about = "Semiparallel voice conversion pipeline")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-utterance work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze the corpus into the feature cache.
    Extract {
        /// Only recordings whose `<speaker>/<utterance>.wav` matches.
        #[arg(long)]
        glob: Option<String>,
    },
    /// WSOLA F0-shifted copies of the target speakers.
    Augment,
    /// TTS requests and the parallel-pair list.
    Pairs,
    /// Per-speaker lf0 statistics.
    Stats,
    TrainCyclevae,
    TrainVocoder {
        /// Run only this stage (1-4), chained from the previous one.
        #[arg(long)]
        stage: Option<u8>,
    },
    /// Convert one recording from `--src` to `--tgt`.
    Convert {
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quick built-in consistency checks.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Extract { .. } => "extract",
            Self::Augment => "augment",
            Self::Pairs => "pairs",
            Self::Stats => "stats",
            Self::TrainCyclevae => "train-cyclevae",
            Self::TrainVocoder { .. } => "train-vocoder",
            Self::Convert { .. } => "convert",
            Self::Selftest => "selftest",
        }
    }
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    if let Command::Selftest = cli.command {
        return commands::selftest();
    }
    let _lock = RunLock::acquire(&cfg.cache_dir)?;
    let report = match &cli.command {
        Command::Extract { glob } => commands::extract(cfg, glob.as_deref()),
        Command::Augment => commands::augment(cfg),
        Command::Pairs => commands::pairs(cfg),
        Command::Stats => commands::stats(cfg),
        Command::TrainCyclevae => commands::train_cyclevae(cfg),
        Command::TrainVocoder { stage } => commands::train_vocoder(cfg, *stage),
        Command::Convert { src, tgt, input, out } => commands::convert(cfg, src, tgt, input, out),
        Command::Selftest => unreachable!(),
    };
    let status = match &report {
        Ok(r) if r.failures.is_empty() => "ok",
        Ok(_) => "partial",
        Err(_) => "error",
    };
    let empty = Report::default();
    let r = report.as_ref().unwrap_or(&empty);
    append_run_log(
        &cfg.work_dir,
        &RunLogEntry {
            command: cli.command.name(),
            seed: cfg.seed,
            config_sha256: cfg.digest(),
            config: cfg,
            status,
            failures: &r.failures,
            artifacts: hash_artifacts(&r.artifacts),
        },
    )?;
    report
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p),
        None => PipelineConfig::default().validate().map(|_| PipelineConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("vcc: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("vcc: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    log::info!("vcc {} seed {}", cli.command.name(), cfg.seed);
    match run(&cli, &cfg) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report.summary).unwrap_or_default());
            for f in &report.failures {
                eprintln!("vcc: failed: {f}");
            }
            if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("vcc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
