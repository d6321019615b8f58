use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rewind_guard::baselines::{parse_detectors, EvalOptions, DEFAULT_CLUSTERS};
use rewind_guard::cli::{self, BenchConfig, GuardArtifacts};
use rewind_guard::harness::{parse_disturbances, ScenarioConfig};
use rewind_guard::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "rewind-guard", version, about = "Failure detection and checkpoint respawning for chunked policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Conformal miscoverage rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Frames trimmed at each episode end.
    #[arg(long)]
    trim: Option<usize>,
    /// Steps without improvement before a slot counts as peaked.
    #[arg(long)]
    peak_gap: Option<usize>,
}

impl Common {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(a) = self.alpha {
            cfg.guard.alpha = a;
        }
        if let Some(t) = self.trim {
            cfg.guard.trim_delta = t;
        }
        if let Some(p) = self.peak_gap {
            cfg.guard.peak_gap = p;
        }
        cfg.guard.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GuardMode {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenario episodes with annotations.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, short = 'n', default_value_t = 100)]
        episodes: usize,
        /// Disturbances, e.g. `state_jump@wp0+30,mag=0.5`; replaces the config list.
        #[arg(long)]
        disturb: Option<String>,
    },
    /// Calibrate the TIDE threshold on successful episodes.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Build the checkpoint database.
    BuildDb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: PathBuf,
        /// Defaults to `annotations.json` inside the episode directory.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Run episodes with or without the guard.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, short = 'n', default_value_t = 20)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = GuardMode::On)]
        guard: GuardMode,
        #[arg(long)]
        disturb: Option<String>,
        #[arg(long)]
        threshold: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Compare TIDE with the embedding baselines on labelled episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Successful episodes used to fit and calibrate the detectors.
        #[arg(long)]
        calibration: PathBuf,
        /// Labelled episodes to score, e.g. the output of `run`.
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, default_value = "tide,mahalanobis,clusters")]
        detectors: String,
        #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value = "default")]
        scenario: String,
    },
    /// Time the monitoring stages.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, short = 'k', default_value_t = 10)]
        slots: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        horizon: usize,
        #[arg(long, default_value_t = 14)]
        action_dim: usize,
    },
}

fn with_disturbances(mut cfg: ScenarioConfig, disturb: Option<&str>) -> Result<ScenarioConfig> {
    if let Some(spec) = disturb {
        cfg.disturbances = parse_disturbances(spec)?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("`--guard on` requires {flag}")))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, episodes, disturb } => {
            let cfg = with_disturbances(common.scenario()?, disturb.as_deref())?;
            let s = cli::cmd_generate(&cfg, episodes, common.seed, &common.out)?;
            println!("generated {} episodes, {} successful", s.episodes, s.successes);
        }
        Command::Calibrate { common, episodes } => {
            let cfg = common.scenario()?;
            let t = cli::cmd_calibrate(&episodes, &cfg.guard, &common.out)?;
            println!("q_hat = {:e} (alpha = {}, n = {})", t.q_hat, t.alpha, t.n);
        }
        Command::BuildDb { common, episodes, annotations } => {
            let cfg = common.scenario()?;
            let annotations = annotations.unwrap_or_else(|| episodes.join(cli::ANNOTATIONS_FILE));
            let db = cli::cmd_build_db(&episodes, &annotations, &cfg.guard, &common.out)?;
            println!("database with {} slots", db.num_slots());
        }
        Command::Run { common, episodes, guard, disturb, threshold, db } => {
            let cfg = with_disturbances(common.scenario()?, disturb.as_deref())?;
            let artifacts = match (guard, threshold, db) {
                (GuardMode::On, t, d) => Some(GuardArtifacts {
                    threshold: required(t, "--threshold")?,
                    database: required(d, "--db")?,
                    intervene: true,
                }),
                (GuardMode::Off, Some(t), Some(d)) => Some(GuardArtifacts { threshold: t, database: d, intervene: false }),
                (GuardMode::Off, _, _) => None,
            };
            let s = cli::cmd_run(&cfg, artifacts.as_ref(), episodes, common.seed, &common.out)?;
            println!("{} / {} succeeded, {} recoveries", s.successes, s.episodes, s.recoveries);
        }
        Command::Eval { common, calibration, episodes, detectors, clusters, scenario } => {
            let cfg = common.scenario()?;
            let opts = EvalOptions { detectors: parse_detectors(&detectors)?, clusters, seed: common.seed, scenario };
            let reports = cli::cmd_eval(&calibration, &episodes, &cfg.guard, &opts, &common.out)?;
            println!("{:<12} {:>6} {:>6} {:>6}", "detector", "TPR", "TNR", "Acc");
            for r in reports {
                let m = r.metrics;
                println!("{:<12} {:>6.3} {:>6.3} {:>6.3}", r.detector.name(), m.tpr, m.tnr, m.balanced_accuracy);
            }
        }
        Command::Bench { out, seed, samples, steps, slots, dim, horizon, action_dim } => {
            let cfg = BenchConfig { slots, dim, horizon, action_dim, samples, steps, seed };
            let r = cli::cmd_bench(&cfg, &out)?;
            println!("stage               mean (s)     std (s)");
            for (name, s) in r.rows() {
                println!("{name:<18} {:>10.3e} {:>10.3e}", s.mean, s.std);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Protocol => 4,
        ErrorCategory::Io => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REWIND_GUARD_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
