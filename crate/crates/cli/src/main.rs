use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypernoise_cli::plot::PlotKind;
use hypernoise_cli::runner::{self, Context};
use hypernoise_cli::{CliError, CliResult, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "hypernoise", version, about = "Residual noise hypernetwork experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the top-level seed and re-derives every sub-seed.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical theory suite.
    ValidateTheory {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a noise hypernetwork.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a comparison method (direct_ft, noise_opt or best_of_n).
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reward against fidelity for a hypernoise and a direct_ft config.
    Tradeoff {
        /// Given twice: one hypernoise config and one direct_ft config.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Output diversity of base and hypernoise samples across seeds.
    Diversity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a CSV file as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long, default_value = "x")]
        x: String,
        #[arg(long, default_value = "y")]
        y: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, common: &Common) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path)?.resolve(common.seed_override)
}

fn context(cfg: Option<&ExperimentConfig>, common: &Common) -> CliResult<Context> {
    let out = match (&common.out, cfg) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.output.dir.clone(),
        (None, None) => PathBuf::from("runs/theory"),
    };
    Context::new(out, common.quiet)
}

/// Where a configuration error gets logged, when that can be decided.
fn error_dir(command: &Command) -> Option<PathBuf> {
    match command {
        Command::ValidateTheory { common, .. }
        | Command::Train { common, .. }
        | Command::Baseline { common, .. }
        | Command::Tradeoff { common, .. }
        | Command::Diversity { common, .. } => common.out.clone(),
        Command::Plot { .. } => None,
    }
}

fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::ValidateTheory { config, common } => {
            let cfg = match config {
                Some(p) => load(p, common)?,
                None => ExperimentConfig::parse("")?.resolve(common.seed_override)?,
            };
            let ctx = context(config.as_ref().map(|_| &cfg), common)?;
            runner::run_theory(cfg, &ctx)?;
        }
        Command::Train { config, common } => {
            let cfg = load(config, common)?;
            if cfg.method != Method::Hypernoise {
                return Err(CliError::Config(format!(
                    "train runs method = \"hypernoise\"; use `baseline` for \"{}\"",
                    cfg.method.as_str()
                )));
            }
            cfg.require_method()?;
            let ctx = context(Some(&cfg), common)?;
            runner::run_method(cfg, &ctx)?;
        }
        Command::Baseline { config, common } => {
            let cfg = load(config, common)?;
            if cfg.method == Method::Hypernoise {
                return Err(CliError::Config("baseline runs a comparison method; use `train` for hypernoise".into()));
            }
            cfg.require_method()?;
            let ctx = context(Some(&cfg), common)?;
            runner::run_method(cfg, &ctx)?;
        }
        Command::Tradeoff { config, common } => {
            if config.len() != 2 {
                return Err(CliError::Config(format!("tradeoff needs exactly two --config files, got {}", config.len())));
            }
            let a = load(&config[0], common)?;
            let b = load(&config[1], common)?;
            let ctx = context(Some(&a), common)?;
            let summary = runner::run_tradeoff(a, b, &ctx)?;
            if !summary.matched.is_empty() && !summary.hypernoise_dominates() {
                eprintln!("note: direct fine-tuning is not worse at every matched reward level");
            }
        }
        Command::Diversity { config, seeds, common } => {
            let cfg = load(config, common)?;
            cfg.require_method()?;
            let ctx = context(Some(&cfg), common)?;
            runner::run_diversity(cfg, *seeds, &ctx)?;
        }
        Command::Plot { csv, kind, x, y, out } => runner::run_plot(csv, *kind, x, y, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let (CliError::Config(_), Some(dir)) = (&e, error_dir(&cli.command)) {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.log"), format!("{e}\n"));
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
