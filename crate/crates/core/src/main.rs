use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use eswm::checks::{verify_suite, Audit, OracleAudit};
use eswm::config::{ExperimentConfig, Overrides};
use eswm::output::emit_results;
use eswm::sim::{run_experiment, Mode};

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

#[derive(Parser)]
#[command(
    name = "eswm",
    version,
    about = "Deadline-aware crowdsourcing mechanism simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write epochs.csv, summary.csv and run.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed (overrides the file).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, allow_negative_numbers = true)]
        epochs: Option<i64>,
        #[arg(long, allow_negative_numbers = true)]
        replications: Option<i64>,
        /// Cross-check every small enough round against the exact solver.
        #[arg(long)]
        oracle: bool,
        /// Output directory (overrides the file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run invariant and oracle checks on small instances.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Static,
    Reselection,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Static => Mode::Static,
            ModeArg::Reselection => Mode::Reselection,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CONFIG_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            epochs,
            replications,
            oracle,
            out,
        } => {
            let overrides = Overrides {
                seed,
                mode: mode.map(Mode::from),
                epochs,
                replications,
                out,
            };
            match ExperimentConfig::load(&config, &overrides) {
                Ok(c) => run(&c, oracle),
                Err(e) => config_error(e),
            }
        }
        Command::Verify { config } => {
            match ExperimentConfig::load(&config, &Overrides::default()) {
                Ok(c) => verify(&c),
                Err(e) => config_error(e),
            }
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(CONFIG_ERROR)
}

fn run(config: &ExperimentConfig, with_oracle: bool) -> ExitCode {
    let observers = (Audit::new(), OracleAudit::new());
    let result = if with_oracle {
        run_experiment(&config.sim, config.seed, &observers)
    } else {
        run_experiment(&config.sim, config.seed, &observers.0)
    };
    let experiment = match result {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(RUNTIME_ERROR);
        }
    };
    if let Err(e) = emit_results(&config.out, config, &experiment.traces, &experiment.summary) {
        eprintln!("error: {e}");
        return ExitCode::from(RUNTIME_ERROR);
    }
    eprintln!(
        "{} replications x {} epochs, seed {}, results in {}",
        config.sim.replications,
        config.sim.epochs,
        config.seed,
        config.out.display()
    );

    let (audit, oracle) = &observers;
    let mut ok = true;
    if audit.failure_count() > 0 {
        ok = false;
        eprintln!("feasibility audit: {} failures", audit.failure_count());
        for f in audit.failures() {
            eprintln!("  {f}");
        }
    }
    if with_oracle {
        eprintln!(
            "oracle: {} rounds checked, {} skipped as too large, {} failures",
            oracle.checked(),
            oracle.skipped(),
            oracle.failure_count()
        );
        for f in oracle.failures() {
            eprintln!("  {f}");
        }
        ok &= oracle.failure_count() == 0;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(RUNTIME_ERROR)
    }
}

fn verify(config: &ExperimentConfig) -> ExitCode {
    let outcomes = verify_suite(config);
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(RUNTIME_ERROR)
    }
}
