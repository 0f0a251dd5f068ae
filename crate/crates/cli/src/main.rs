use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use blocksec::harness::{run_federation, ScenarioConfig};
use blocksec::ledger::{decode_public_keys, verify_chain};
use blocksec::model::gradcheck::run_gradcheck;
use blocksec::timing::{sweep, sweep_csv, sweep_plot_data, TimingParams};
use blocksec::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "blocksec", version, about = "RSU-verified federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the analytic block-time table as CSV.
    TimingSweep {
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25")]
        clients: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        rsus: Vec<usize>,
        /// Timing constants taken from the `[timing]` table of a scenario file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write gnuplot-ready columns to this file.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Verify a ledger file. RSU keys are read from `--keys`, or from
    /// `rsu_pks.bin` next to the ledger when present.
    LedgerVerify {
        ledger: PathBuf,
        #[arg(long)]
        keys: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

/// Failure with a chosen exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::InvalidScenario(_) | Error::UnknownStrategy { .. }) => EXIT_CONFIG,
            Some(Error::Invariant(_)) => EXIT_INVARIANT,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, &out),
        Command::TimingSweep {
            clients,
            rsus,
            config,
            plot,
        } => cmd_timing_sweep(&clients, &rsus, config.as_deref(), plot.as_deref()),
        Command::LedgerVerify { ledger, keys } => cmd_ledger_verify(&ledger, keys.as_deref()),
        Command::Gradcheck {
            trials,
            seed,
            tolerance,
        } => cmd_gradcheck(trials, seed, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    Ok(ScenarioConfig::load(path)?)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let artifacts = run_federation(&cfg)?;
    artifacts
        .write_to(out)
        .with_context(|| format!("writing artifacts to {}", out.display()))?;
    let r = &artifacts.report;
    println!(
        "rounds={} finalized={} final_acc={:.4} ledger_bytes={} chain_ok={}",
        r.rounds.len(),
        r.finalized_rounds,
        r.final_accuracy,
        r.ledger_bytes,
        r.chain.ok
    );
    for c in &r.clients {
        if let Some(m) = c.mean_missing_class_recall {
            println!("client {} missing-class recall {:.4}", c.client, m);
        }
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn cmd_timing_sweep(
    clients: &[usize],
    rsus: &[usize],
    config: Option<&Path>,
    plot: Option<&Path>,
) -> Result<(), Failure> {
    if clients.is_empty() || rsus.is_empty() || rsus.contains(&0) {
        return Err(Error::Config(
            "--clients and --rsus need at least one value and RSU counts must be positive".into(),
        )
        .into());
    }
    let params = match config {
        Some(p) => load_config(p)?.timing,
        None => TimingParams::default(),
    };
    params.validate().map_err(|e| Error::Config(e.to_string()))?;
    let rows = sweep(clients, rsus, &params);
    print!("{}", sweep_csv(&rows));
    if let Some(path) = plot {
        std::fs::write(path, sweep_plot_data(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_ledger_verify(ledger: &Path, keys: Option<&Path>) -> Result<(), Failure> {
    let bytes = std::fs::read(ledger).with_context(|| format!("reading {}", ledger.display()))?;
    let sibling = ledger.with_file_name("rsu_pks.bin");
    let key_path = keys
        .map(Path::to_path_buf)
        .or_else(|| sibling.exists().then_some(sibling));
    let pks = match &key_path {
        Some(p) => {
            let raw = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(decode_public_keys(&raw)?)
        }
        None => {
            println!("note: no RSU key file found, checking structure and hash links only");
            None
        }
    };
    let v = verify_chain(&bytes, pks.as_deref());
    if v.ok {
        println!("ok: {} blocks verified", v.verified_blocks);
        return Ok(());
    }
    let index = v.first_failure.unwrap_or(v.verified_blocks);
    println!("FAILED at block {index}: {}", v.reason.as_deref().unwrap_or("unknown"));
    Err(Failure {
        code: EXIT_INVARIANT,
        error: anyhow::anyhow!("ledger verification failed at block {index}"),
    })
}

fn cmd_gradcheck(trials: usize, seed: u64, tolerance: f64) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()).into());
    }
    let report = run_gradcheck(trials, seed)?;
    println!(
        "trials={} parameters={} max_relative_error={:.3e} worst_trial={}",
        report.trials, report.parameters_checked, report.max_relative_error, report.worst_trial
    );
    if report.max_relative_error > tolerance {
        return Err(Failure {
            code: EXIT_INVARIANT,
            error: anyhow::anyhow!(
                "max relative error {:.3e} exceeds {tolerance:.1e}",
                report.max_relative_error
            ),
        });
    }
    Ok(())
}
