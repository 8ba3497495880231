use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elphgo_cli::{cmd_design, cmd_simulate, cmd_sweep, CliError, DesignArgs, SimulateArgs, SweepArgs, EXIT_CONFIG};

/// Output-feedback stabilizer design and simulation.
///
/// Exit codes: 0 success, 1 config or usage error, 2 divergence,
/// 3 certificate failure.
#[derive(Parser)]
#[command(name = "elphgo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop and write a trajectory CSV with a manifest.
    Simulate {
        /// Config file, or the name of a bundled config.
        config: String,
        #[arg(long)]
        profile: Option<String>,
        /// Add the configured disturbances.
        #[arg(long)]
        perturb: bool,
        /// Use the full-state law instead of the observers.
        #[arg(long)]
        ideal: bool,
        /// Output directory (default: $ELPHGO_OUT_DIR or ./elphgo-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Verify this certificate before running and embed it in the manifest.
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Compute and verify the gain certificate.
    Design {
        config: String,
        #[arg(long)]
        profile: Option<String>,
        /// Print the human-readable report and save it next to the certificate.
        #[arg(long)]
        report: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one simulation per kappa with gains from the cascade.
    Sweep {
        config: String,
        #[arg(long)]
        profile: Option<String>,
        /// Repeat or comma-separate; at least two values.
        #[arg(long = "kappa", value_delimiter = ',', required = true)]
        kappas: Vec<f64>,
        #[arg(long)]
        perturb: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Certificate supplying theta* for the below-threshold flag.
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { config, profile, perturb, ideal, out, certificate } => {
            let res = cmd_simulate(&SimulateArgs { config, profile, perturb, ideal, out, certificate })?;
            for w in &res.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{:?}: |x(T)| = {:.6e}, {} samples -> {}",
                res.manifest.outcome,
                res.manifest.final_norm,
                res.manifest.samples,
                res.csv_path.display()
            );
            Ok(res.exit_code)
        }
        Command::Design { config, profile, report, out } => {
            let res = cmd_design(&DesignArgs { config, profile, report, out })?;
            if report {
                print!("{}", res.report);
            }
            match (&res.certificate_path, &res.failure) {
                (Some(p), _) => println!("certificate -> {}", p.display()),
                (None, Some(msg)) => eprintln!("certificate failure: {msg}"),
                (None, None) => {}
            }
            Ok(res.exit_code)
        }
        Command::Sweep { config, profile, kappas, perturb, out, certificate } => {
            let res = cmd_sweep(&SweepArgs { config, profile, kappas, perturb, out, certificate })?;
            for r in &res.rows {
                let flag = if r.below_threshold { "  (below theta*)" } else { "" };
                println!(
                    "kappa {:.6e}: steady |etatilde| {:.6e}, steady |x| {:.6e}, {:.2} s{flag}",
                    r.kappa, r.steady_eta_tilde, r.steady_x, r.runtime_s
                );
            }
            println!("table -> {}", res.csv_path.display());
            Ok(res.exit_code)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
