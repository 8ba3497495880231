//! `simulate`, `design` and `sweep`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use elphgo::gain_design::{design_certificate, GainCertificate};
use elphgo::observer::ObserverGains;
use elphgo::simulator::{
    kappa_sweep, simulate_closed_loop, simulate_ideal, Certification, Outcome, SimError, SimOptions, SweepRow,
    SweepScenario, Trajectory,
};

use crate::config::{load_config, LoadedConfig, Scenario};
use crate::output::{resolve_out_dir, write_atomic, ConfigRecord, Manifest, RunFlags, MANIFEST_SCHEMA};
use crate::report::design_report;
use crate::{classify_design_error, CliError, EXIT_CERTIFICATE, EXIT_DIVERGED, EXIT_OK};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Design(d) => classify_design_error(d),
        other => CliError::Simulation(other),
    }
}

fn outcome_exit(outcome: &Outcome) -> i32 {
    match outcome {
        Outcome::Completed => EXIT_OK,
        Outcome::Diverged { .. } | Outcome::NonFinite { .. } => EXIT_DIVERGED,
    }
}

fn load(config: &str, profile: Option<&str>) -> Result<(LoadedConfig, Scenario), CliError> {
    let loaded = load_config(config)?;
    let sc = loaded.config.scenario(profile)?;
    Ok((loaded, sc))
}

fn stem(sc: &Scenario, suffixes: &[&str]) -> String {
    let mut s = sc.output.stem.clone().unwrap_or_else(|| sc.name.clone());
    s.push('_');
    s.push_str(&sc.profile);
    for x in suffixes {
        s.push('_');
        s.push_str(x);
    }
    s
}

pub fn read_certificate(path: &Path) -> Result<GainCertificate, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    GainCertificate::from_json(&text).map_err(|e| CliError::Certificate(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub config: String,
    pub profile: Option<String>,
    pub perturb: bool,
    pub ideal: bool,
    pub out: Option<PathBuf>,
    /// Certificate from `design`; verified before the run and embedded in the manifest.
    pub certificate: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub exit_code: i32,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub trajectory: Trajectory,
}

/// Runs one scenario and writes `<stem>.csv` plus `<stem>.manifest.json`.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateOutput, CliError> {
    let (loaded, sc) = load(&args.config, args.profile.as_deref())?;
    let perturb = args.perturb || sc.disturbance_default;
    if args.perturb && sc.disturbances.is_empty() {
        return Err(CliError::Config("--perturb needs scenario.disturbances".into()));
    }
    let plant = sc.plant_for(perturb);
    let certificate = args.certificate.as_deref().map(read_certificate).transpose()?;

    let start = Instant::now();
    let (traj, integ) = if args.ideal {
        let integ = sc.ideal_integrator();
        (simulate_ideal(&plant, &sc.controller, &sc.x_init, &integ).map_err(sim_error)?, integ)
    } else {
        let gains = ObserverGains::new(sc.gamma.clone(), sc.ell.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        let integ = sc.closed_loop_integrator(&sc.ell);
        let cert = match &certificate {
            Some(c) => Certification::Certified(c),
            None => Certification::Waived,
        };
        let traj = simulate_closed_loop(&plant, &sc.controller, &gains, &sc.x_init, &sc.eta_init, &integ, cert, SimOptions::default())
            .map_err(sim_error)?;
        (traj, integ)
    };
    let runtime_s = start.elapsed().as_secs_f64();

    let mut suffixes = Vec::new();
    if perturb {
        suffixes.push("perturb");
    }
    if args.ideal {
        suffixes.push("ideal");
    }
    let stem = stem(&sc, &suffixes);
    let dir = resolve_out_dir(args.out.as_deref(), sc.output.dir.as_deref());
    let csv_path = dir.join(format!("{stem}.csv"));
    let manifest_path = dir.join(format!("{stem}.manifest.json"));

    let mut csv = Vec::new();
    traj.write_csv(&mut csv).map_err(|e| CliError::io(&csv_path, e))?;
    write_atomic(&csv_path, &csv)?;

    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        command: "simulate".into(),
        version: VERSION.into(),
        config: ConfigRecord::new(&loaded, &sc.name, &sc.profile),
        seed: sc.seed,
        flags: RunFlags { perturb, ideal: args.ideal },
        integrator: integ,
        ell: if args.ideal { Vec::new() } else { sc.ell.clone() },
        gamma: if args.ideal { Vec::new() } else { sc.gamma.clone() },
        sat_level: sc.controller.sat_level(),
        outcome: traj.outcome.clone(),
        final_norm: traj.final_norm(),
        samples: traj.len(),
        csv: format!("{stem}.csv"),
        certification: if certificate.is_some() { "certified" } else { "waived" }.into(),
        certificate,
        warnings: sc.warnings.clone(),
        runtime_s,
    };
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
    Ok(SimulateOutput { exit_code: outcome_exit(&traj.outcome), csv_path, manifest_path, manifest, trajectory: traj })
}

#[derive(Debug, Clone, Default)]
pub struct DesignArgs {
    pub config: String,
    pub profile: Option<String>,
    pub report: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DesignOutput {
    pub exit_code: i32,
    pub certificate: Option<GainCertificate>,
    /// Failure reason when no certificate could be issued.
    pub failure: Option<String>,
    pub report: String,
    pub certificate_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

/// Runs the design pipeline; a failed certificate is reported with exit code 3.
pub fn cmd_design(args: &DesignArgs) -> Result<DesignOutput, CliError> {
    let (_, sc) = load(&args.config, args.profile.as_deref())?;
    let region = sc
        .region
        .as_ref()
        .ok_or_else(|| CliError::Config("design needs a `design.region` section".into()))?;
    let plant = sc.plant_for(false);
    let result = match design_certificate(&plant, &sc.controller, &sc.gamma, region, &sc.design) {
        Ok(c) => Ok(c),
        Err(e) => match classify_design_error(e) {
            CliError::Certificate(msg) => Err(msg),
            other => return Err(other),
        },
    };
    let report = design_report(&sc, &result);
    let dir = resolve_out_dir(args.out.as_deref(), sc.output.dir.as_deref());
    let stem = stem(&sc, &["design"]);
    let report_path = if args.report {
        let p = dir.join(format!("{stem}.txt"));
        write_atomic(&p, report.as_bytes())?;
        Some(p)
    } else {
        None
    };
    match result {
        Ok(cert) => {
            let p = dir.join(format!("{stem}.certificate.json"));
            write_atomic(&p, (cert.to_json() + "\n").as_bytes())?;
            Ok(DesignOutput {
                exit_code: EXIT_OK,
                certificate: Some(cert),
                failure: None,
                report,
                certificate_path: Some(p),
                report_path,
            })
        }
        Err(msg) => Ok(DesignOutput {
            exit_code: EXIT_CERTIFICATE,
            certificate: None,
            failure: Some(msg),
            report,
            certificate_path: None,
            report_path,
        }),
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub config: String,
    pub profile: Option<String>,
    pub kappas: Vec<f64>,
    pub perturb: bool,
    pub out: Option<PathBuf>,
    /// Supplies `θ*` for the below-threshold flag.
    pub certificate: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub exit_code: i32,
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
}

pub fn sweep_csv(rows: &[SweepRow], m: usize) -> String {
    let mut out = String::from("kappa,");
    for k in 1..=m {
        out.push_str(&format!("ell_{k},"));
    }
    out.push_str("dt,steady_etatilde,steady_normx,runtime_s,outcome,below_threshold\n");
    for r in rows {
        let outcome = match r.outcome {
            Outcome::Completed => "completed",
            Outcome::Diverged { .. } => "diverged",
            Outcome::NonFinite { .. } => "nonfinite",
        };
        out.push_str(&format!("{:.16e},", r.kappa));
        for l in &r.ell {
            out.push_str(&format!("{l:.16e},"));
        }
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.6},{outcome},{}\n",
            r.dt, r.steady_eta_tilde, r.steady_x, r.runtime_s, r.below_threshold
        ));
    }
    out
}

/// One closed-loop run per `κ` with `ℓ` from the cascade; writes `<stem>_sweep.csv`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutput, CliError> {
    if args.kappas.len() < 2 {
        return Err(CliError::Usage("sweep needs at least two --kappa values".into()));
    }
    if let Some(k) = args.kappas.iter().find(|k| !(**k >= 1.0 && k.is_finite())) {
        return Err(CliError::Usage(format!("kappa must be >= 1, got {k}")));
    }
    let (_, sc) = load(&args.config, args.profile.as_deref())?;
    if args.perturb && sc.disturbances.is_empty() {
        return Err(CliError::Config("--perturb needs scenario.disturbances".into()));
    }
    let theta_star = args.certificate.as_deref().map(read_certificate).transpose()?.map(|c| c.theta_star);
    let plant = sc.plant_for(args.perturb);
    let smallest = args.kappas.iter().copied().fold(f64::INFINITY, f64::min);
    let ell0 = elphgo::gain_design::gain_cascade(&sc.cascade_g, smallest, plant.indices().r())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let scenario = SweepScenario {
        plant: &plant,
        cfg: &sc.controller,
        gamma: sc.gamma.clone(),
        g: sc.cascade_g.clone(),
        x_init: sc.x_init.clone(),
        eta_init: sc.eta_init.clone(),
        integ: sc.closed_loop_integrator(&ell0),
        theta_star,
    };
    let rows = kappa_sweep(&scenario, &args.kappas).map_err(sim_error)?;
    let dir = resolve_out_dir(args.out.as_deref(), sc.output.dir.as_deref());
    let mut suffixes = Vec::new();
    if args.perturb {
        suffixes.push("perturb");
    }
    suffixes.push("sweep");
    let csv_path = dir.join(format!("{}.csv", stem(&sc, &suffixes)));
    write_atomic(&csv_path, sweep_csv(&rows, plant.indices().m()).as_bytes())?;
    let exit_code = rows.iter().map(|r| outcome_exit(&r.outcome)).max().unwrap_or(EXIT_OK);
    Ok(SweepOutput { exit_code, rows, csv_path })
}
