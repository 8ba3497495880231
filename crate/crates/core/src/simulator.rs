//! Fixed-step integration of the closed loop and trajectory recording.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_law::{ideal_control, output_feedback_into, ControlError, ControllerConfig};
use crate::gain_design::{build_f, gain_cascade, DesignError, GainCertificate};
use crate::matrices::{spectral_radius, vec_norm};
use crate::normal_form::{ModelError, PlantModel, PlantState, PlantWorkspace};
use crate::observer::{
    extract_into, observer_rhs_into, observer_workspace, rescale_into, ObserverError, ObserverGains,
    ObserverState, ObserverWorkspace,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Invalid(String),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Design(#[from] DesignError),
}

pub const DEFAULT_C_STAB: f64 = 0.5;
pub const DEFAULT_ESCAPE_RADIUS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Record every `record_stride`-th step (the last step is always kept).
    pub record_stride: usize,
    pub c_stab: f64,
    pub escape_radius: f64,
}

impl IntegratorConfig {
    pub fn new(dt: f64, t_final: f64, record_stride: usize) -> Self {
        Self { dt, t_final, record_stride, c_stab: DEFAULT_C_STAB, escape_radius: DEFAULT_ESCAPE_RADIUS }
    }

    fn check(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) || !(self.t_final >= 0.0) || self.record_stride == 0 {
            return Err(SimError::Invalid("need dt > 0, t_final >= 0 and record_stride >= 1".into()));
        }
        if !(self.escape_radius > 0.0) || !(self.c_stab > 0.0) {
            return Err(SimError::Invalid("escape radius and c_stab must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Stage buffers for [`rk4_step`].
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }
}

/// Classical fourth-order Runge–Kutta step, in place.
pub fn rk4_step<F>(rhs: &mut F, t: f64, y: &mut [f64], dt: f64, ws: &mut Rk4Workspace) -> Result<(), SimError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), SimError>,
{
    let n = y.len();
    let nodes = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        let (done, rest) = ws.k.split_at_mut(s);
        if s == 0 {
            rhs(t, y, &mut rest[0])?;
        } else {
            let prev = &done[s - 1];
            for i in 0..n {
                ws.tmp[i] = y[i] + nodes[s] * dt * prev[i];
            }
            rhs(t + nodes[s] * dt, &ws.tmp, &mut rest[0])?;
        }
        if rest[0].iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { t: t + nodes[s] * dt });
        }
    }
    for i in 0..n {
        y[i] += dt / 6.0 * (ws.k[0][i] + 2.0 * ws.k[1][i] + 2.0 * ws.k[2][i] + ws.k[3][i]);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite { t: t + dt });
    }
    Ok(())
}

/// `dt = c_stab / (ℓ_max ρ̂)` with `ρ̂` the largest spectral radius of the `Fₖ`.
pub fn suggest_dt(ell: &[f64], gamma: &[Vec<(f64, f64)>], c_stab: f64) -> f64 {
    let l_max = ell.iter().copied().fold(0.0, f64::max);
    let rho = gamma.iter().map(|g| spectral_radius(&build_f(g))).fold(0.0, f64::max);
    c_stab / (l_max * rho)
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    Diverged { t: f64, norm: f64 },
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub n0: usize,
    pub r: Vec<usize>,
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// Flat plant states `col(x₀, ξ)`.
    pub states: Vec<Vec<f64>>,
    /// Flat observer states; empty for full-state runs.
    pub observer: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Saturation arguments `σ̂ + Kξ̂` (or `a + Kξ` under the ideal law).
    pub sat_args: Vec<Vec<f64>>,
    pub eta_tilde: Option<Vec<Vec<f64>>>,
    pub outcome: Outcome,
}

impl Trajectory {
    fn new(n0: usize, r: Vec<usize>, with_eta_tilde: bool) -> Self {
        Self {
            n0,
            r,
            times: Vec::new(),
            norms: Vec::new(),
            states: Vec::new(),
            observer: Vec::new(),
            controls: Vec::new(),
            sat_args: Vec::new(),
            eta_tilde: with_eta_tilde.then(Vec::new),
            outcome: Outcome::Completed,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_norm(&self) -> f64 {
        self.norms.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest `|x|` over recorded samples with `t ∈ [t0, t1]`.
    pub fn max_norm_between(&self, t0: f64, t1: f64) -> f64 {
        self.window(t0, t1).map(|i| self.norms[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_norm_between(&self, t0: f64, t1: f64) -> f64 {
        self.window(t0, t1).map(|i| self.norms[i]).fold(f64::INFINITY, f64::min)
    }

    /// Largest `|η̃|` over recorded samples with `t ∈ [t0, t1]`.
    pub fn max_eta_tilde_between(&self, t0: f64, t1: f64) -> Option<f64> {
        let et = self.eta_tilde.as_ref()?;
        Some(self.window(t0, t1).map(|i| vec_norm(&et[i])).fold(f64::NEG_INFINITY, f64::max))
    }

    fn window(&self, t0: f64, t1: f64) -> impl Iterator<Item = usize> + '_ {
        self.times.iter().enumerate().filter(move |(_, t)| **t >= t0 && **t <= t1).map(|(i, _)| i)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string(), "normx".to_string()];
        h.extend((1..=self.n0).map(|i| format!("x0_{i}")));
        for (k, &rk) in self.r.iter().enumerate() {
            h.extend((1..=rk).map(|i| format!("xi_{}_{}", k + 1, i)));
        }
        h.extend((1..=self.r.len()).map(|k| format!("u_{k}")));
        if self.eta_tilde.is_some() {
            for (k, &rk) in self.r.iter().enumerate() {
                for i in 1..=rk {
                    h.push(format!("etatilde1_{}_{}", k + 1, i));
                    h.push(format!("etatilde2_{}_{}", k + 1, i));
                }
            }
        }
        h
    }

    /// Writes the CSV export; values use 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.csv_header().join(","))?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            let mut push = |v: f64| {
                if !line.is_empty() {
                    line.push(',');
                }
                line.push_str(&format!("{v:.16e}"));
            };
            push(self.times[i]);
            push(self.norms[i]);
            self.states[i].iter().for_each(|v| push(*v));
            self.controls[i].iter().for_each(|v| push(*v));
            if let Some(et) = &self.eta_tilde {
                et[i].iter().for_each(|v| push(*v));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Whether the run is backed by a verified gain certificate.
#[derive(Debug, Clone, Copy)]
pub enum Certification<'a> {
    Certified(&'a GainCertificate),
    Waived,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub record_eta_tilde: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { record_eta_tilde: true }
    }
}

/// Everything the coupled `(x, η)` vector field needs, preallocated.
struct ClosedLoop<'a> {
    plant: &'a PlantModel,
    cfg: &'a ControllerConfig,
    gains: &'a ObserverGains,
    n: usize,
    plant_ws: PlantWorkspace,
    obs_ws: ObserverWorkspace,
    xi_hat: Vec<f64>,
    sigma_hat: Vec<f64>,
    arg: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> ClosedLoop<'a> {
    fn new(plant: &'a PlantModel, cfg: &'a ControllerConfig, gains: &'a ObserverGains) -> Self {
        let ix = plant.indices();
        let m = ix.m();
        Self {
            plant,
            cfg,
            gains,
            n: ix.n(),
            plant_ws: plant.workspace(),
            obs_ws: observer_workspace(plant),
            xi_hat: vec![0.0; ix.total_order()],
            sigma_hat: vec![0.0; m],
            arg: vec![0.0; m],
            w: vec![0.0; m],
            u: vec![0.0; m],
            y: vec![0.0; m],
        }
    }

    fn control(&mut self, z: &[f64]) {
        extract_into(self.plant.indices(), &z[self.n..], &mut self.xi_hat, &mut self.sigma_hat);
        output_feedback_into(self.cfg, &self.sigma_hat, &self.xi_hat, &mut self.arg, &mut self.w, &mut self.u);
    }

    fn rhs(&mut self, t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), SimError> {
        self.control(z);
        let (x, eta) = z.split_at(self.n);
        let (dx, deta) = dz.split_at_mut(self.n);
        self.plant.rhs_into(x, &self.u, t, dx, &mut self.plant_ws)?;
        let ix = self.plant.indices();
        ix.output_into(&x[ix.n0()..], &mut self.y);
        observer_rhs_into(self.plant, self.cfg, self.gains, eta, &self.y, &self.u, deta, &mut self.obs_ws)?;
        Ok(())
    }
}

fn record_closed_loop(traj: &mut Trajectory, cl: &mut ClosedLoop, t: f64, z: &[f64]) -> Result<(), SimError> {
    cl.control(z);
    let (x, eta) = z.split_at(cl.n);
    traj.times.push(t);
    traj.norms.push(vec_norm(x));
    traj.states.push(x.to_vec());
    traj.observer.push(eta.to_vec());
    traj.controls.push(cl.u.clone());
    traj.sat_args.push(cl.arg.clone());
    if let Some(et) = traj.eta_tilde.as_mut() {
        let ix = cl.plant.indices();
        let state = PlantState::unflatten(ix, x)?;
        let sigma = crate::control_law::perturbation_sigma_at(cl.plant, cl.cfg, &state, &cl.u, t)?;
        let mut out = vec![0.0; eta.len()];
        rescale_into(ix, cl.gains.ell(), &x[ix.n0()..], &sigma, eta, &mut out);
        et.push(out);
    }
    Ok(())
}

fn check_certificate(plant: &PlantModel, cert: Certification) -> Result<(), SimError> {
    if let Certification::Certified(c) = cert {
        if c.r != plant.indices().r() {
            return Err(SimError::Invalid("certificate was issued for different chain orders".into()));
        }
        c.verify()?;
    }
    Ok(())
}

/// Integrates plant, observer bank and saturated output feedback.
pub fn simulate_closed_loop(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    gains: &ObserverGains,
    x_init: &PlantState,
    eta_init: &ObserverState,
    integ: &IntegratorConfig,
    cert: Certification,
    opts: SimOptions,
) -> Result<Trajectory, SimError> {
    integ.check()?;
    let ix = plant.indices();
    x_init.check(ix)?;
    gains.check(ix)?;
    check_certificate(plant, cert)?;
    let dt_max = suggest_dt(gains.ell(), gains.gamma(), integ.c_stab);
    if integ.dt > dt_max * (1.0 + 1e-12) {
        return Err(SimError::Invalid(format!(
            "dt = {:e} exceeds the stability bound {dt_max:e} (c_stab = {})",
            integ.dt, integ.c_stab
        )));
    }
    let mut z = x_init.flatten();
    let eta = eta_init.flatten();
    if eta.len() != 2 * ix.total_order() {
        return Err(SimError::Invalid("observer state does not match the chain orders".into()));
    }
    z.extend_from_slice(&eta);

    let mut cl = ClosedLoop::new(plant, cfg, gains);
    let mut traj = Trajectory::new(ix.n0(), ix.r().to_vec(), opts.record_eta_tilde);
    let mut ws = Rk4Workspace::new(z.len());
    record_closed_loop(&mut traj, &mut cl, 0.0, &z)?;
    let steps = integ.steps();
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| cl.rhs(t, y, dy);
    for step in 1..=steps {
        let t0 = (step - 1) as f64 * integ.dt;
        let t1 = step as f64 * integ.dt;
        match rk4_step(&mut rhs, t0, &mut z, integ.dt, &mut ws) {
            Ok(()) => {}
            Err(SimError::NonFinite { t }) => {
                traj.outcome = Outcome::NonFinite { t };
                return Ok(traj);
            }
            Err(e) => return Err(e),
        }
        let norm = vec_norm(&z[..ix.n()]);
        if norm > integ.escape_radius {
            traj.outcome = Outcome::Diverged { t: t1, norm };
            break;
        }
        if step % integ.record_stride == 0 || step == steps {
            let mut cl = ClosedLoop::new(plant, cfg, gains);
            record_closed_loop(&mut traj, &mut cl, t1, &z)?;
        }
    }
    Ok(traj)
}

/// Integrates the plant under the full-state law `u*`.
pub fn simulate_ideal(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    x_init: &PlantState,
    integ: &IntegratorConfig,
) -> Result<Trajectory, SimError> {
    integ.check()?;
    let ix = plant.indices().clone();
    x_init.check(&ix)?;
    let mut z = x_init.flatten();
    let mut pws = plant.workspace();
    let control = |z: &[f64]| -> Result<Vec<f64>, SimError> {
        let state = PlantState::unflatten(&ix, z)?;
        Ok(ideal_control(plant, cfg, &state)?)
    };
    let sat_arg = |z: &[f64]| -> Result<Vec<f64>, SimError> {
        let (x0, xi) = z.split_at(ix.n0());
        Ok(plant.a(x0, xi)?.iter().zip(cfg.k_xi(xi)).map(|(a, k)| a + k).collect())
    };
    let mut traj = Trajectory::new(ix.n0(), ix.r().to_vec(), false);
    let record = |traj: &mut Trajectory, t: f64, z: &[f64]| -> Result<(), SimError> {
        traj.times.push(t);
        traj.norms.push(vec_norm(z));
        traj.states.push(z.to_vec());
        traj.controls.push(control(z)?);
        traj.sat_args.push(sat_arg(z)?);
        Ok(())
    };
    record(&mut traj, 0.0, &z)?;
    let mut ws = Rk4Workspace::new(z.len());
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), SimError> {
        let u = control(y)?;
        plant.rhs_into(y, &u, t, dy, &mut pws)?;
        Ok(())
    };
    let steps = integ.steps();
    for step in 1..=steps {
        let t0 = (step - 1) as f64 * integ.dt;
        let t1 = step as f64 * integ.dt;
        match rk4_step(&mut rhs, t0, &mut z, integ.dt, &mut ws) {
            Ok(()) => {}
            Err(SimError::NonFinite { t }) => {
                traj.outcome = Outcome::NonFinite { t };
                return Ok(traj);
            }
            Err(e) => return Err(e),
        }
        let norm = vec_norm(&z);
        if norm > integ.escape_radius {
            traj.outcome = Outcome::Diverged { t: t1, norm };
            break;
        }
        if step % integ.record_stride == 0 || step == steps {
            record(&mut traj, t1, &z)?;
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub ell: Vec<f64>,
    pub dt: f64,
    /// Sup of `|η̃|` over the final 20% of the horizon.
    pub steady_eta_tilde: f64,
    /// Sup of `|x|` over the final 20% of the horizon.
    pub steady_x: f64,
    pub runtime_s: f64,
    pub outcome: Outcome,
    /// Set when a threshold is known and `κ` lies below it.
    pub below_threshold: bool,
}

/// A closed-loop run whose observer gains come from the cascade.
#[derive(Debug, Clone)]
pub struct SweepScenario<'a> {
    pub plant: &'a PlantModel,
    pub cfg: &'a ControllerConfig,
    pub gamma: Vec<Vec<(f64, f64)>>,
    pub g: Vec<f64>,
    pub x_init: PlantState,
    pub eta_init: ObserverState,
    /// `dt` is an upper bound; each run uses `min(dt, suggest_dt)`.
    pub integ: IntegratorConfig,
    pub theta_star: Option<f64>,
}

pub fn kappa_sweep(sc: &SweepScenario, kappas: &[f64]) -> Result<Vec<SweepRow>, SimError> {
    if kappas.len() < 2 {
        return Err(SimError::Invalid("a sweep needs at least two kappa values".into()));
    }
    let ix = sc.plant.indices();
    kappas
        .iter()
        .map(|&kappa| {
            let ell = gain_cascade(&sc.g, kappa, ix.r())?;
            let gains = ObserverGains::new(sc.gamma.clone(), ell.clone())?;
            let dt = sc.integ.dt.min(suggest_dt(&ell, &sc.gamma, sc.integ.c_stab));
            let integ = IntegratorConfig { dt, ..sc.integ.clone() };
            let start = Instant::now();
            let traj = simulate_closed_loop(
                sc.plant,
                sc.cfg,
                &gains,
                &sc.x_init,
                &sc.eta_init,
                &integ,
                Certification::Waived,
                SimOptions { record_eta_tilde: true },
            )?;
            let t0 = 0.8 * integ.t_final;
            Ok(SweepRow {
                kappa,
                ell,
                dt,
                steady_eta_tilde: traj.max_eta_tilde_between(t0, integ.t_final).unwrap_or(f64::NAN),
                steady_x: traj.max_norm_between(t0, integ.t_final),
                runtime_s: start.elapsed().as_secs_f64(),
                outcome: traj.outcome,
                below_threshold: sc.theta_star.is_some_and(|th| kappa < th),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::default_gamma;
    use crate::plants::{paper_example_2x2, LinearChains};
    use nalgebra::DMatrix;

    fn exp_decay(_t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), SimError> {
        dy[0] = -y[0];
        Ok(())
    }

    #[test]
    fn rk4_single_step_examples() {
        let mut ws = Rk4Workspace::new(1);
        let mut y = [1.0];
        rk4_step(&mut exp_decay, 0.0, &mut y, 0.1, &mut ws).unwrap();
        let h: f64 = 0.1;
        assert!((y[0] - (1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0)).abs() < 4.0 * f64::EPSILON);
        assert!((y[0] - 0.904_837_5).abs() < 1e-15);

        let mut y = [3.0];
        rk4_step(&mut |_, _: &[f64], d: &mut [f64]| { d[0] = 0.0; Ok(()) }, 0.0, &mut y, 0.5, &mut ws).unwrap();
        assert_eq!(y[0], 3.0);
        let mut y = [3.0];
        rk4_step(&mut |_, _: &[f64], d: &mut [f64]| { d[0] = 1.0; Ok(()) }, 0.0, &mut y, 0.25, &mut ws).unwrap();
        assert_eq!(y[0], 3.25);
    }

    #[test]
    fn rk4_reports_non_finite_stage() {
        let mut ws = Rk4Workspace::new(1);
        let mut y = [1.0];
        let err = rk4_step(&mut |t, _: &[f64], d: &mut [f64]| { d[0] = if t > 0.0 { f64::NAN } else { 1.0 }; Ok(()) }, 2.0, &mut y, 0.1, &mut ws);
        assert!(matches!(err, Err(SimError::NonFinite { t }) if t == 2.0));
        let err = rk4_step(&mut |t, _: &[f64], d: &mut [f64]| { d[0] = if t > 2.0 { f64::NAN } else { 1.0 }; Ok(()) }, 2.0, &mut y, 0.1, &mut ws);
        assert!(matches!(err, Err(SimError::NonFinite { t }) if (t - 2.05).abs() < 1e-12));
    }

    #[test]
    fn suggest_dt_examples() {
        // A 1×1 "F" is not available through build_f, so check the scaling laws.
        let g = vec![default_gamma(2).unwrap(), default_gamma(3).unwrap()];
        let a = suggest_dt(&[5e5, 200.0], &g, 0.5);
        let b = suggest_dt(&[1e6, 200.0], &g, 0.5);
        assert!(a <= 1e-6 && a > 1e-7, "{a}");
        assert!((a / b - 2.0).abs() < 1e-12);
        let rho = spectral_radius(&build_f(&g[0])).max(spectral_radius(&build_f(&g[1])));
        assert!((suggest_dt(&[1.0 / rho], &g, 0.5) - 0.5).abs() < 1e-12);
    }

    fn example_cfg() -> ControllerConfig {
        ControllerConfig::new(DMatrix::identity(2, 2), vec![vec![0.25, 1.0], vec![0.125, 0.75, 1.5]], 25.0, 0.5).unwrap()
    }

    #[test]
    fn origin_is_an_equilibrium() {
        let plant = paper_example_2x2();
        let ix = plant.indices().clone();
        let gains = ObserverGains::with_default_gamma(&ix, vec![5e3, 50.0]).unwrap();
        let integ = IntegratorConfig { c_stab: 1.5, ..IntegratorConfig::new(1e-4, 0.2, 10) };
        let traj = simulate_closed_loop(
            &plant,
            &example_cfg(),
            &gains,
            &PlantState::zeros(&ix),
            &ObserverState::zeros(&ix),
            &integ,
            Certification::Waived,
            SimOptions::default(),
        )
        .unwrap();
        assert_eq!(traj.outcome, Outcome::Completed);
        assert!(traj.states.iter().flatten().all(|v| *v == 0.0));
        assert!(traj.observer.iter().flatten().all(|v| *v == 0.0));
        let ideal = simulate_ideal(&plant, &example_cfg(), &PlantState::zeros(&ix), &IntegratorConfig::new(1e-2, 1.0, 1)).unwrap();
        assert!(ideal.states.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn step_size_above_bound_is_rejected() {
        let plant = paper_example_2x2();
        let ix = plant.indices().clone();
        let gains = ObserverGains::with_default_gamma(&ix, vec![5e5, 200.0]).unwrap();
        let err = simulate_closed_loop(
            &plant,
            &example_cfg(),
            &gains,
            &PlantState::zeros(&ix),
            &ObserverState::zeros(&ix),
            &IntegratorConfig::new(1e-4, 1.0, 1),
            Certification::Waived,
            SimOptions::default(),
        );
        assert!(matches!(err, Err(SimError::Invalid(_))));
    }

    #[test]
    fn escape_radius_stops_the_run() {
        // a(x) = x₁₁ with K chosen so the ideal loop is fine but b = −I flips the sign.
        let mut lc = LinearChains::new(0, &[2]);
        lc.b = -DMatrix::identity(1, 1);
        let plant = lc.build(0, vec![2]).unwrap();
        let cfg = ControllerConfig::new(DMatrix::identity(1, 1), vec![vec![0.25, 1.0]], 25.0, 0.5).unwrap();
        let gains = ObserverGains::with_default_gamma(plant.indices(), vec![10.0]).unwrap();
        let x = PlantState { x0: vec![], xi: vec![vec![1.0, 0.0]] };
        let integ = IntegratorConfig { escape_radius: 1e3, ..IntegratorConfig::new(1e-3, 100.0, 100) };
        let traj = simulate_closed_loop(
            &plant,
            &cfg,
            &gains,
            &x,
            &ObserverState::zeros(plant.indices()),
            &integ,
            Certification::Waived,
            SimOptions::default(),
        )
        .unwrap();
        assert!(matches!(traj.outcome, Outcome::Diverged { norm, .. } if norm > 1e3));
    }

    #[test]
    fn linear_ideal_loop_matches_matrix_exponential() {
        let plant = LinearChains::plant(0, vec![2]);
        let cfg = ControllerConfig::new(DMatrix::identity(1, 1), vec![vec![2.0, 3.0]], 25.0, 0.5).unwrap();
        // Closed loop ξ̇ = [[0,1],[−2,−3]]ξ has modes e^{−t}, e^{−2t}.
        let x = PlantState { x0: vec![], xi: vec![vec![1.0, 0.0]] };
        let traj = simulate_ideal(&plant, &cfg, &x, &IntegratorConfig::new(1e-3, 2.0, 100)).unwrap();
        let t: f64 = 2.0;
        let exact = 2.0 * (-t).exp() - (-2.0 * t).exp();
        let got = traj.states.last().unwrap()[0];
        assert!((got - exact).abs() < 1e-6, "{got} vs {exact}");
        let a = nalgebra::Matrix2::new(0.0, 1.0, -2.0, -3.0);
        let e = (a * t).exp() * nalgebra::Vector2::new(1.0, 0.0);
        assert!((got - e[0]).abs() < 1e-6);
    }

    #[test]
    fn csv_layout() {
        let plant = paper_example_2x2();
        let ix = plant.indices().clone();
        let gains = ObserverGains::with_default_gamma(&ix, vec![5e3, 50.0]).unwrap();
        let integ = IntegratorConfig { c_stab: 1.5, ..IntegratorConfig::new(1e-4, 0.001, 5) };
        let mut x = PlantState::zeros(&ix);
        x.xi[1][0] = 0.1;
        let traj = simulate_closed_loop(&plant, &example_cfg(), &gains, &x, &ObserverState::zeros(&ix), &integ, Certification::Waived, SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,normx,x0_1,x0_2,xi_1_1,xi_1_2,xi_2_1,xi_2_2,xi_2_3,u_1,u_2,etatilde1_1_1"));
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.split(',').count() == header.split(',').count()));
        assert!(rows[0].starts_with("0.0000000000000000e0,1.0000000000000001e-1"));
    }
}
