//! Saturated output-feedback law, its ideal counterpart and the implicit
//! control equation.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrices::{max_real_eigenvalue, min_singular_value, norm2, prime_a, prime_b};
use crate::normal_form::{ModelError, PlantModel, PlantState};
use crate::region::{Region, RegionSummary};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("A - B K_{channel} is not Hurwitz (max real part {max_re:e})")]
    NotHurwitz { channel: usize, max_re: f64 },
    #[error("implicit control iteration did not converge after {iterations} steps (last gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },
    #[error("gain mismatch too large: mu0 >= 1 (estimated {0})")]
    MismatchTooLarge(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Constant gain estimate `B̂`, feedback blocks `Kₖ` and saturation data.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    bhat: DMatrix<f64>,
    bhat_inv: DMatrix<f64>,
    k_blocks: Vec<Vec<f64>>,
    sat_level: f64,
    eps0: f64,
}

impl ControllerConfig {
    pub fn new(
        bhat: DMatrix<f64>,
        k_blocks: Vec<Vec<f64>>,
        sat_level: f64,
        eps0: f64,
    ) -> Result<Self, ControlError> {
        let m = k_blocks.len();
        if bhat.shape() != (m, m) {
            return Err(ControlError::InvalidConfig(format!(
                "Bhat is {}x{} but there are {m} K blocks",
                bhat.nrows(),
                bhat.ncols()
            )));
        }
        if !(sat_level > 0.0 && sat_level.is_finite()) {
            return Err(ControlError::InvalidConfig(format!("saturation level must be positive, got {sat_level}")));
        }
        if !(eps0 > 0.0 && eps0 < 1.0) {
            return Err(ControlError::InvalidConfig(format!("eps0 must lie in (0, 1), got {eps0}")));
        }
        for (k, kk) in k_blocks.iter().enumerate() {
            let r = kk.len();
            if r == 0 || kk.iter().any(|v| !v.is_finite()) {
                return Err(ControlError::InvalidConfig(format!("K_{} must be a nonempty finite row", k + 1)));
            }
            let closed = prime_a(r) - prime_b(r) * DMatrix::from_row_slice(1, r, kk);
            let max_re = max_real_eigenvalue(&closed);
            if !(max_re < -1e-9) {
                return Err(ControlError::NotHurwitz { channel: k + 1, max_re });
            }
        }
        let smin = min_singular_value(&bhat);
        let cond = norm2(&bhat) / smin;
        if !(smin > 1e-10) || !cond.is_finite() {
            return Err(ControlError::InvalidConfig("Bhat is singular".into()));
        }
        let bhat_inv = bhat.clone().try_inverse().ok_or_else(|| ControlError::InvalidConfig("Bhat is singular".into()))?;
        Ok(Self { bhat, bhat_inv, k_blocks, sat_level, eps0 })
    }

    pub fn m(&self) -> usize {
        self.k_blocks.len()
    }

    pub fn bhat(&self) -> &DMatrix<f64> {
        &self.bhat
    }

    pub fn bhat_inv(&self) -> &DMatrix<f64> {
        &self.bhat_inv
    }

    pub fn k_blocks(&self) -> &[Vec<f64>] {
        &self.k_blocks
    }

    pub fn sat_level(&self) -> f64 {
        self.sat_level
    }

    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    pub fn with_sat_level(&self, l: f64) -> Result<Self, ControlError> {
        Self::new(self.bhat.clone(), self.k_blocks.clone(), l, self.eps0)
    }

    /// `K = blkdiag(K₁, …, K_m)`.
    pub fn k_matrix(&self) -> DMatrix<f64> {
        let rows: Vec<_> = self
            .k_blocks
            .iter()
            .map(|k| DMatrix::from_row_slice(1, k.len(), k))
            .collect();
        crate::matrices::blkdiag(&rows)
    }

    /// `Kξ` for a flat `ξ`.
    pub fn k_xi_into(&self, xi: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for (o, kk) in out.iter_mut().zip(&self.k_blocks) {
            *o = kk.iter().zip(&xi[off..]).map(|(a, b)| a * b).sum();
            off += kk.len();
        }
    }

    pub fn k_xi(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.k_xi_into(xi, &mut out);
        out
    }

    /// Multiplies by `B̂` (or `B̂⁻¹`) without allocating.
    pub fn mul_bhat_into(&self, inverse: bool, v: &[f64], out: &mut [f64]) {
        let mat = if inverse { &self.bhat_inv } else { &self.bhat };
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..v.len()).map(|c| mat[(r, c)] * v[c]).sum();
        }
    }

    /// Bound `‖B̂⁻¹‖·√m·(l + ε₀)` on any output of the saturated law.
    pub fn control_bound(&self) -> f64 {
        norm2(&self.bhat_inv) * (self.m() as f64).sqrt() * (self.sat_level + self.eps0)
    }
}

pub fn sat_scalar(s: f64, l: f64, eps0: f64) -> f64 {
    let a = s.abs();
    if a <= l {
        s
    } else {
        s.signum() * (l + eps0 * ((a - l) / eps0).tanh())
    }
}

pub fn sat_scalar_derivative(s: f64, l: f64, eps0: f64) -> f64 {
    let a = s.abs();
    if a <= l {
        1.0
    } else {
        // sech² keeps full relative precision where 1 − tanh² cancels.
        let c = ((a - l) / eps0).cosh();
        1.0 / (c * c)
    }
}

pub fn satv(s: &[f64], l: f64, eps0: f64) -> Vec<f64> {
    s.iter().map(|&v| sat_scalar(v, l, eps0)).collect()
}

pub fn satv_jacobian(s: &[f64], l: f64, eps0: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        s.len(),
        s.iter().map(|&v| sat_scalar_derivative(v, l, eps0)),
    ))
}

/// `u* = b(x)⁻¹(−a(x) − Kξ)`.
pub fn ideal_control(plant: &PlantModel, cfg: &ControllerConfig, x: &PlantState) -> Result<Vec<f64>, ControlError> {
    let xi = x.xi_flat();
    let a = plant.a(&x.x0, &xi)?;
    let kx = cfg.k_xi(&xi);
    let rhs = nalgebra::DVector::from_iterator(a.len(), a.iter().zip(&kx).map(|(ai, ki)| -ai - ki));
    let binv = plant.b_inverse(&x.x0, &xi)?;
    Ok((binv * rhs).iter().copied().collect())
}

/// `σ = a(x) + (b(x) − B̂)u`, with `a` including disturbances at time `t`.
pub fn perturbation_sigma_at(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    x: &PlantState,
    u: &[f64],
    t: f64,
) -> Result<Vec<f64>, ControlError> {
    let xi = x.xi_flat();
    let a = plant.a_disturbed(&x.x0, &xi, t)?;
    let db = plant.b(&x.x0, &xi)? - cfg.bhat();
    Ok(a.iter()
        .enumerate()
        .map(|(k, ak)| ak + (0..u.len()).map(|j| db[(k, j)] * u[j]).sum::<f64>())
        .collect())
}

pub fn perturbation_sigma(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    x: &PlantState,
    u: &[f64],
) -> Result<Vec<f64>, ControlError> {
    perturbation_sigma_at(&plant.without_disturbances(), cfg, x, u, 0.0)
}

/// `u = −B̂⁻¹ satv_l(σ̂ + Kξ̂)`.
pub fn output_feedback_control(cfg: &ControllerConfig, sigma_hat: &[f64], xi_hat: &[f64]) -> Vec<f64> {
    let m = cfg.m();
    let (mut arg, mut w, mut u) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    output_feedback_into(cfg, sigma_hat, xi_hat, &mut arg, &mut w, &mut u);
    u
}

/// Allocation-free form of [`output_feedback_control`]; `arg` receives the
/// saturation argument `σ̂ + Kξ̂` and `w` the value of `B̂u`.
pub fn output_feedback_into(
    cfg: &ControllerConfig,
    sigma_hat: &[f64],
    xi_hat: &[f64],
    arg: &mut [f64],
    w: &mut [f64],
    u: &mut [f64],
) {
    cfg.k_xi_into(xi_hat, arg);
    for (a, s) in arg.iter_mut().zip(sigma_hat) {
        *a += s;
    }
    for (wk, a) in w.iter_mut().zip(arg.iter()) {
        *wk = -sat_scalar(*a, cfg.sat_level, cfg.eps0);
    }
    cfg.mul_bhat_into(true, w, u);
}

/// `Δ_b(x) = (b(x) − B̂)B̂⁻¹`.
pub fn delta_b(plant: &PlantModel, cfg: &ControllerConfig, x0: &[f64], xi: &[f64]) -> Result<DMatrix<f64>, ControlError> {
    Ok((plant.b(x0, xi)? - cfg.bhat()) * cfg.bhat_inv())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSolution {
    pub u: Vec<f64>,
    pub iterations: usize,
    /// `|ψ(u)|` at the returned point.
    pub residual: f64,
    /// `|w_{n+1} − w_n|` per iteration.
    pub gaps: Vec<f64>,
}

pub const IMPLICIT_MAX_ITER: usize = 200;

/// Solves `B̂u = −satv_l(a + Δ_b B̂u + Kξ − σ̃ − e)` for `u`, where
/// `e = K(Λ_ℓ⁻¹ ⊗ C₂)η̃` is passed in as `eta_weighted`.
pub fn solve_implicit_control(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    x: &PlantState,
    sigma_tilde: &[f64],
    eta_weighted: &[f64],
) -> Result<ImplicitSolution, ControlError> {
    let m = cfg.m();
    let xi = x.xi_flat();
    let a = plant.a(&x.x0, &xi)?;
    let kx = cfg.k_xi(&xi);
    let c: Vec<f64> = (0..m).map(|k| a[k] + kx[k] - sigma_tilde[k] - eta_weighted[k]).collect();
    let db = delta_b(plant, cfg, &x.x0, &xi)?;
    let (l, e0) = (cfg.sat_level, cfg.eps0);
    let map = |w: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|k| -sat_scalar(c[k] + (0..m).map(|j| db[(k, j)] * w[j]).sum::<f64>(), l, e0))
            .collect()
    };
    let mut w = vec![0.0; m];
    let mut gaps = Vec::new();
    for it in 1..=IMPLICIT_MAX_ITER {
        let next = map(&w);
        let gap = next.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        w = next;
        gaps.push(gap);
        let scale = 1.0 + w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gap <= 1e-15 * scale {
            let image = map(&w);
            let residual = image.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let mut u = vec![0.0; m];
            cfg.mul_bhat_into(true, &w, &mut u);
            return Ok(ImplicitSolution { u, iterations: it, residual, gaps });
        }
    }
    Err(ControlError::NonConvergence {
        iterations: IMPLICIT_MAX_ITER,
        gap: gaps.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuCertificate {
    /// Inflated bound used downstream.
    pub mu0: f64,
    /// Largest sampled `‖Δ_b(x)‖₂`.
    pub sampled_max: f64,
    pub safety_factor: f64,
    pub region: RegionSummary,
    pub sample_count: usize,
    pub worst_sample: Vec<f64>,
}

pub const DEFAULT_SAFETY_FACTOR: f64 = 1.05;

/// Samples `‖(b(x) − B̂)B̂⁻¹‖₂` over `region` (flat states `col(x₀, ξ)`).
pub fn estimate_mu0(
    plant: &PlantModel,
    bhat: &DMatrix<f64>,
    region: &Region,
    samples: usize,
    safety_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MuCertificate, ControlError> {
    if samples == 0 {
        return Err(ControlError::InvalidConfig("need at least one sample".into()));
    }
    let ix = plant.indices();
    if region.dim() != ix.n() {
        return Err(ControlError::InvalidConfig(format!(
            "region dimension {} differs from state dimension {}",
            region.dim(),
            ix.n()
        )));
    }
    let bhat_inv = bhat
        .clone()
        .try_inverse()
        .ok_or_else(|| ControlError::InvalidConfig("Bhat is singular".into()))?;
    let mut worst = (f64::NEG_INFINITY, Vec::new());
    for _ in 0..samples {
        let x = region.sample(rng);
        let (x0, xi) = x.split_at(ix.n0());
        let v = norm2(&((plant.b(x0, xi)? - bhat) * &bhat_inv));
        if v > worst.0 {
            worst = (v, x);
        }
    }
    let mu0 = worst.0 * safety_factor;
    if !(mu0 < 1.0) {
        return Err(ControlError::MismatchTooLarge(mu0));
    }
    Ok(MuCertificate {
        mu0,
        sampled_max: worst.0,
        safety_factor,
        region: region.summary(),
        sample_count: samples,
        worst_sample: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{paper_example_2x2, LinearChains};
    use crate::region::{paper_example_lyapunov, seeded_rng};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn paper_cfg() -> ControllerConfig {
        ControllerConfig::new(
            DMatrix::identity(2, 2),
            vec![vec![0.25, 1.0], vec![0.125, 0.75, 1.5]],
            25.0,
            0.5,
        )
        .unwrap()
    }

    fn state(x0: [f64; 2], xi1: [f64; 2], xi2: [f64; 3]) -> PlantState {
        PlantState { x0: x0.to_vec(), xi: vec![xi1.to_vec(), xi2.to_vec()] }
    }

    #[test]
    fn saturation_limits_and_identity() {
        assert_eq!(satv(&[1.0, -24.9], 25.0, 0.5), vec![1.0, -24.9]);
        let big = sat_scalar(1e6, 25.0, 0.5);
        assert_relative_eq!(big, 25.5, epsilon = 1e-12);
        assert_relative_eq!(sat_scalar(-1e6, 25.0, 0.5), -25.5, epsilon = 1e-12);
        assert_relative_eq!(sat_scalar(30.0, 25.0, 0.5), 25.0 + 0.5 * 10f64.tanh(), epsilon = 1e-14);
    }

    #[test]
    fn saturation_slope_continuous_at_level() {
        let (l, e) = (25.0, 0.5);
        for s in [l - 1e-6, l + 1e-6, -l - 1e-6, -l + 1e-6] {
            let h = 1e-7;
            let fd = (sat_scalar(s + h, l, e) - sat_scalar(s - h, l, e)) / (2.0 * h);
            assert!((fd - 1.0).abs() < 1e-6, "slope {fd} at {s}");
        }
    }

    #[test]
    fn config_rejects_unstable_k() {
        let err = ControllerConfig::new(DMatrix::identity(1, 1), vec![vec![-1.0, 1.0]], 1.0, 0.5);
        assert!(matches!(err, Err(ControlError::NotHurwitz { channel: 1, .. })));
        let err = ControllerConfig::new(DMatrix::zeros(1, 1), vec![vec![1.0, 2.0]], 1.0, 0.5);
        assert!(matches!(err, Err(ControlError::InvalidConfig(_))));
    }

    #[test]
    fn ideal_control_of_example() {
        let plant = paper_example_2x2();
        let cfg = paper_cfg();
        assert_eq!(ideal_control(&plant, &cfg, &PlantState::zeros(plant.indices())).unwrap(), vec![0.0, 0.0]);
        let x = state([0.3, -0.2], [0.1, 0.7], [0.4, -0.5, 0.2]);
        let u = ideal_control(&plant, &cfg, &x).unwrap();
        let s = 0.7f64.sin() / 3.0;
        let v1 = 0.3 * 0.4 + 0.25 * 0.1 + 0.7;
        let v2 = -0.2 + 0.125 * 0.4 - 0.75 * 0.5 + 1.5 * 0.2;
        assert_relative_eq!(u[0], -(v1 - s * v2), epsilon = 1e-14);
        assert_relative_eq!(u[1], -v2, epsilon = 1e-14);
    }

    #[test]
    fn ideal_control_identity_gain() {
        let plant = LinearChains::plant(0, vec![2]);
        let cfg = ControllerConfig::new(DMatrix::identity(1, 1), vec![vec![0.25, 1.0]], 5.0, 0.5).unwrap();
        let x = PlantState { x0: vec![], xi: vec![vec![2.0, -1.0]] };
        assert_eq!(ideal_control(&plant, &cfg, &x).unwrap(), vec![0.5]);
    }

    #[test]
    fn sigma_examples() {
        let plant = paper_example_2x2();
        let cfg = paper_cfg();
        let zero = PlantState::zeros(plant.indices());
        assert_eq!(perturbation_sigma(&plant, &cfg, &zero, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let x = state([0.5, 0.2], [0.0, FRAC_PI_2], [0.3, 0.0, 0.0]);
        let s = perturbation_sigma(&plant, &cfg, &x, &[0.0, 3.0]).unwrap();
        assert_relative_eq!(s[0], 0.5 * 0.3 + 1.0, epsilon = 1e-14);
        assert_relative_eq!(s[1], 0.2, epsilon = 1e-14);

        let lin = LinearChains::plant(0, vec![2]);
        let cfg1 = ControllerConfig::new(DMatrix::identity(1, 1), vec![vec![0.25, 1.0]], 5.0, 0.5).unwrap();
        let x = PlantState { x0: vec![], xi: vec![vec![1.0, 2.0]] };
        assert_eq!(perturbation_sigma(&lin, &cfg1, &x, &[7.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn output_feedback_examples() {
        let cfg = paper_cfg();
        assert_eq!(output_feedback_control(&cfg, &[0.0, 0.0], &[0.0; 5]), vec![0.0, 0.0]);
        let u = output_feedback_control(&cfg, &[30.0, 0.0], &[0.0; 5]);
        assert_relative_eq!(u[0], -(25.0 + 0.5 * 10f64.tanh()), epsilon = 1e-14);
        assert_eq!(u[1], 0.0);
        let u = output_feedback_control(&cfg, &[1.0, -2.0], &[1.0, 2.0, 0.0, 0.0, 4.0]);
        assert_relative_eq!(u[0], -(1.0 + 0.25 + 2.0), epsilon = 1e-14);
        assert_relative_eq!(u[1], -(-2.0 + 6.0), epsilon = 1e-14);
    }

    #[test]
    fn implicit_solution_matches_ideal_law() {
        let plant = paper_example_2x2();
        let cfg = paper_cfg();
        let x = state([0.3, -0.2], [0.1, 0.7], [0.4, -0.5, 0.2]);
        let sol = solve_implicit_control(&plant, &cfg, &x, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let u = ideal_control(&plant, &cfg, &x).unwrap();
        assert!(sol.residual < 1e-10);
        for (a, b) in sol.u.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in sol.gaps.windows(2).filter(|w| w[0] > 1e-12) {
            assert!(w[1] <= (1.0 / 3.0 + 1e-9) * w[0]);
        }
    }

    #[test]
    fn implicit_solution_exact_gain_is_one_step() {
        let plant = LinearChains::plant(1, vec![2, 2]);
        let cfg = ControllerConfig::new(DMatrix::identity(2, 2), vec![vec![0.25, 1.0]; 2], 5.0, 0.5).unwrap();
        let x = PlantState { x0: vec![0.1], xi: vec![vec![10.0, 2.0], vec![1.0, -1.0]] };
        let sol = solve_implicit_control(&plant, &cfg, &x, &[0.5, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(sol.gaps[1], 0.0);
        assert_relative_eq!(sol.u[0], -sat_scalar(4.5 - 0.5, 5.0, 0.5), epsilon = 1e-15);
        assert_relative_eq!(sol.u[1], -(-0.75 - 1.0), epsilon = 1e-15);
    }

    #[test]
    fn mu0_of_example_is_one_third() {
        let plant = paper_example_2x2();
        let mut lo = vec![-1.0; 7];
        let mut hi = vec![1.0; 7];
        lo[3] = FRAC_PI_2;
        hi[3] = FRAC_PI_2;
        let region = Region::Box { lo, hi };
        let cert = estimate_mu0(&plant, &DMatrix::identity(2, 2), &region, 50, 1.0, &mut seeded_rng(0)).unwrap();
        assert_relative_eq!(cert.sampled_max, 1.0 / 3.0, epsilon = 1e-12);

        let ellipsoid = Region::Sublevel { form: paper_example_lyapunov(), level: 3.0 };
        let cert = estimate_mu0(&plant, &DMatrix::identity(2, 2), &ellipsoid, 500, 1.05, &mut seeded_rng(0)).unwrap();
        assert!(cert.sampled_max < 1.0 / 3.0);
        assert_relative_eq!(cert.mu0, cert.sampled_max * 1.05);
    }

    #[test]
    fn mu0_rejects_doubled_gain() {
        let mut lin = LinearChains::new(0, &[2]);
        lin.b = DMatrix::from_element(1, 1, 2.0);
        let plant = lin.build(0, vec![2]).unwrap();
        let region = Region::Box { lo: vec![-1.0; 2], hi: vec![1.0; 2] };
        let exact = LinearChains::plant(0, vec![2]);
        let ok = estimate_mu0(&exact, &DMatrix::identity(1, 1), &region, 10, 1.05, &mut seeded_rng(0)).unwrap();
        assert_eq!(ok.sampled_max, 0.0);
        let err = estimate_mu0(&plant, &DMatrix::identity(1, 1), &region, 10, 1.05, &mut seeded_rng(0));
        assert!(matches!(err, Err(ControlError::MismatchTooLarge(_))));
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(s in -60.0f64..60.0, l in 0.5f64..30.0, e in 0.05f64..0.95) {
            let h = 1e-6;
            prop_assume!(((s.abs() - l).abs()) > 2.0 * h);
            let fd = (sat_scalar(s + h, l, e) - sat_scalar(s - h, l, e)) / (2.0 * h);
            let jac = satv_jacobian(&[s], l, e)[(0, 0)];
            prop_assert!((fd - jac).abs() < 1e-6);
            prop_assert!(jac <= 1.0);
            // sech² underflows to zero only past argument ~355.
            prop_assert!(jac > 0.0 || (s.abs() - l) / e > 350.0);
            if s.abs() > l + 1e-3 {
                prop_assert!(jac < 1.0);
            }
        }

        #[test]
        fn output_norm_bounded(a in -1e4f64..1e4, b in -1e4f64..1e4, c in -1e4f64..1e4) {
            let cfg = paper_cfg();
            let u = output_feedback_control(&cfg, &[a, b], &[c, 0.0, -c, 1.0, 2.0]);
            let n = (u[0] * u[0] + u[1] * u[1]).sqrt();
            prop_assert!(n <= cfg.control_bound() + 1e-12);
        }
    }
}
