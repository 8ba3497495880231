use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::bounded_real::{channel_certificate, chi_transform, verify_combined, verify_dissipation, CombinedEvidence, FrequencyPeak};
use super::bounds::{auxiliary_bounds, saturation_level, AuxiliaryBounds, SamplingOptions, SaturationLevel};
use super::linear::{build_f, gain_cascade, is_spd};
use super::thresholds::{cascade_thresholds, verify_psi, PsiCheck, ThresholdInput, PSI_TOLERANCE};
use super::DesignError;
use crate::control_law::{estimate_mu0, ControlError, ControllerConfig, MuCertificate, DEFAULT_SAFETY_FACTOR};
use crate::matrices::{blkdiag, max_real_eigenvalue, norm2, sym_eig_range};
use crate::normal_form::PlantModel;
use crate::region::{seeded_rng, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub seed: u64,
    pub mu0_samples: usize,
    /// Use this `μ₀` instead of the sampled estimate (the estimate is still recorded).
    pub mu0_override: Option<f64>,
    pub saturation_samples: usize,
    pub sweep_points: usize,
    pub dissipation_samples: usize,
    pub eta_samples: usize,
    pub delta_draws: usize,
    pub psi_samples: usize,
    pub aux: SamplingOptions,
    /// Requested `κ`; raised to `θ*` when smaller.
    pub kappa: Option<f64>,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mu0_samples: 5000,
            mu0_override: None,
            saturation_samples: 5000,
            sweep_points: 10_000,
            dissipation_samples: 10_000,
            eta_samples: 10_000,
            delta_draws: 20,
            psi_samples: 100,
            aux: SamplingOptions::default(),
            kappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEvidence {
    pub hurwitz_margin: f64,
    pub det_t: f64,
    pub peak: FrequencyPeak,
    pub lambda_bar: f64,
    pub riccati_epsilon: f64,
    pub riccati_iterations: usize,
    /// Conservative norm test value; negative means it certifies on its own.
    pub norm_test: f64,
    pub dissipation_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateEvidence {
    pub mu0: MuCertificate,
    pub saturation: SaturationLevel,
    pub channels: Vec<ChannelEvidence>,
    pub combined: CombinedEvidence,
    pub auxiliary: AuxiliaryBounds,
    pub psi: PsiCheck,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    /// Row-major `Pᵢ`.
    pub p_blocks: Vec<Vec<Vec<f64>>>,
    pub lambda: Vec<f64>,
    pub mu0: f64,
    pub sat_level: f64,
    /// `iota[k][j]` for `j < k`.
    pub iota: Vec<Vec<f64>>,
    pub delta1: f64,
    pub delta2: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub g: Vec<f64>,
    pub theta_star: f64,
    pub kappa: f64,
    pub ell: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub r: Vec<usize>,
    pub evidence: CertificateEvidence,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, DesignError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(DesignError::Certificate("P block is not square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// `ϱ₀ = 8|P|²μ₀²|K|²δ₂²/λ_min` and `ϱ₁ = 8δ₁²|P|²/λ_min`.
pub fn rho_constants(p_norm: f64, k_norm: f64, mu0: f64, delta1: f64, delta2: f64, lambda_min: f64) -> (f64, f64) {
    let rho0 = 8.0 * p_norm.powi(2) * mu0.powi(2) * k_norm.powi(2) * delta2.powi(2) / lambda_min;
    let rho1 = 8.0 * delta1.powi(2) * p_norm.powi(2) / lambda_min;
    (rho0, rho1)
}

/// Runs the full design: `μ₀`, saturation level, per-channel storage
/// functions, auxiliary bounds, `ϱ` constants and the gain cascade.
/// `region` samples the enlarged sublevel set of the full state.
pub fn design_certificate(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    gamma: &[Vec<(f64, f64)>],
    region: &Region,
    opts: &DesignOptions,
) -> Result<GainCertificate, DesignError> {
    let ix = plant.indices();
    if gamma.len() != ix.m() || gamma.iter().zip(ix.r()).any(|(g, &r)| g.len() != r) {
        return Err(DesignError::Invalid("observer gains do not match the chain orders".into()));
    }
    let mut rng = seeded_rng(opts.seed);
    let nominal = plant.without_disturbances();

    let mu_cert = estimate_mu0(&nominal, cfg.bhat(), region, opts.mu0_samples, DEFAULT_SAFETY_FACTOR, &mut rng)?;
    let mu0 = opts.mu0_override.unwrap_or(mu_cert.mu0);
    if !(mu0 < 1.0) || mu_cert.sampled_max >= 1.0 {
        return Err(ControlError::MismatchTooLarge(mu0.max(mu_cert.sampled_max)).into());
    }
    if mu_cert.sampled_max > mu0 {
        return Err(DesignError::Certificate(format!(
            "sampled mismatch {:.6} exceeds the configured mu0 = {mu0:.6}",
            mu_cert.sampled_max
        )));
    }

    let saturation = saturation_level(&nominal, cfg, region, mu0, opts.saturation_samples, &mut rng)?;
    if cfg.sat_level() <= saturation.sup_norm / (1.0 - mu0) {
        return Err(DesignError::Certificate(format!(
            "saturation level {} does not exceed the sampled requirement {:.6}",
            cfg.sat_level(),
            saturation.sup_norm / (1.0 - mu0)
        )));
    }

    let mut certs = Vec::with_capacity(ix.m());
    let mut channels = Vec::with_capacity(ix.m());
    for g in gamma {
        let f = build_f(g);
        let tr = chi_transform(g)?;
        let cert = channel_certificate(&tr, mu0, opts.sweep_points)?;
        let dissipation_max = verify_dissipation(&tr, &cert, mu0, opts.dissipation_samples, &mut rng);
        if dissipation_max > 1e-10 {
            return Err(DesignError::BoundedReal(format!("sampled dissipation inequality violated ({dissipation_max:e})")));
        }
        channels.push(ChannelEvidence {
            hurwitz_margin: -max_real_eigenvalue(&f),
            det_t: tr.t.determinant(),
            peak: cert.peak,
            lambda_bar: cert.lambda_bar,
            riccati_epsilon: cert.epsilon,
            riccati_iterations: cert.riccati_iterations,
            norm_test: cert.norm_test,
            dissipation_max,
        });
        certs.push(cert);
    }
    let combined = verify_combined(gamma, &certs, mu0, opts.eta_samples, opts.delta_draws, &mut rng);
    if combined.max_sampled_ratio > 0.0 {
        return Err(DesignError::Certificate(format!(
            "combined quadratic inequality violated on a sample (ratio {:e})",
            combined.max_sampled_ratio
        )));
    }

    let auxiliary = auxiliary_bounds(&nominal, cfg, gamma, region, &opts.aux, &mut rng)?;
    let lambda: Vec<f64> = certs.iter().map(|c| c.lambda).collect();
    let lambda_min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let p_full = blkdiag(&certs.iter().map(|c| c.p.clone()).collect::<Vec<_>>());
    let (rho0, rho1) = rho_constants(
        norm2(&p_full),
        norm2(&cfg.k_matrix()),
        mu0,
        auxiliary.delta1,
        auxiliary.delta2,
        lambda_min,
    );

    let input = ThresholdInput {
        lambda: lambda.clone(),
        p_norm: certs.iter().map(|c| norm2(&c.p)).collect(),
        iota: auxiliary.iota.clone(),
        rho0,
        r: ix.r().to_vec(),
    };
    let th = cascade_thresholds(&input)?;
    let kappa = opts.kappa.unwrap_or(th.theta_star).max(th.theta_star);
    let ell = gain_cascade(&th.g, kappa, ix.r())?;
    let psi = verify_psi(&input, &th, opts.psi_samples)?;
    if psi.min_normalized < -PSI_TOLERANCE {
        return Err(DesignError::Certificate(format!("cascade inequality fails at kappa = {:e}", psi.worst_kappa)));
    }
    let (alpha1, alpha2) = sym_eig_range(&p_full);

    let cert = GainCertificate {
        p_blocks: certs.iter().map(|c| rows(&c.p)).collect(),
        lambda,
        mu0,
        sat_level: cfg.sat_level(),
        iota: auxiliary.iota.clone(),
        delta1: auxiliary.delta1,
        delta2: auxiliary.delta2,
        rho0,
        rho1,
        g: th.g,
        theta_star: th.theta_star,
        kappa,
        ell,
        alpha1,
        alpha2,
        r: ix.r().to_vec(),
        evidence: CertificateEvidence {
            mu0: mu_cert,
            saturation,
            channels,
            combined,
            auxiliary,
            psi,
            seed: opts.seed,
        },
    };
    cert.verify()?;
    Ok(cert)
}

impl GainCertificate {
    pub fn p_matrices(&self) -> Result<Vec<DMatrix<f64>>, DesignError> {
        self.p_blocks.iter().map(|b| from_rows(b)).collect()
    }

    fn threshold_input(&self, p: &[DMatrix<f64>]) -> ThresholdInput {
        ThresholdInput {
            lambda: self.lambda.clone(),
            p_norm: p.iter().map(norm2).collect(),
            iota: self.iota.clone(),
            rho0: self.rho0,
            r: self.r.clone(),
        }
    }

    /// Re-checks the stored invariants: SPD blocks, positive margins, the
    /// cascade at the stored `κ`, and `Ψᵢ(κ) ≥ 0`.
    pub fn verify(&self) -> Result<(), DesignError> {
        let m = self.r.len();
        let p = self.p_matrices()?;
        if p.len() != m || self.lambda.len() != m || self.g.len() != m || self.ell.len() != m {
            return Err(DesignError::Certificate("per-channel lists have inconsistent lengths".into()));
        }
        if let Some(i) = p.iter().position(|b| !is_spd(b)) {
            return Err(DesignError::Certificate(format!("P_{} is not symmetric positive definite", i + 1)));
        }
        if self.lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(DesignError::Certificate("a decay margin lambda is not positive".into()));
        }
        if !(0.0..1.0).contains(&self.mu0) {
            return Err(DesignError::Certificate(format!("mu0 = {} outside [0, 1)", self.mu0)));
        }
        if self.ell.iter().any(|l| !(*l >= 1.0)) {
            return Err(DesignError::Certificate("observer gains must be at least 1".into()));
        }
        if !(self.kappa >= self.theta_star) {
            return Err(DesignError::Certificate(format!(
                "kappa = {} is below the threshold {}",
                self.kappa, self.theta_star
            )));
        }
        let ell = gain_cascade(&self.g, self.kappa, &self.r)?;
        if ell.iter().zip(&self.ell).any(|(a, b)| (a - b).abs() > 1e-9 * a.abs()) {
            return Err(DesignError::Certificate("stored gains do not follow the cascade".into()));
        }
        let input = self.threshold_input(&p);
        for (i, (v, scale)) in super::thresholds::psi(&input, &self.g, self.kappa)?.into_iter().enumerate() {
            if v / scale < -PSI_TOLERANCE {
                return Err(DesignError::Certificate(format!("Psi_{} is negative at the stored kappa", i + 1)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    /// Parses and re-verifies a stored certificate.
    pub fn from_json(text: &str) -> Result<Self, DesignError> {
        let cert: Self = serde_json::from_str(text).map_err(|e| DesignError::Certificate(format!("unreadable certificate: {e}")))?;
        cert.verify()?;
        Ok(cert)
    }
}
