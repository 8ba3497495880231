use serde::{Deserialize, Serialize};

use super::linear::{cascade_exponents, gain_cascade};
use super::DesignError;

/// Constants entering the `Ψᵢ` polynomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInput {
    pub lambda: Vec<f64>,
    /// `|Pⱼ|₂` per channel.
    pub p_norm: Vec<f64>,
    /// `iota[j][i]` for `i < j`.
    pub iota: Vec<Vec<f64>>,
    pub rho0: f64,
    pub r: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub g: Vec<f64>,
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_star: f64,
}

/// Doubling the seed more often than this means the cascade is infeasible.
const MAX_DOUBLINGS: usize = 1000;

impl ThresholdInput {
    fn check(&self) -> Result<(), DesignError> {
        let m = self.r.len();
        if m == 0 || self.lambda.len() != m || self.p_norm.len() != m || self.iota.len() != m {
            return Err(DesignError::Invalid("threshold inputs have inconsistent lengths".into()));
        }
        if self.lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(DesignError::Invalid("every lambda must be positive".into()));
        }
        if !(self.rho0 >= 0.0) {
            return Err(DesignError::Invalid("rho0 must be nonnegative".into()));
        }
        if self.r.windows(2).any(|w| w[0] > w[1]) {
            return Err(DesignError::Invalid("orders must be nondecreasing".into()));
        }
        if self.iota.iter().enumerate().any(|(j, row)| row.len() != j) {
            return Err(DesignError::Invalid("iota must be strictly lower triangular".into()));
        }
        Ok(())
    }

    /// Coefficient `2(j−1)|Pⱼ|²ι²ⱼᵢ/λⱼ` with `j` 1-based.
    fn coupling(&self, j: usize, i: usize) -> f64 {
        2.0 * j as f64 * self.p_norm[j].powi(2) * self.iota[j][i].powi(2) / self.lambda[j]
    }

    fn diag_weight(&self, i: usize) -> f64 {
        if i + 1 == self.r.len() {
            self.lambda[i] / 2.0
        } else {
            self.lambda[i] / 4.0
        }
    }
}

/// `μᵢ = ωᵢᵢ − Σⱼ ωᵢⱼ − ωᵢ₀` given `c` with `ℓⱼ = cⱼ κ^{eⱼ}`.
fn mu_i(inp: &ThresholdInput, i: usize, c: &[f64]) -> f64 {
    let r = &inp.r;
    let coupling: f64 = (i + 1..r.len())
        .map(|j| inp.coupling(j, i) * c[j].powi(2 * (r[j] - r[i] + 1) as i32))
        .sum();
    inp.diag_weight(i) * c[i] * c[i] - coupling - c[i]
}

pub fn cascade_thresholds(inp: &ThresholdInput) -> Result<Thresholds, DesignError> {
    inp.check()?;
    let (m, r) = (inp.r.len(), &inp.r);
    let e = cascade_exponents(r);
    let mut g = vec![0.0; m];
    let mut c = vec![0.0f64; m];
    let mut mu = vec![0.0; m];
    let mut theta = vec![0.0; m];
    for i in (0..m).rev() {
        let lift = if i + 1 == m { 1.0 } else { c[i + 1].powi((r[i + 1] - r[i] + 1) as i32) };
        let mut gi = if i + 1 == m { 2.0 / inp.lambda[i] + 1.0 } else { 1.0 };
        let mut tries = 0;
        loop {
            c[i] = gi * lift;
            if !c[i].is_finite() || tries > MAX_DOUBLINGS {
                return Err(DesignError::Overflow(format!(
                    "g_{} search left double range (lift {lift:e}, last g {gi:e})",
                    i + 1
                )));
            }
            mu[i] = mu_i(inp, i, &c);
            if mu[i] > 0.0 && mu[i].is_finite() {
                break;
            }
            gi *= 2.0;
            tries += 1;
        }
        g[i] = gi;
        theta[i] = (inp.rho0 / mu[i]).powf(1.0 / (2 * e[i]) as f64).max(1.0);
    }
    let theta_star = theta.iter().copied().fold(1.0, f64::max);
    Ok(Thresholds { g, mu, theta, theta_star })
}

/// `Ψᵢ(κ)` evaluated from the cascade gains, with the magnitude of its
/// largest term for scale.
pub fn psi(inp: &ThresholdInput, g: &[f64], kappa: f64) -> Result<Vec<(f64, f64)>, DesignError> {
    inp.check()?;
    let ell = gain_cascade(g, kappa, &inp.r)?;
    let r = &inp.r;
    Ok((0..r.len())
        .map(|i| {
            let lead = inp.diag_weight(i) * ell[i] * ell[i];
            let coupling: f64 = (i + 1..r.len())
                .map(|j| inp.coupling(j, i) * ell[j].powi(2 * (r[j] - r[i] + 1) as i32))
                .sum();
            let drift = kappa * ell[i];
            let scale = lead.max(coupling).max(drift).max(inp.rho0).max(f64::MIN_POSITIVE);
            (lead - coupling - inp.rho0 - drift, scale)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiCheck {
    pub kappa_samples: usize,
    /// Smallest `Ψᵢ(κ)/scale` over channels and samples.
    pub min_normalized: f64,
    pub worst_kappa: f64,
}

pub const PSI_TOLERANCE: f64 = 1e-9;

/// Evaluates every `Ψᵢ` at `samples` evenly spaced `κ ∈ [θ*, 10θ*]`.
pub fn verify_psi(inp: &ThresholdInput, th: &Thresholds, samples: usize) -> Result<PsiCheck, DesignError> {
    let n = samples.max(2);
    let mut worst = (f64::INFINITY, th.theta_star);
    for s in 0..n {
        let kappa = th.theta_star * (1.0 + 9.0 * s as f64 / (n - 1) as f64);
        for (v, scale) in psi(inp, &th.g, kappa)? {
            if v / scale < worst.0 {
                worst = (v / scale, kappa);
            }
        }
    }
    Ok(PsiCheck { kappa_samples: n, min_normalized: worst.0, worst_kappa: worst.1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_channel(rho0: f64) -> ThresholdInput {
        ThresholdInput {
            lambda: vec![1.0, 1.0],
            p_norm: vec![1.0, 1.0],
            iota: vec![vec![], vec![1.0]],
            rho0,
            r: vec![2, 3],
        }
    }

    #[test]
    fn single_channel_closed_form() {
        let inp = ThresholdInput { lambda: vec![0.4], p_norm: vec![3.0], iota: vec![vec![]], rho0: 50.0, r: vec![2] };
        let th = cascade_thresholds(&inp).unwrap();
        let g = 2.0 / 0.4 + 1.0;
        let mu = 0.4 * g * g / 2.0 - g;
        assert_eq!(th.g, vec![g]);
        assert_eq!(th.mu, vec![mu]);
        assert_eq!(th.theta_star, (50.0 / mu).sqrt().max(1.0));
    }

    #[test]
    fn zero_rho_gives_unit_threshold() {
        let th = cascade_thresholds(&two_channel(0.0)).unwrap();
        assert_eq!(th.theta, vec![1.0, 1.0]);
        assert_eq!(th.theta_star, 1.0);
    }

    #[test]
    fn two_channel_example_is_verified() {
        let inp = two_channel(1.0);
        let th = cascade_thresholds(&inp).unwrap();
        assert!(th.mu.iter().all(|m| *m > 0.0));
        assert_relative_eq!(th.g[1], 3.0);
        let check = verify_psi(&inp, &th, 100).unwrap();
        assert!(check.min_normalized >= -PSI_TOLERANCE, "{check:?}");
    }

    #[test]
    fn lower_bound_polynomial_holds() {
        // Ψᵢ(κ) ≥ μᵢκ^{2eᵢ} − ϱ₀ for κ ≥ 1.
        let inp = ThresholdInput {
            lambda: vec![0.3, 0.5, 0.2],
            p_norm: vec![2.0, 4.0, 1.5],
            iota: vec![vec![], vec![1.2], vec![0.5, 2.0]],
            rho0: 7.0,
            r: vec![2, 2, 3],
        };
        let th = cascade_thresholds(&inp).unwrap();
        let e = cascade_exponents(&inp.r);
        for kappa in [1.0, 1.5, 3.0, 10.0] {
            for (i, (v, scale)) in psi(&inp, &th.g, kappa).unwrap().into_iter().enumerate() {
                let bound = th.mu[i] * kappa.powi(2 * e[i] as i32) - inp.rho0;
                assert!(v >= bound - 1e-9 * scale, "i = {i}, kappa = {kappa}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut inp = two_channel(1.0);
        inp.r = vec![3, 2];
        assert!(cascade_thresholds(&inp).is_err());
        let mut inp = two_channel(1.0);
        inp.lambda[0] = 0.0;
        assert!(cascade_thresholds(&inp).is_err());
    }

    #[test]
    fn infeasible_cascade_reports_overflow() {
        let inp = ThresholdInput {
            lambda: vec![1e-3; 4],
            p_norm: vec![1e3; 4],
            iota: vec![vec![], vec![1e3], vec![1e3; 2], vec![1e3; 3]],
            rho0: 1.0,
            r: vec![2, 10, 20, 40],
        };
        assert!(matches!(cascade_thresholds(&inp), Err(DesignError::Overflow(_))));
    }

    proptest! {
        #[test]
        fn psi_nonnegative_beyond_threshold(
            lambda in proptest::collection::vec(0.05f64..2.0, 3),
            p in proptest::collection::vec(0.5f64..5.0, 3),
            iota in proptest::collection::vec(0.0f64..2.0, 3),
            rho0 in 0.0f64..1e4,
            d in proptest::collection::vec(0usize..2, 2),
        ) {
            let r = vec![2, 2 + d[0], 2 + d[0] + d[1]];
            let inp = ThresholdInput {
                lambda,
                p_norm: p,
                iota: vec![vec![], vec![iota[0]], vec![iota[1], iota[2]]],
                rho0,
                r,
            };
            let th = cascade_thresholds(&inp).unwrap();
            let check = verify_psi(&inp, &th, 100).unwrap();
            prop_assert!(check.min_normalized >= -PSI_TOLERANCE, "{:?}", check);
        }
    }
}
