use nalgebra::DMatrix;

use super::DesignError;
use crate::matrices::{d2, kron, max_real_eigenvalue, poly_from_real_roots, prime_a, prime_b, prime_c, sym_eig_range};

/// `Kₖ` placing the eigenvalues of `A_r − B_r Kₖ` at the given real poles.
pub fn design_k(r: usize, poles: &[f64]) -> Result<Vec<f64>, DesignError> {
    if poles.len() != r || r == 0 {
        return Err(DesignError::Invalid(format!("{} poles requested for order {r}", poles.len())));
    }
    if let Some(p) = poles.iter().find(|p| !(**p < 0.0)) {
        return Err(DesignError::Invalid(format!("pole {p} is not in the open left half-plane")));
    }
    let mut c = poly_from_real_roots(poles);
    c.pop();
    Ok(c)
}

pub const HURWITZ_MARGIN: f64 = 1e-9;

pub fn is_hurwitz(m: &DMatrix<f64>, margin: f64) -> bool {
    max_real_eigenvalue(m) < -margin
}

/// Block-tridiagonal `Fₖ`: diagonal `A₂ − Γᵢ C₂`, superdiagonal `D₂`,
/// subdiagonal `Γᵢ B₂ᵀ`.
pub fn build_f(gamma: &[(f64, f64)]) -> DMatrix<f64> {
    let r = gamma.len();
    let mut f = DMatrix::zeros(2 * r, 2 * r);
    let (a2, b2t, c2, dd) = (prime_a(2), prime_b(2).transpose(), prime_c(2), d2());
    for (i, &(g1, g2)) in gamma.iter().enumerate() {
        let g = DMatrix::from_column_slice(2, 1, &[g1, g2]);
        f.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&(&a2 - &g * &c2));
        if i + 1 < r {
            f.view_mut((2 * i, 2 * i + 2), (2, 2)).copy_from(&dd);
        }
        if i > 0 {
            f.view_mut((2 * i, 2 * i - 2), (2, 2)).copy_from(&(&g * &b2t));
        }
    }
    f
}

/// Unique `P` with `PF + FᵀP = −Q`, via the Kronecker-vectorized system.
pub fn lyapunov_solve(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, DesignError> {
    let n = f.nrows();
    if !f.is_square() || q.shape() != (n, n) {
        return Err(DesignError::Invalid("lyapunov_solve needs square F and Q of equal size".into()));
    }
    if !is_hurwitz(f, 0.0) {
        return Err(DesignError::NotHurwitz(max_real_eigenvalue(f)));
    }
    let eye = DMatrix::identity(n, n);
    let ft = f.transpose();
    let op = kron(&eye, &ft) + kron(&ft, &eye);
    let rhs = nalgebra::DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = op.lu().solve(&rhs).ok_or(DesignError::NotHurwitz(max_real_eigenvalue(f)))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    let residual = (&p * f + f.transpose() * &p + q).norm();
    if !(residual <= 1e-9 * q.norm().max(1e-300)) {
        return Err(DesignError::Numerical(format!("Lyapunov residual {residual:e}")));
    }
    Ok(p)
}

/// `ℓ_m = g_m κ`, `ℓᵢ = gᵢ ℓᵢ₊₁^{rᵢ₊₁ − rᵢ + 1}`, computed in logs.
pub fn gain_cascade(g: &[f64], kappa: f64, r: &[usize]) -> Result<Vec<f64>, DesignError> {
    let m = g.len();
    if m == 0 || r.len() != m {
        return Err(DesignError::Invalid(format!("{} gains for {} channels", g.len(), r.len())));
    }
    if g.iter().any(|v| !(*v > 0.0)) || !(kappa >= 1.0) {
        return Err(DesignError::Invalid("cascade needs g > 0 and kappa >= 1".into()));
    }
    if r.windows(2).any(|w| w[0] > w[1]) {
        return Err(DesignError::Invalid("orders must be nondecreasing".into()));
    }
    let mut logs = vec![0.0; m];
    logs[m - 1] = g[m - 1].ln() + kappa.ln();
    for i in (0..m - 1).rev() {
        logs[i] = g[i].ln() + (r[i + 1] - r[i] + 1) as f64 * logs[i + 1];
    }
    if let Some(i) = logs.iter().position(|v| *v >= f64::MAX.ln()) {
        return Err(DesignError::Overflow(format!("ell[{}] = exp({:.3e}) overflows", i + 1, logs[i])));
    }
    Ok(logs.iter().map(|v| v.exp()).collect())
}

/// `eᵢ = Π_{k>i} (r_k − r_{k−1} + 1)`, the power of `κ` in `ℓᵢ`.
pub fn cascade_exponents(r: &[usize]) -> Vec<u32> {
    let m = r.len();
    let mut e = vec![1u32; m];
    for i in (0..m.saturating_sub(1)).rev() {
        e[i] = e[i + 1] * (r[i + 1] - r[i] + 1) as u32;
    }
    e
}

pub fn is_spd(p: &DMatrix<f64>) -> bool {
    p.is_square() && (p - p.transpose()).amax() <= 1e-9 * p.amax() && sym_eig_range(p).0 > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::eigenvalues;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn k_from_repeated_poles() {
        assert_eq!(design_k(2, &[-0.5, -0.5]).unwrap(), vec![0.25, 1.0]);
        assert_eq!(design_k(3, &[-0.5; 3]).unwrap(), vec![0.125, 0.75, 1.5]);
        assert_eq!(design_k(1, &[-1.0]).unwrap(), vec![1.0]);
        assert!(design_k(2, &[-1.0, 0.0]).is_err());
        assert!(design_k(2, &[-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn k_places_requested_poles(poles in proptest::collection::vec(-5.0f64..-0.1, 1..5)) {
            let r = poles.len();
            let k = design_k(r, &poles).unwrap();
            let closed = prime_a(r) - prime_b(r) * DMatrix::from_row_slice(1, r, &k);
            let mut got: Vec<f64> = eigenvalues(&closed).iter().map(|z| z.re).collect();
            let mut want = poles.clone();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                // Repeated poles split by O(√eps) under perturbation.
                prop_assert!((a - b).abs() < 1e-8_f64.max(4.0 * f64::EPSILON.powf(1.0 / r as f64)));
            }
        }

        #[test]
        fn cascade_is_monotone(k1 in 1.0f64..100.0, dk in 0.01f64..50.0) {
            let r = [2, 3, 5];
            let g = [1.5, 0.7, 2.0];
            let a = gain_cascade(&g, k1, &r).unwrap();
            let b = gain_cascade(&g, k1 + dk, &r).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y > x);
            }
        }
    }

    #[test]
    fn f_blocks_of_example_are_hurwitz() {
        let f1 = build_f(&[(2.5, 4.6), (2.5, 1.533)]);
        let f2 = build_f(&[(2.5, 4.6), (2.5, 1.533), (2.5, 0.511)]);
        assert!(is_hurwitz(&f1, HURWITZ_MARGIN));
        assert!(is_hurwitz(&f2, HURWITZ_MARGIN));
        assert!(!is_hurwitz(&build_f(&[(0.0, 0.0); 3]), HURWITZ_MARGIN));
        assert_eq!(f1[(0, 0)], -2.5);
        assert_eq!(f1[(1, 0)], -4.6);
        assert_eq!(f1[(1, 3)], 1.0);
        assert_eq!(f1[(2, 1)], 2.5);
        assert_eq!(f1[(3, 1)], 1.533);
    }

    #[test]
    fn lyapunov_examples() {
        let p = lyapunov_solve(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);
        let p = lyapunov_solve(&(-DMatrix::identity(2, 2)), &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(p, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-14);
        for f in [build_f(&[(2.5, 4.6), (2.5, 1.533)]), build_f(&[(2.5, 4.6), (2.5, 1.533), (2.5, 0.511)])] {
            let q = DMatrix::identity(f.nrows(), f.nrows());
            let p = lyapunov_solve(&f, &q).unwrap();
            assert!(is_spd(&p));
            assert!((&p * &f + f.transpose() * &p + &q).norm() < 1e-9);
        }
        assert!(lyapunov_solve(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn cascade_examples() {
        let l = gain_cascade(&[12.5, 1.0], 200.0, &[2, 3]).unwrap();
        assert_relative_eq!(l[1], 200.0, max_relative = 1e-14);
        assert_relative_eq!(l[0], 5e5, max_relative = 1e-12);
        assert_relative_eq!(gain_cascade(&[3.0], 10.0, &[2]).unwrap()[0], 30.0, max_relative = 1e-14);
        let l = gain_cascade(&[1.0, 1.0], 7.0, &[2, 2]).unwrap();
        assert_relative_eq!(l[0], 7.0, max_relative = 1e-14);
        assert_relative_eq!(l[1], 7.0, max_relative = 1e-14);
        assert!(matches!(gain_cascade(&[1e10, 1e10, 1e10], 1e10, &[2, 9, 20]), Err(DesignError::Overflow(_))));
    }

    #[test]
    fn cascade_log_slopes_are_exponent_products() {
        let r = [2, 3, 5];
        let g = [1.3, 0.4, 2.2];
        let kappas = [2.0f64, 5.0, 11.0, 40.0];
        let e = cascade_exponents(&r);
        assert_eq!(e, vec![6, 3, 1]);
        for i in 0..3 {
            let pts: Vec<(f64, f64)> = kappas
                .iter()
                .map(|&k| (k.ln(), gain_cascade(&g, k, &r).unwrap()[i].ln()))
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
                / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
            assert!((slope - e[i] as f64).abs() < 1e-9);
        }
    }
}
