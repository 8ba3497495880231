//! Quadratic sublevel sets and seeded samplers over them.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::matrices::blkdiag;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// `V(x) = xᵀ P x` with `P` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    p: DMatrix<f64>,
    chol_upper: DMatrix<f64>,
}

impl QuadraticForm {
    pub fn new(p: DMatrix<f64>) -> Option<Self> {
        if !p.is_square() || (&p - p.transpose()).amax() > 1e-12 * p.amax().max(1.0) {
            return None;
        }
        let chol = Cholesky::new(p.clone())?;
        let chol_upper = chol.l().transpose();
        Some(Self { p, chol_upper })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut v = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.p[(i, j)] * x[j];
            }
            v += x[i] * row;
        }
        v
    }

    /// Maps the unit ball onto `{V ≤ level}`: `x = R⁻¹ z √level` with `P = RᵀR`.
    fn from_ball(&self, z: &DVector<f64>, level: f64) -> Vec<f64> {
        let x = self
            .chol_upper
            .clone()
            .solve_upper_triangular(&(z * level.sqrt()))
            .expect("Cholesky factor is nonsingular");
        x.iter().copied().collect()
    }
}

/// Lyapunov function of the ideal closed loop of the bundled example:
/// `½|x₀|² + ξ₁ᵀP₁ξ₁ + ξ₂ᵀP₂ξ₂`.
pub fn paper_example_lyapunov() -> QuadraticForm {
    let v0 = DMatrix::identity(2, 2) * 0.5;
    let p1 = DMatrix::from_row_slice(2, 2, &[2.625, 2.0, 2.0, 2.5]) * 1000.0;
    let p2 = DMatrix::from_row_slice(
        3,
        3,
        &[4.2266, 6.8594, 4.0, 6.8594, 15.875, 9.8125, 4.0, 9.8125, 6.875],
    );
    QuadraticForm::new(blkdiag(&[v0, p1, p2])).expect("SPD")
}

pub const PAPER_EXAMPLE_LEVEL: f64 = 2.0;

/// Sampling region for Monte-Carlo certificate estimates.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Uniform in volume over `{x : V(x) ≤ level}`.
    Sublevel { form: QuadraticForm, level: f64 },
    /// Uniform over `{x : V(x) = level}` in the ellipsoid's own coordinates.
    Boundary { form: QuadraticForm, level: f64 },
    /// Uniform over an axis-aligned box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

/// Summary of a sampling region, recorded alongside estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub kind: String,
    pub dim: usize,
    pub level: Option<f64>,
}

fn unit_sphere(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let z: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let norm = z.norm();
        if norm > 1e-12 {
            return z / norm;
        }
    }
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Sublevel { form, .. } | Region::Boundary { form, .. } => form.dim(),
            Region::Box { lo, .. } => lo.len(),
        }
    }

    pub fn summary(&self) -> RegionSummary {
        let (kind, level) = match self {
            Region::Sublevel { level, .. } => ("sublevel", Some(*level)),
            Region::Boundary { level, .. } => ("boundary", Some(*level)),
            Region::Box { .. } => ("box", None),
        };
        RegionSummary { kind: kind.into(), dim: self.dim(), level }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Region::Sublevel { form, level } => {
                let n = form.dim();
                let radius = rng.random::<f64>().powf(1.0 / n as f64);
                form.from_ball(&(unit_sphere(rng, n) * radius), *level)
            }
            Region::Boundary { form, level } => form.from_ball(&unit_sphere(rng, form.dim()), *level),
            Region::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..=*b)).collect(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Sublevel { form, level } => form.value(x) <= level * (1.0 + 1e-12),
            Region::Boundary { form, level } => (form.value(x) - level).abs() <= 1e-9 * level,
            Region::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| a <= v && v <= b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sublevel_samples_stay_inside() {
        let region = Region::Sublevel { form: paper_example_lyapunov(), level: 3.0 };
        let mut rng = seeded_rng(7);
        for _ in 0..1000 {
            let x = region.sample(&mut rng);
            assert_eq!(x.len(), 7);
            assert!(region.contains(&x));
        }
    }

    #[test]
    fn boundary_samples_on_level_set() {
        let form = paper_example_lyapunov();
        let region = Region::Boundary { form: form.clone(), level: 2.0 };
        let mut rng = seeded_rng(1);
        for _ in 0..100 {
            let x = region.sample(&mut rng);
            assert!((form.value(&x) - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let region = Region::Box { lo: vec![-1.0; 3], hi: vec![2.0; 3] };
        let a: Vec<_> = (0..5).scan(seeded_rng(3), |r, _| Some(region.sample(r))).collect();
        let b: Vec<_> = (0..5).scan(seeded_rng(3), |r, _| Some(region.sample(r))).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| region.contains(x)));
    }

    #[test]
    fn rejects_indefinite_forms() {
        assert!(QuadraticForm::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_none());
        assert!(QuadraticForm::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_none());
    }
}
