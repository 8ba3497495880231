use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::linear::{build_f, is_hurwitz, lyapunov_solve, HURWITZ_MARGIN};
use super::DesignError;
use crate::matrices::{blkdiag, char_poly, min_singular_value, norm2, sym_eig_range};

/// Change of variables `χ = T η̃` putting one channel's error dynamics into
/// lower-triangular-plus-feedback form.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiTransform {
    pub t: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub fbar: DMatrix<f64>,
    pub gbar: DMatrix<f64>,
    pub hbar: DMatrix<f64>,
    /// Characteristic (= minimal) polynomial of `F̄`, lowest order first.
    pub minpoly: Vec<f64>,
    /// `Π γ²`.
    pub gain_product: f64,
}

/// Input column `G = B_{2r}` of one channel.
pub fn g_column(r: usize) -> DMatrix<f64> {
    crate::matrices::prime_b(2 * r)
}

/// Output row `Hₖ = (0, …, 0, γ², −γ², 0)` with `γ² = γ²ₖ,ᵣₖ`.
pub fn h_row(gamma: &[(f64, f64)]) -> DMatrix<f64> {
    let r = gamma.len();
    let mut h = DMatrix::zeros(1, 2 * r);
    let g2 = gamma[r - 1].1;
    h[(0, 2 * r - 3)] = g2;
    h[(0, 2 * r - 2)] = -g2;
    h
}

pub fn chi_transform(gamma: &[(f64, f64)]) -> Result<ChiTransform, DesignError> {
    let r = gamma.len();
    if r < 2 || gamma.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0)) {
        return Err(DesignError::Invalid("transform needs r >= 2 and positive gamma".into()));
    }
    let g2 = |j: usize| gamma[j - 1].1;
    let e1 = |j: usize| 2 * (j - 1);
    let e2 = |j: usize| 2 * (j - 1) + 1;
    let total: f64 = gamma.iter().map(|g| g.1).product();
    let mut t = DMatrix::zeros(2 * r, 2 * r);
    let mut c = 1.0;
    for k in 1..r {
        c *= g2(r + 1 - k);
        t[(k - 1, e2(r - k))] = c;
        t[(k - 1, e1(r - k + 1))] = -c;
    }
    t[(r - 1, e1(1))] = -total;
    for k in 1..=r {
        t[(r + k - 1, e2(k))] = -total;
    }
    let det = t.determinant();
    let t_inv = t
        .clone()
        .try_inverse()
        .filter(|_| det.abs() > 0.0)
        .ok_or_else(|| DesignError::Numerical("transform T is singular".into()))?;
    let f = build_f(gamma);
    let fbar = &t * &f * &t_inv;
    let gbar = &t * g_column(r);
    let hbar = h_row(gamma) * &t_inv;
    let minpoly = char_poly(&fbar);
    Ok(ChiTransform { t, f, fbar, gbar, hbar, minpoly, gain_product: total })
}

impl ChiTransform {
    pub fn order(&self) -> usize {
        self.t.nrows() / 2
    }

    /// `𝒢(s) = −(Π γ²)/𝒫(s)`.
    pub fn transfer(&self, s: Complex<f64>) -> Complex<f64> {
        let p = self.minpoly.iter().rev().fold(Complex::new(0.0, 0.0), |acc, c| acc * s + c);
        Complex::new(-self.gain_product, 0.0) / p
    }

    /// `H̄(sI − F̄)⁻¹Ḡ` from the state-space triplet.
    pub fn transfer_state_space(&self, s: Complex<f64>) -> Complex<f64> {
        let n = self.fbar.nrows();
        let a = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
            let d = if i == j { s } else { Complex::new(0.0, 0.0) };
            d - Complex::new(self.fbar[(i, j)], 0.0)
        });
        let b = DVector::<Complex<f64>>::from_fn(n, |i, _| Complex::new(self.gbar[(i, 0)], 0.0));
        let x = a.lu().solve(&b).expect("sI - F is invertible off the spectrum");
        (0..n).map(|i| x[i] * self.hbar[(0, i)]).sum()
    }

    /// Sparsity of `F̄`: returns the largest entry outside the expected pattern.
    pub fn off_pattern_max(&self) -> f64 {
        let r = self.order();
        let mut worst: f64 = 0.0;
        for i in 0..2 * r {
            for j in 0..2 * r {
                let allowed = (i == j && i < r)
                    || j == i + 1
                    || (i >= r && j + i + 1 == 2 * r)
                    || (i == 2 * r - 1 && j == 0);
                if !allowed {
                    worst = worst.max(self.fbar[(i, j)].abs());
                }
            }
        }
        worst
    }
}

/// Peak of `|𝒢(jω)|` over a log-spaced sweep with local refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPeak {
    pub omega: f64,
    pub gain: f64,
    pub dc_gain: f64,
    pub points: usize,
}

pub fn frequency_sweep(tr: &ChiTransform, points: usize) -> FrequencyPeak {
    let gain = |w: f64| tr.transfer(Complex::new(0.0, w)).norm();
    let (lo, hi) = (-4.0f64, 4.0f64);
    let step = (hi - lo) / (points.max(2) - 1) as f64;
    let mut best = (0.0, gain(0.0));
    let mut best_idx = None;
    for k in 0..points {
        let w = 10f64.powf(lo + step * k as f64);
        let g = gain(w);
        if g > best.1 {
            best = (w, g);
            best_idx = Some(k);
        }
    }
    if let Some(k) = best_idx {
        // Golden-section refinement in log ω around the best grid point.
        let (mut a, mut b) = (lo + step * (k as f64 - 1.0), lo + step * (k as f64 + 1.0));
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..80 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if gain(10f64.powf(c)) > gain(10f64.powf(d)) {
                b = d;
            } else {
                a = c;
            }
        }
        let w = 10f64.powf(0.5 * (a + b));
        if gain(w) > best.1 {
            best = (w, gain(w));
        }
    }
    FrequencyPeak { omega: best.0, gain: best.1, dc_gain: gain(0.0), points }
}

/// Per-channel storage function from the bounded-real Riccati inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCertificate {
    pub pbar: DMatrix<f64>,
    pub lambda_bar: f64,
    pub p: DMatrix<f64>,
    pub lambda: f64,
    pub riccati_iterations: usize,
    pub epsilon: f64,
    pub peak: FrequencyPeak,
    /// `eigmax(P̄F̄ + F̄ᵀP̄) + 2μ₀‖P̄Ḡ‖‖H̄‖`, the conservative norm test.
    pub norm_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedEvidence {
    pub eta_samples: usize,
    pub delta_draws: usize,
    /// Largest sampled `η̃ᵀMη̃/|η̃|²` (must be ≤ 0).
    pub max_sampled_ratio: f64,
    /// Largest eigenvalue of `M` over the drawn `Δ₀`.
    pub max_eigenvalue: f64,
}

fn riccati(tr: &ChiTransform, mu0: f64, eps: f64) -> Option<(DMatrix<f64>, usize)> {
    let n = tr.fbar.nrows();
    let q = tr.hbar.transpose() * &tr.hbar + DMatrix::identity(n, n) * eps;
    let gg = &tr.gbar * tr.gbar.transpose();
    let mut x = lyapunov_solve(&tr.fbar, &q).ok()?;
    if mu0 == 0.0 {
        return Some((x, 1));
    }
    for it in 1..=2000 {
        let rhs = &q + &x * &gg * &x * (mu0 * mu0);
        let next = lyapunov_solve(&tr.fbar, &rhs).ok()?;
        let change = (&next - &x).norm();
        x = next;
        if !x.norm().is_finite() || x.norm() > 1e12 {
            return None;
        }
        if change <= 1e-13 * x.norm() {
            return Some((x, it + 1));
        }
    }
    None
}

/// Riccati residual `F̄ᵀX + XF̄ + μ₀²XḠḠᵀX + H̄ᵀH̄`.
fn dissipation(f: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>, x: &DMatrix<f64>, mu0: f64) -> DMatrix<f64> {
    let m = f.transpose() * x + x * f + x * g * g.transpose() * x * (mu0 * mu0) + h.transpose() * h;
    (&m + m.transpose()) * 0.5
}

pub fn channel_certificate(tr: &ChiTransform, mu0: f64, sweep_points: usize) -> Result<ChannelCertificate, DesignError> {
    if !is_hurwitz(&tr.f, HURWITZ_MARGIN) {
        return Err(DesignError::NotHurwitz(crate::matrices::max_real_eigenvalue(&tr.f)));
    }
    let peak = frequency_sweep(tr, sweep_points);
    if mu0 > 0.0 && !(peak.gain < 1.0 / mu0) {
        return Err(DesignError::BoundedReal(format!(
            "peak gain {:.6} at omega {:.4e} is not below 1/mu0 = {:.6}",
            peak.gain,
            peak.omega,
            1.0 / mu0
        )));
    }
    let mut eps = 1.0;
    let (pbar, iterations) = loop {
        if let Some(found) = riccati(tr, mu0, eps) {
            break found;
        }
        eps *= 0.5;
        if eps < 1e-10 {
            return Err(DesignError::BoundedReal("no stabilizing Riccati solution found".into()));
        }
    };
    let lambda_bar = -sym_eig_range(&dissipation(&tr.fbar, &tr.gbar, &tr.hbar, &pbar, mu0)).1;
    if !(lambda_bar > 0.0) || !(sym_eig_range(&pbar).0 > 0.0) {
        return Err(DesignError::BoundedReal(format!("certificate margin {lambda_bar:e} is not positive")));
    }
    let p = tr.t.transpose() * &pbar * &tr.t;
    let p = (&p + p.transpose()) * 0.5;
    let r = tr.order();
    let h = h_row(&tr_gamma_tail(tr));
    let lambda = -sym_eig_range(&dissipation(&tr.f, &g_column(r), &h, &p, mu0)).1;
    let norm_test = sym_eig_range(&(&pbar * &tr.fbar + tr.fbar.transpose() * &pbar)).1
        + 2.0 * mu0 * norm2(&(&pbar * &tr.gbar)) * norm2(&tr.hbar);
    Ok(ChannelCertificate {
        pbar,
        lambda_bar,
        p,
        lambda,
        riccati_iterations: iterations,
        epsilon: eps,
        peak,
        norm_test,
    })
}

// H in η̃ coordinates only depends on γ²_{r}; recover it from F's last row.
fn tr_gamma_tail(tr: &ChiTransform) -> Vec<(f64, f64)> {
    let n = tr.f.nrows();
    let g2 = -tr.f[(n - 1, n - 2)];
    let mut v = vec![(1.0, 1.0); n / 2];
    v[n / 2 - 1] = (1.0, g2);
    v
}

/// Lower bound `λ̄ σ_min(T)²` implied by mapping `χ = Tη̃`.
pub fn mapped_lambda_bound(tr: &ChiTransform, cert: &ChannelCertificate) -> f64 {
    cert.lambda_bar * min_singular_value(&tr.t).powi(2)
}

/// Samples `2χᵀP̄(F̄χ + Ḡu) + λ̄|χ|² − u²/μ₀² + |H̄χ|² ≤ 0` and returns the
/// largest value relative to `|χ|² + u²`.
pub fn verify_dissipation(
    tr: &ChiTransform,
    cert: &ChannelCertificate,
    mu0: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = tr.fbar.nrows();
    let scale = (norm2(&cert.pbar) * (norm2(&tr.fbar) + norm2(&tr.gbar))).max(1.0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let chi = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(rng));
        let u: f64 = if mu0 > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
        let flow = &tr.fbar * &chi + tr.gbar.column(0) * u;
        let y = (&tr.hbar * &chi)[0];
        let penalty = if mu0 > 0.0 { u * u / (mu0 * mu0) } else { 0.0 };
        let v = 2.0 * chi.dot(&(&cert.pbar * flow)) + cert.lambda_bar * chi.norm_squared() - penalty + y * y;
        worst = worst.max(v / ((chi.norm_squared() + u * u) * scale));
    }
    worst
}

/// Random `Δ₀` with `‖Δ₀‖₂ = scale`.
pub fn random_delta(m: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = DMatrix::<f64>::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let n = norm2(&d);
    if n == 0.0 {
        DMatrix::zeros(m, m)
    } else {
        d * (scale / n)
    }
}

/// Samples `Σ η̃ᵢᵀ(PᵢFᵢ + FᵢᵀPᵢ)η̃ᵢ + 2η̃ᵀPGΔ₀Hη̃ + Σλᵢ|η̃ᵢ|² ≤ 0`.
pub fn verify_combined(
    gammas: &[Vec<(f64, f64)>],
    certs: &[ChannelCertificate],
    mu0: f64,
    eta_samples: usize,
    delta_draws: usize,
    rng: &mut ChaCha8Rng,
) -> CombinedEvidence {
    let m = gammas.len();
    let fs: Vec<_> = gammas.iter().map(|g| build_f(g)).collect();
    let p = blkdiag(&certs.iter().map(|c| c.p.clone()).collect::<Vec<_>>());
    let g = blkdiag(&gammas.iter().map(|gm| g_column(gm.len())).collect::<Vec<_>>());
    let h = blkdiag(&gammas.iter().map(|gm| h_row(gm)).collect::<Vec<_>>());
    let mut base = blkdiag(
        &certs
            .iter()
            .zip(&fs)
            .map(|(c, f)| &c.p * f + f.transpose() * &c.p + DMatrix::identity(f.nrows(), f.nrows()) * c.lambda)
            .collect::<Vec<_>>(),
    );
    base = (&base + base.transpose()) * 0.5;
    let n = base.nrows();
    let scale = base.amax().max(1.0);
    let mut max_ratio = f64::NEG_INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    for draw in 0..delta_draws {
        let s = if draw == 0 { 1.0 } else { rng.random_range(0.0..=1.0) };
        let mut d0 = random_delta(m, mu0 * s, rng);
        if draw % 2 == 1 {
            d0 = -d0;
        }
        let cross = &p * &g * &d0 * &h;
        let mm = &base + &cross + cross.transpose();
        max_eig = max_eig.max(sym_eig_range(&mm).1);
        for _ in 0..eta_samples {
            let e = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(rng));
            let v = (e.transpose() * &mm * &e)[(0, 0)] / e.norm_squared();
            max_ratio = max_ratio.max(v / scale);
        }
    }
    CombinedEvidence { eta_samples, delta_draws, max_sampled_ratio: max_ratio, max_eigenvalue: max_eig / scale }
}
