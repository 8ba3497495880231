//! Prime-form triplets, Kronecker products and the small dense helpers the
//! rest of the crate builds on.

use nalgebra::{Complex, DMatrix, DVector};

/// Shift matrix `A_d` (ones on the superdiagonal).
pub fn prime_a(d: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    a
}

/// `B_d = (0, …, 0, 1)ᵀ`.
pub fn prime_b(d: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(d, 1);
    if d > 0 {
        b[(d - 1, 0)] = 1.0;
    }
    b
}

/// `C_d = (1, 0, …, 0)`.
pub fn prime_c(d: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(1, d);
    if d > 0 {
        c[(0, 0)] = 1.0;
    }
    c
}

/// `D₂ = diag(0, 1)`.
pub fn d2() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Block-diagonal assembly of arbitrary (not necessarily square) blocks.
pub fn blkdiag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Induced 2-norm (largest singular value).
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = m.clone().symmetric_eigenvalues();
    (ev.min(), ev.max())
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Coefficients of `Π (s − pᵢ)` for real roots, lowest order first, monic.
pub fn poly_from_real_roots(roots: &[f64]) -> Vec<f64> {
    let mut c = vec![1.0];
    for &p in roots {
        let mut next = vec![0.0; c.len() + 1];
        for (k, &ck) in c.iter().enumerate() {
            next[k + 1] += ck;
            next[k] -= p * ck;
        }
        c = next;
    }
    c
}

/// Characteristic polynomial of a square matrix, lowest order first, monic.
///
/// Faddeev–LeVerrier; exact enough for the ≤ 12-dimensional matrices used here.
pub fn char_poly(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let ident = DMatrix::<f64>::identity(n, n);
    let mut mk = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        mk = m * &mk + &ident * coeffs[n - k + 1];
        let amk = m * &mk;
        coeffs[n - k] = -amk.trace() / k as f64;
    }
    coeffs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prime_triplet_shapes() {
        let a = prime_a(3);
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 2)], 1.0);
        assert_eq!(a.sum(), 2.0);
        assert_eq!(prime_b(3)[(2, 0)], 1.0);
        assert_eq!(prime_c(3)[(0, 0)], 1.0);
    }

    #[test]
    fn poly_roots_match_binomial() {
        // (s + 1/2)^3 = s^3 + 1.5 s^2 + 0.75 s + 0.125
        let c = poly_from_real_roots(&[-0.5, -0.5, -0.5]);
        assert_eq!(c, vec![0.125, 0.75, 1.5, 1.0]);
    }

    #[test]
    fn char_poly_of_companion() {
        let mut m = prime_a(3);
        m[(2, 0)] = -0.125;
        m[(2, 1)] = -0.75;
        m[(2, 2)] = -1.5;
        let c = char_poly(&m);
        for (got, want) in c.iter().zip([0.125, 0.75, 1.5, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn blkdiag_rectangular() {
        let b = blkdiag(&[prime_b(2), prime_b(3)]);
        assert_eq!(b.shape(), (5, 2));
        assert_eq!(b[(1, 0)], 1.0);
        assert_eq!(b[(4, 1)], 1.0);
    }
}
