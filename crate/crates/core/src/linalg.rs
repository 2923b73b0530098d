//! Small dense complex linear-algebra helpers on top of `nalgebra`.
//!
//! All matrices here are tiny (n ≤ a few dozen), so the helpers favour
//! clarity over blocking or in-place tricks.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Condition numbers above this are logged as warnings.
pub const COND_WARN: f64 = 1e12;

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn real_diag(d: &[f64]) -> CMat {
    CMat::from_diagonal(&CVec::from_iterator(d.len(), d.iter().map(|&x| c(x))))
}

/// `(m + m^H) / 2`.
pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * c(0.5)
}

pub fn trace_re(m: &CMat) -> f64 {
    m.trace().re
}

/// Largest entrywise deviation from Hermitian symmetry.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues sorted ascending.
pub fn herm_eig(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(hermitize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn herm_eigenvalues(m: &CMat) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(hermitize(m)).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Applies `f` to the spectrum of a Hermitian matrix.
pub fn herm_map(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = herm_eig(m);
    let d = CMat::from_diagonal(&CVec::from_iterator(vals.len(), vals.iter().map(|&x| c(f(x)))));
    hermitize(&(&vecs * d * vecs.adjoint()))
}

/// Principal square root of a Hermitian PSD matrix (negative eigenvalues clamped).
pub fn sqrtm_psd(m: &CMat) -> CMat {
    herm_map(m, |x| x.max(0.0).sqrt())
}

/// Inverse square root of a Hermitian positive-definite matrix.
pub fn inv_sqrtm_pd(m: &CMat) -> Result<CMat> {
    let (vals, _) = herm_eig(m);
    if vals[0] <= 0.0 {
        return Err(Error::Singular(format!(
            "inverse square root of a matrix with eigenvalue {:.3e}",
            vals[0]
        )));
    }
    Ok(herm_map(m, |x| 1.0 / x.sqrt()))
}

/// Spectral condition number of a Hermitian matrix (∞ when not positive definite).
pub fn cond_herm(m: &CMat) -> f64 {
    let vals = herm_eigenvalues(m);
    let (lo, hi) = (vals[0], vals[vals.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn cholesky(m: &CMat, what: &str) -> Result<Cholesky<C64, nalgebra::Dyn>> {
    hermitize(m)
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub fn inv_hpd(m: &CMat, what: &str) -> Result<CMat> {
    Ok(hermitize(&cholesky(m, what)?.inverse()))
}

/// Solves `m x = rhs` for Hermitian positive-definite `m`.
pub fn solve_hpd(m: &CMat, rhs: &CMat, what: &str) -> Result<CMat> {
    Ok(cholesky(m, what)?.solve(rhs))
}

/// `ln det(m)` for Hermitian positive-definite `m`.
pub fn logdet_hpd(m: &CMat, what: &str) -> Result<f64> {
    let ch = cholesky(m, what)?;
    let l = ch.l_dirty();
    Ok((0..m.nrows()).map(|k| 2.0 * l[(k, k)].re.ln()).sum())
}

/// Draws a vector of i.i.d. CN(0, 1) entries (real and imaginary parts each N(0, 1/2)).
pub fn standard_complex_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVec {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CVec::from_iterator(
        n,
        (0..n).map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re * s, im * s)
        }),
    )
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Sample covariance `(1/N) Σ x x^H` of zero-mean vectors.
pub fn sample_cov<'a>(n: usize, xs: impl IntoIterator<Item = &'a CVec>) -> CMat {
    let mut acc = CMat::zeros(n, n);
    let mut count = 0usize;
    for x in xs {
        acc += x * x.adjoint();
        count += 1;
    }
    if count > 0 {
        acc /= c(count as f64);
    }
    acc
}
