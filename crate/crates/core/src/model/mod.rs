//! Problem description: channel and error covariances, cooperation sets,
//! backhaul rates, and complex Gaussian sampling of channels and local
//! estimates.

mod cellular;
mod doc;
pub mod quadrature;

use std::collections::BTreeMap;

use nalgebra::Cholesky;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};

pub use cellular::{
    build_cellular_qh, build_feedback_error_cov, place_cellular, CellularGeometry, CellularParams,
    SPEED_OF_LIGHT,
};
pub use doc::{CellularDoc, MatrixSpec, ScenarioDoc};

/// Relative scale of the ridge added to singular error covariances.
pub const REGULARIZATION_SCALE: f64 = 1e-8;

const HERMITIAN_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-9;

/// Hermitian positive-semidefinite complex matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "doc::ComplexRows", into = "doc::ComplexRows")]
pub struct CovMatrix(CMat);

impl CovMatrix {
    /// Validates Hermitian symmetry and positive semi-definiteness.
    pub fn new(m: CMat) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidCovariance(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
        let defect = linalg::hermitian_defect(&m);
        if defect > HERMITIAN_TOL * scale {
            return Err(Error::InvalidCovariance(format!("not Hermitian (defect {defect:.3e})")));
        }
        let m = linalg::hermitize(&m);
        let vals = linalg::herm_eigenvalues(&m);
        let (lo, hi) = (vals[0], vals[vals.len() - 1]);
        if lo < -PSD_TOL * hi.max(0.0) {
            return Err(Error::InvalidCovariance(format!(
                "not positive semidefinite (eigenvalues {lo:.3e} .. {hi:.3e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(linalg::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(CMat::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Result<Self> {
        if s < 0.0 {
            return Err(Error::InvalidCovariance(format!("negative variance {s}")));
        }
        Ok(Self(linalg::identity(n) * c(s)))
    }

    pub fn diag(d: &[f64]) -> Result<Self> {
        if let Some(bad) = d.iter().find(|x| **x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidCovariance(format!("invalid diagonal variance {bad}")));
        }
        Self::new(linalg::real_diag(d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }

    pub fn trace(&self) -> f64 {
        linalg::trace_re(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::herm_eigenvalues(&self.0)[0]
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue() > 0.0
    }
}

impl AsRef<CMat> for CovMatrix {
    fn as_ref(&self) -> &CMat {
        &self.0
    }
}

/// Network dimensions: `k` transmitters with `m` antennas, `l` receivers with
/// `n_rx` antennas.
///
/// The channel vector is `h = vec(H)` with `H` of size `(l·n_rx) × (k·m)`,
/// stacked column-major: entry `(rx, rx_ant, tx, tx_ant)` sits at index
/// `(tx·m + tx_ant)·l·n_rx + rx·n_rx + rx_ant`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub n_rx: usize,
}

impl Dims {
    pub fn new(k: usize, l: usize, m: usize, n_rx: usize) -> Result<Self> {
        if k == 0 || l == 0 || m == 0 || n_rx == 0 {
            return Err(Error::Config(format!(
                "all dimensions must be positive (K={k}, L={l}, M={m}, N={n_rx})"
            )));
        }
        Ok(Self { k, l, m, n_rx })
    }

    /// Vector dimension `n = N·M·K·L`.
    pub fn n(&self) -> usize {
        self.k * self.l * self.m * self.n_rx
    }

    pub fn index(&self, rx: usize, rx_ant: usize, tx: usize, tx_ant: usize) -> usize {
        (tx * self.m + tx_ant) * self.l * self.n_rx + rx * self.n_rx + rx_ant
    }
}

/// Full problem description shared by every transmitter.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    dims: Dims,
    q_h: CovMatrix,
    q_err: Vec<CovMatrix>,
    coop: Vec<Vec<usize>>,
    rates: Vec<Vec<u32>>,
    m2n_overrides: BTreeMap<u32, f64>,
}

impl Scenario {
    /// Builds a scenario with full cooperation and zero backhaul rates.
    pub fn new(dims: Dims, q_h: CovMatrix, q_err: Vec<CovMatrix>) -> Result<Self> {
        let n = dims.n();
        if q_h.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: q_h.dim() });
        }
        if q_err.len() != dims.k {
            return Err(Error::Config(format!(
                "expected {} error covariances, got {}",
                dims.k,
                q_err.len()
            )));
        }
        if let Some(q) = q_err.iter().find(|q| q.dim() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: q.dim() });
        }
        let coop = (0..dims.k).map(|i| (0..dims.k).filter(|&k| k != i).collect()).collect();
        Ok(Self {
            dims,
            q_h,
            q_err,
            coop,
            rates: vec![vec![0; dims.k]; dims.k],
            m2n_overrides: BTreeMap::new(),
        })
    }

    /// Replaces the cooperation sets; `coop[i]` lists the transmitters sending to `i`.
    pub fn with_coop(mut self, coop: Vec<Vec<usize>>) -> Result<Self> {
        if coop.len() != self.dims.k {
            return Err(Error::Config(format!(
                "cooperation table has {} rows, expected {}",
                coop.len(),
                self.dims.k
            )));
        }
        for (i, set) in coop.iter().enumerate() {
            for (pos, &k) in set.iter().enumerate() {
                if k >= self.dims.k {
                    return Err(Error::Config(format!("cooperator {k} out of range for TX {i}")));
                }
                if k == i {
                    return Err(Error::Config(format!("TX {i} cannot cooperate with itself")));
                }
                if set[..pos].contains(&k) {
                    return Err(Error::Config(format!("duplicate cooperator {k} for TX {i}")));
                }
            }
        }
        self.coop = coop;
        Ok(self)
    }

    /// Replaces the rate table; `rates[k][i]` is the number of bits TX `k` sends to TX `i`.
    pub fn with_rates(mut self, rates: Vec<Vec<u32>>) -> Result<Self> {
        if rates.len() != self.dims.k || rates.iter().any(|r| r.len() != self.dims.k) {
            return Err(Error::Config(format!("rate table must be {0}x{0}", self.dims.k)));
        }
        self.rates = rates;
        Ok(self)
    }

    pub fn with_m2n_overrides(mut self, overrides: BTreeMap<u32, f64>) -> Self {
        self.m2n_overrides = overrides;
        self
    }

    /// Sets every link into every TX to the same rate.
    pub fn with_uniform_rate(mut self, rate: u32) -> Self {
        for row in &mut self.rates {
            row.iter_mut().for_each(|r| *r = rate);
        }
        self
    }

    pub fn set_rate(&mut self, from: usize, to: usize, rate: u32) {
        self.rates[from][to] = rate;
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims.n()
    }

    pub fn k(&self) -> usize {
        self.dims.k
    }

    pub fn q_h(&self) -> &CovMatrix {
        &self.q_h
    }

    pub fn q_err(&self, i: usize) -> &CovMatrix {
        &self.q_err[i]
    }

    pub fn q_errors(&self) -> &[CovMatrix] {
        &self.q_err
    }

    pub fn coop(&self, i: usize) -> &[usize] {
        &self.coop[i]
    }

    pub fn coop_sets(&self) -> &[Vec<usize>] {
        &self.coop
    }

    pub fn rate(&self, from: usize, to: usize) -> u32 {
        self.rates[from][to]
    }

    pub fn rates(&self) -> &[Vec<u32>] {
        &self.rates
    }

    /// Rates of the links into TX `i`, ordered as its cooperation set.
    pub fn rates_into(&self, i: usize) -> Vec<u32> {
        self.coop[i].iter().map(|&k| self.rates[k][i]).collect()
    }

    pub fn m2n_overrides(&self) -> &BTreeMap<u32, f64> {
        &self.m2n_overrides
    }

    /// Lattice constant for this scenario's real dimension `2n`.
    pub fn m2n(&self) -> f64 {
        crate::quantizer::m2n_constant(2 * self.n() as u32, Some(&self.m2n_overrides))
            .expect("2n is even and positive")
    }

    /// Ridge `δ = 1e-8 · tr(Q_h)/n` used for singular error covariances.
    pub fn regularization(&self) -> f64 {
        REGULARIZATION_SCALE * self.q_h.trace() / self.n() as f64
    }

    /// `Q_i`, with `δ·I` added when its smallest eigenvalue does not exceed `δ`.
    pub fn regularized_error(&self, i: usize) -> CMat {
        let delta = self.regularization();
        let q = &self.q_err[i];
        if q.min_eigenvalue() > delta {
            q.matrix().clone()
        } else {
            q.matrix() + linalg::identity(self.n()) * c(delta)
        }
    }

    /// Swaps two transmitters' roles (error covariances, cooperation, rates).
    pub fn swap_tx(&self, a: usize, b: usize) -> Self {
        let perm = |x: usize| if x == a { b } else if x == b { a } else { x };
        let k = self.dims.k;
        let mut out = self.clone();
        for i in 0..k {
            out.q_err[i] = self.q_err[perm(i)].clone();
            out.coop[i] = self.coop[perm(i)].iter().map(|&x| perm(x)).collect();
            for j in 0..k {
                out.rates[i][j] = self.rates[perm(i)][perm(j)];
            }
        }
        out
    }
}

/// Precomputed sampler for `CN(0, Q)`.
///
/// Uses a Cholesky factor when `Q` is positive definite and falls back to
/// `V·diag(√max(λ,0))` otherwise.
#[derive(Clone, Debug)]
pub struct ComplexGaussian {
    factor: CMat,
}

impl ComplexGaussian {
    pub fn new(cov: &CovMatrix) -> Self {
        let m = cov.matrix();
        let factor = match Cholesky::new(m.clone()) {
            Some(ch) if cov.min_eigenvalue() > 0.0 => ch.unpack(),
            _ => {
                let (vals, vecs) = linalg::herm_eig(m);
                let mut f = vecs;
                for (j, v) in vals.iter().enumerate() {
                    let s = v.max(0.0).sqrt();
                    f.column_mut(j).iter_mut().for_each(|z| *z *= s);
                }
                f
            }
        };
        Self { factor }
    }

    /// Validates a raw matrix before building the sampler.
    pub fn from_matrix(m: &CMat) -> Result<Self> {
        Ok(Self::new(&CovMatrix::new(m.clone())?))
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CVec {
        self.transform(&linalg::standard_complex_normal(self.dim(), rng))
    }

    /// Maps a `CN(0, I)` draw to a draw from this distribution.
    pub fn transform(&self, w: &CVec) -> CVec {
        &self.factor * w
    }
}

/// One draw from `CN(0, cov)`.
pub fn sample_complex_gaussian<R: Rng + ?Sized>(cov: &CMat, rng: &mut R) -> Result<CVec> {
    Ok(ComplexGaussian::from_matrix(cov)?.sample(rng))
}

/// Channel plus per-TX error samplers for repeated draws from one scenario.
#[derive(Clone, Debug)]
pub struct ScenarioSampler {
    channel: ComplexGaussian,
    errors: Vec<ComplexGaussian>,
}

impl ScenarioSampler {
    pub fn new(s: &Scenario) -> Self {
        Self {
            channel: ComplexGaussian::new(s.q_h()),
            errors: s.q_errors().iter().map(ComplexGaussian::new).collect(),
        }
    }

    pub fn channel<R: Rng + ?Sized>(&self, rng: &mut R) -> CVec {
        self.channel.sample(rng)
    }

    /// `ĥ^(i) = h + e^(i)` for every TX, errors drawn independently in TX order.
    pub fn local_estimates<R: Rng + ?Sized>(&self, h: &CVec, rng: &mut R) -> Result<Vec<CVec>> {
        if h.len() != self.channel.dim() {
            return Err(Error::DimensionMismatch { expected: self.channel.dim(), got: h.len() });
        }
        Ok(self.errors.iter().map(|e| h + e.sample(rng)).collect())
    }
}

/// `ĥ^(i) = h + e^(i)`, `e^(i) ~ CN(0, Q_i)` independent across `i`.
pub fn sample_local_estimates<R: Rng + ?Sized>(
    s: &Scenario,
    h: &CVec,
    rng: &mut R,
) -> Result<Vec<CVec>> {
    ScenarioSampler::new(s).local_estimates(h, rng)
}

/// Diagonal-covariance scenario with `Q_h = I` and full cooperation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicSpec {
    pub dims: Dims,
    /// One diagonal of `Q_i` per transmitter.
    pub diagonals: Vec<Vec<f64>>,
}

pub fn build_scenario_isotropic(spec: &IsotropicSpec) -> Result<Scenario> {
    let n = spec.dims.n();
    let q_err = spec
        .diagonals
        .iter()
        .map(|d| {
            if d.len() != n {
                Err(Error::DimensionMismatch { expected: n, got: d.len() })
            } else {
                CovMatrix::diag(d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Scenario::new(spec.dims, CovMatrix::identity(n), q_err)
}

/// Two-TX, two-RX single-antenna scenario with the given error diagonals.
pub fn two_tx_diagonal(q1: &[f64], q2: &[f64]) -> Result<Scenario> {
    build_scenario_isotropic(&IsotropicSpec {
        dims: Dims::new(2, 2, 1, 1)?,
        diagonals: vec![q1.to_vec(), q2.to_vec()],
    })
}
