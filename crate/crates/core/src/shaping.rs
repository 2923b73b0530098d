//! Shaping-matrix design for the quantizers on a transmitter's incoming links.
//!
//! The objective is the optimal fusion MSE with each link's error covariance
//! taken from the high-resolution law, `Q_Qk = c_k det(B_k)^{1/n} B_k^{-1}`,
//! which is invariant to the scale of `B_k`. With `det(B_k) = 1` the whitened
//! error `T_k = Γ_k^{-1/2} Q_Qk Γ_k^{-1/2}` has a fixed determinant, and the law
//! is only used where `T_k ⪯ CLAMP_CAP·I`. The solver works on `T_k`: an
//! affine-invariant descent step with a traceless direction, followed by a
//! log-spectral projection that caps the eigenvalues and spreads the excess
//! over the others so the determinant is unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion;
use crate::linalg::{self, c, CMat, CVec, C64};
use crate::model::{CovMatrix, Scenario};
use crate::quantizer::{self, HighResCov};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitMode {
    #[default]
    Identity,
    /// Random positive-definite start drawn from `seed`.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative objective decrease over `stall_window` steps below which the solver stops.
    pub tol: f64,
    pub stall_window: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop once the Riemannian gradient norm falls below this.
    pub gradient_tol: f64,
    pub init: InitMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-9,
            stall_window: 5,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
            gradient_tol: 1e-12,
            init: InitMode::Identity,
        }
    }
}

/// Which objective a caller ended up evaluating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Approx,
    Exact,
}

#[derive(Clone, Debug, Serialize)]
pub struct ShapingSolution {
    pub tx: usize,
    /// Cooperators in the order of `b`, `q_q` and `rates`.
    pub coop: Vec<usize>,
    pub rates: Vec<u32>,
    pub b: Vec<CovMatrix>,
    pub q_q: Vec<CovMatrix>,
    pub objective_exact: f64,
    /// `None` when the first-order approximation is out of range at this rate.
    pub objective_approx: Option<f64>,
    pub objective_unshaped: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub clamped: bool,
    /// Objective after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// `Γ_k = Q_h + Q_k` for the quantizer at TX `k`, with the same error
/// regularization the fusion rule uses.
pub fn link_gamma(s: &Scenario, k: usize) -> Result<CovMatrix> {
    CovMatrix::new(s.q_h().matrix() + s.regularized_error(k))
}

struct LinkData {
    q_k: CMat,
    q_k_inv: CMat,
    gamma: CMat,
    g_half: CMat,
    g_inv_half: CMat,
    /// `Q_0^(S)(Γ_k) = scale·I`.
    scale: f64,
    /// `log det T_k` when `det(B_k) = 1`.
    logdet_t: f64,
    /// Rate 0: nothing is sent and `Q_Qk = Γ_k` whatever `B_k` is.
    silent: bool,
}

/// Objective data for TX `i` at fixed rates on its incoming links.
pub struct ShapingProblem {
    tx: usize,
    coop: Vec<usize>,
    rates: Vec<u32>,
    n: usize,
    q_h: CMat,
    /// `Q_h^{-1} + Q_i^{-1}`.
    info0: CMat,
    links: Vec<LinkData>,
}

impl ShapingProblem {
    /// `rates[j]` is the rate from the `j`-th cooperator of TX `i`.
    pub fn new(s: &Scenario, i: usize, rates: &[u32]) -> Result<Self> {
        if i >= s.k() {
            return Err(Error::Config(format!("TX index {i} out of range")));
        }
        let coop = s.coop(i).to_vec();
        if rates.len() != coop.len() {
            return Err(Error::DimensionMismatch { expected: coop.len(), got: rates.len() });
        }
        let n = s.n();
        let q_h = s.q_h().matrix().clone();
        let info0 = linalg::inv_hpd(&q_h, "Q_h")? + linalg::inv_hpd(&s.regularized_error(i), "Q_i")?;
        let m2n = s.m2n();
        let links = coop
            .iter()
            .zip(rates)
            .map(|(&k, &r)| {
                let q_k = s.regularized_error(k);
                let gamma = &q_h + &q_k;
                let logdet = linalg::logdet_hpd(&gamma, "Γ")?;
                Ok(LinkData {
                    q_k_inv: linalg::inv_hpd(&q_k, "Q_k")?,
                    q_k,
                    g_half: linalg::sqrtm_psd(&gamma),
                    g_inv_half: linalg::inv_sqrtm_pd(&gamma)?,
                    gamma,
                    scale: quantizer::q0_scale(n, r as f64, m2n, logdet),
                    logdet_t: n as f64 * quantizer::q0_scale(n, r as f64, m2n, logdet).ln() - logdet,
                    silent: r == 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tx: i, coop, rates: rates.to_vec(), n, q_h, info0, links })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    fn check(&self, bs: &[CMat]) -> Result<()> {
        if bs.len() != self.links.len() {
            return Err(Error::DimensionMismatch { expected: self.links.len(), got: bs.len() });
        }
        if let Some(b) = bs.iter().find(|b| b.nrows() != self.n) {
            return Err(Error::DimensionMismatch { expected: self.n, got: b.nrows() });
        }
        Ok(())
    }

    /// Unclamped `Q_Qk` and the factor `c_k det(B)^{1/n}` in front of `B^{-1}`.
    fn raw_error(&self, k: usize, b: &CMat) -> Result<(CMat, f64, CMat)> {
        let b_inv = linalg::inv_hpd(b, "shaping matrix B")?;
        let factor = self.links[k].scale * (linalg::logdet_hpd(b, "shaping matrix B")? / self.n as f64).exp();
        Ok((&b_inv * c(factor), factor, b_inv))
    }

    /// Clamped error covariances for a table of shaping matrices.
    pub fn error_covs(&self, bs: &[CMat]) -> Result<(Vec<CMat>, bool)> {
        self.check(bs)?;
        let mut any = false;
        let mut out = Vec::with_capacity(bs.len());
        for (k, b) in bs.iter().enumerate() {
            let (raw, _, _) = self.raw_error(k, b)?;
            if self.links[k].silent {
                out.push(self.links[k].gamma.clone());
                continue;
            }
            let (q, clamped) = quantizer::clamp_with_roots(&raw, &self.links[k].g_half, &self.links[k].g_inv_half);
            any |= clamped;
            out.push(q);
        }
        Ok((out, any))
    }

    fn mse_from_errors(&self, qqs: &[CMat]) -> Result<f64> {
        let mut info = self.info0.clone();
        for (l, q) in self.links.iter().zip(qqs) {
            info += fusion::lambda_term(&self.q_h, &l.q_k, q)?;
        }
        Ok(linalg::trace_re(&linalg::inv_hpd(&info, "information matrix")?) / self.n as f64)
    }

    /// Exact objective and whether the clamp was active.
    pub fn exact(&self, bs: &[CMat]) -> Result<(f64, bool)> {
        let (qqs, clamped) = self.error_covs(bs)?;
        Ok((self.mse_from_errors(&qqs)?, clamped))
    }

    /// Objective of the relaxed problem over `det(B_k) ≥ 1`: the fusion MSE
    /// at `Q_Qk = c_k B_k^{-1}` without determinant normalization. Equals
    /// [`Self::exact`] on unit-determinant inputs.
    pub fn relaxed(&self, bs: &[CMat]) -> Result<(f64, bool)> {
        self.check(bs)?;
        let mut any = false;
        let mut qqs = Vec::with_capacity(bs.len());
        for (l, b) in self.links.iter().zip(bs) {
            let raw = linalg::inv_hpd(b, "shaping matrix B")? * c(l.scale);
            if l.silent {
                qqs.push(l.gamma.clone());
                continue;
            }
            let (q, clamped) = quantizer::clamp_with_roots(&raw, &l.g_half, &l.g_inv_half);
            any |= clamped;
            qqs.push(q);
        }
        Ok((self.mse_from_errors(&qqs)?, any))
    }

    /// First-order approximation
    /// `(1/n) tr(Σ_k (Q_k^{-1} − Q_k^{-1} Q_Qk Q_k^{-1}) + Q_i^{-1} + Q_h^{-1})^{-1}`
    /// with unclamped `Q_Qk`.
    pub fn approx(&self, bs: &[CMat]) -> Result<f64> {
        self.check(bs)?;
        let mut info = self.info0.clone();
        for (k, b) in bs.iter().enumerate() {
            let l = &self.links[k];
            let (raw, _, _) = self.raw_error(k, b)?;
            if l.silent {
                continue;
            }
            info += &l.q_k_inv - &l.q_k_inv * raw * &l.q_k_inv;
        }
        let info = linalg::hermitize(&info);
        if linalg::herm_eigenvalues(&info)[0] <= 0.0 {
            return Err(Error::ApproxOutOfRange);
        }
        let inv = linalg::inv_hpd(&info, "approximate information matrix").map_err(|_| Error::ApproxOutOfRange)?;
        Ok(linalg::trace_re(&inv) / self.n as f64)
    }

    /// Gradient of the MSE with respect to each error covariance `Q_Qk`:
    /// `(1/n) P_k^{-1} Γ_k Λ_k F^{-2} Λ_k Γ_k P_k^{-1}`.
    fn error_gradient(&self, qqs: &[CMat]) -> Result<Vec<CMat>> {
        let nf = self.n as f64;
        let mut info = self.info0.clone();
        let mut parts = Vec::with_capacity(qqs.len());
        for (l, q) in self.links.iter().zip(qqs) {
            if l.silent {
                parts.push((CMat::zeros(self.n, self.n), CMat::zeros(self.n, self.n)));
                continue;
            }
            let p = &l.gamma - q;
            // M = P^{-1} Γ, so Γ P^{-1} Γ = Γ M and Γ P^{-1} = M^H.
            let m = linalg::solve_hpd(&p, &l.gamma, "P = Γ − Q_Q")?;
            let lambda = linalg::inv_hpd(&linalg::hermitize(&(&l.gamma * &m - &self.q_h)), "Λ term")?;
            info += &lambda;
            parts.push((m, lambda));
        }
        let f_inv = linalg::inv_hpd(&linalg::hermitize(&info), "information matrix")?;
        let f_inv2 = &f_inv * &f_inv;
        Ok(parts
            .into_iter()
            .map(|(m, lambda)| linalg::hermitize(&(&m * &lambda * &f_inv2 * &lambda * m.adjoint() * c(1.0 / nf))))
            .collect())
    }

    /// Euclidean gradient `G_k` of the unclamped objective with respect to each
    /// `B_k`, in the sense `df = Re Σ_k tr(G_k dB_k)`.
    pub fn analytic_gradient(&self, bs: &[CMat]) -> Result<Vec<CMat>> {
        self.check(bs)?;
        let nf = self.n as f64;
        let mut raws = Vec::with_capacity(bs.len());
        for (k, b) in bs.iter().enumerate() {
            raws.push(self.raw_error(k, b)?);
        }
        let qqs: Vec<CMat> = raws.iter().map(|r| r.0.clone()).collect();
        let g_q = self.error_gradient(&qqs)?;
        Ok(raws
            .into_iter()
            .zip(g_q)
            .map(|((_, factor, b_inv), g)| {
                let tr = linalg::trace_re(&(&g * &b_inv)) / nf;
                linalg::hermitize(&((&b_inv * c(tr) - &b_inv * &g * &b_inv) * c(factor)))
            })
            .collect())
    }

    fn unwhiten(&self, ts: &[CMat]) -> Vec<CMat> {
        self.links.iter().zip(ts).map(|(l, t)| linalg::hermitize(&(&l.g_half * t * &l.g_half))).collect()
    }

    /// Objective as a function of the whitened errors `T_k`.
    pub fn whitened_objective(&self, ts: &[CMat]) -> Result<f64> {
        self.mse_from_errors(&self.unwhiten(ts))
    }

    /// Gradient with respect to each `T_k`: `Γ_k^{1/2} G_Qk Γ_k^{1/2}`.
    pub fn whitened_gradient(&self, ts: &[CMat]) -> Result<Vec<CMat>> {
        let g_q = self.error_gradient(&self.unwhiten(ts))?;
        Ok(self.links.iter().zip(g_q).map(|(l, g)| linalg::hermitize(&(&l.g_half * g * &l.g_half))).collect())
    }

    /// Whitened unclamped error for shaping `b`.
    fn whiten(&self, k: usize, b: &CMat) -> Result<CMat> {
        let (raw, _, _) = self.raw_error(k, b)?;
        let l = &self.links[k];
        Ok(linalg::hermitize(&(&l.g_inv_half * raw * &l.g_inv_half)))
    }

    /// Unit-determinant shaping matrix producing whitened error `t`.
    fn shaping_for(&self, k: usize, t: &CMat) -> Result<CMat> {
        let l = &self.links[k];
        if l.silent {
            return Ok(linalg::identity(self.n));
        }
        let t_inv = linalg::inv_hpd(t, "whitened error")?;
        normalize_det(&(&l.g_inv_half * t_inv * &l.g_inv_half))
    }

    /// Central-difference gradient of the exact (clamped) objective over a
    /// Hermitian basis, in the same convention as [`Self::analytic_gradient`].
    pub fn fd_gradient(&self, bs: &[CMat], step: f64) -> Result<Vec<CMat>> {
        self.check(bs)?;
        let n = self.n;
        let mut out = Vec::with_capacity(bs.len());
        let mut work = bs.to_vec();
        for k in 0..bs.len() {
            let h = step * linalg::trace_re(&bs[k]) / n as f64;
            let mut diff = |dir: &CMat| -> Result<f64> {
                work[k] = &bs[k] + dir * c(h);
                let plus = self.exact(&work)?.0;
                work[k] = &bs[k] - dir * c(h);
                let minus = self.exact(&work)?.0;
                work[k] = bs[k].clone();
                Ok((plus - minus) / (2.0 * h))
            };
            let mut g = CMat::zeros(n, n);
            for a in 0..n {
                let mut e = CMat::zeros(n, n);
                e[(a, a)] = c(1.0);
                g[(a, a)] = c(diff(&e)?);
                for b in a + 1..n {
                    let mut re = CMat::zeros(n, n);
                    re[(a, b)] = c(1.0);
                    re[(b, a)] = c(1.0);
                    let mut im = CMat::zeros(n, n);
                    im[(a, b)] = C64::new(0.0, 1.0);
                    im[(b, a)] = C64::new(0.0, -1.0);
                    let entry = C64::new(diff(&re)?, diff(&im)?) * 0.5;
                    g[(a, b)] = entry;
                    g[(b, a)] = entry.conj();
                }
            }
            out.push(g);
        }
        Ok(out)
    }
}

fn normalize_det(b: &CMat) -> Result<CMat> {
    let n = b.nrows() as f64;
    let logdet = linalg::logdet_hpd(b, "shaping matrix B")?;
    Ok(linalg::hermitize(b) * c((-logdet / n).exp()))
}

fn to_mats(bs: &[CovMatrix]) -> Vec<CMat> {
    bs.iter().map(|b| b.matrix().clone()).collect()
}

fn identity_table(n: usize, links: usize) -> Vec<CMat> {
    vec![linalg::identity(n); links]
}

/// Exact objective for TX `i`: normalizes each `B_k`, applies the clamped
/// high-resolution law and returns the optimal fusion MSE.
pub fn objective_exact(bs: &[CovMatrix], s: &Scenario, i: usize, rates: &[u32]) -> Result<f64> {
    Ok(ShapingProblem::new(s, i, rates)?.exact(&to_mats(bs))?.0)
}

/// First-order approximate objective; [`Error::ApproxOutOfRange`] when its
/// information matrix is not positive definite.
pub fn objective_approx(bs: &[CovMatrix], s: &Scenario, i: usize, rates: &[u32]) -> Result<f64> {
    ShapingProblem::new(s, i, rates)?.approx(&to_mats(bs))
}

/// The approximate objective when it is in range, the exact one otherwise.
pub fn objective_with_fallback(
    bs: &[CovMatrix],
    s: &Scenario,
    i: usize,
    rates: &[u32],
) -> Result<(f64, ObjectiveKind)> {
    let p = ShapingProblem::new(s, i, rates)?;
    let mats = to_mats(bs);
    match p.approx(&mats) {
        Ok(v) => Ok((v, ObjectiveKind::Approx)),
        Err(Error::ApproxOutOfRange) => Ok((p.exact(&mats)?.0, ObjectiveKind::Exact)),
        Err(e) => Err(e),
    }
}

/// Analytic gradient of the exact objective with respect to each `B_k`.
pub fn exact_gradient(bs: &[CovMatrix], s: &Scenario, i: usize, rates: &[u32]) -> Result<Vec<CMat>> {
    ShapingProblem::new(s, i, rates)?.analytic_gradient(&to_mats(bs))
}

/// Error covariances with `B = I` on every incoming link of TX `i`.
pub fn unshaped_model(s: &Scenario, i: usize, rates: &[u32]) -> Result<Vec<HighResCov>> {
    let p = ShapingProblem::new(s, i, rates)?;
    let id = identity_table(p.n, p.num_links());
    id.iter()
        .enumerate()
        .map(|(k, b)| {
            let l = &p.links[k];
            if l.silent {
                return Ok(HighResCov { q_q: CovMatrix::new(l.gamma.clone())?, clamped: false });
            }
            let (raw, _, _) = p.raw_error(k, b)?;
            let (q, clamped) = quantizer::clamp_with_roots(&raw, &l.g_half, &l.g_inv_half);
            Ok(HighResCov { q_q: CovMatrix::new(q)?, clamped })
        })
        .collect()
}

/// Random unit-determinant positive-definite matrix.
pub fn random_shaping(n: usize, rng: &mut ChaCha8Rng) -> CMat {
    let a = CMat::from_fn(n, n, |_, _| linalg::standard_complex_normal(1, rng)[0]);
    let b = &a * a.adjoint() + linalg::identity(n) * c(0.1);
    normalize_det(&b).expect("A A^H + 0.1 I is positive definite")
}

pub fn optimize_shaping(s: &Scenario, i: usize, rates: &[u32], opts: &SolverOptions) -> Result<ShapingSolution> {
    let p = ShapingProblem::new(s, i, rates)?;
    let init = match opts.init {
        InitMode::Identity => identity_table(p.n, p.num_links()),
        InitMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..p.num_links()).map(|_| random_shaping(p.n, &mut rng)).collect()
        }
    };
    solve(&p, init, opts)
}

/// [`optimize_shaping`] from an explicit starting table.
pub fn optimize_shaping_from(
    s: &Scenario,
    i: usize,
    rates: &[u32],
    init: &[CovMatrix],
    opts: &SolverOptions,
) -> Result<ShapingSolution> {
    let p = ShapingProblem::new(s, i, rates)?;
    solve(&p, to_mats(init), opts)
}

/// Cap on whitened error eigenvalues inside the solver, just under the clamp threshold.
const SOLVER_CAP: f64 = quantizer::CLAMP_CAP * (1.0 - 1e-9);

/// Caps the eigenvalues of `t` at `SOLVER_CAP` and shifts the rest by a common
/// log-offset so that `log det` equals `logdet`. `None` when the cap makes the
/// determinant unreachable.
fn project_spectrum(t: &CMat, logdet: f64) -> Option<CMat> {
    let n = t.nrows();
    let log_cap = SOLVER_CAP.ln();
    if logdet > n as f64 * log_cap {
        return None;
    }
    let (vals, vecs) = linalg::herm_eig(t);
    let logs: Vec<f64> = vals.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let mut capped = vec![false; n];
    let offset = loop {
        let free: Vec<usize> = (0..n).filter(|&j| !capped[j]).collect();
        let fixed = (n - free.len()) as f64 * log_cap;
        let nu = (logdet - fixed - free.iter().map(|&j| logs[j]).sum::<f64>()) / free.len() as f64;
        let over: Vec<usize> = free.iter().copied().filter(|&j| logs[j] + nu > log_cap).collect();
        if over.is_empty() {
            break nu;
        }
        over.into_iter().for_each(|j| capped[j] = true);
    };
    let d = CVec::from_iterator(
        n,
        (0..n).map(|j| c(if capped[j] { SOLVER_CAP } else { (logs[j] + offset).exp().min(SOLVER_CAP) })),
    );
    Some(linalg::hermitize(&(&vecs * CMat::from_diagonal(&d) * vecs.adjoint())))
}

struct Step {
    halves: Vec<CMat>,
    dirs: Vec<CMat>,
    grads: Vec<CMat>,
    norm2: f64,
}

fn descent(p: &ShapingProblem, ts: &[CMat]) -> Result<Step> {
    let grads = p.whitened_gradient(ts)?;
    let n = p.n as f64;
    let mut halves = Vec::with_capacity(ts.len());
    let mut dirs = Vec::with_capacity(ts.len());
    let mut norm2 = 0.0;
    for (t, g) in ts.iter().zip(&grads) {
        let half = linalg::sqrtm_psd(t);
        let mut x = linalg::hermitize(&(&half * g * &half));
        // Traceless directions keep the determinant fixed.
        let tr = linalg::trace_re(&x) / n;
        x -= linalg::identity(p.n) * c(tr);
        norm2 += linalg::frobenius(&x).powi(2);
        halves.push(half);
        dirs.push(x);
    }
    Ok(Step { halves, dirs, grads, norm2 })
}

fn advance(p: &ShapingProblem, step: &Step, alpha: f64) -> Vec<CMat> {
    step.halves
        .iter()
        .zip(&step.dirs)
        .zip(&p.links)
        .map(|((half, x), l)| {
            if l.silent {
                return linalg::identity(half.nrows());
            }
            let e = linalg::herm_map(x, |v| (-alpha * v).exp());
            let t = linalg::hermitize(&(half * e * half));
            project_spectrum(&t, l.logdet_t).expect("feasibility checked before descent")
        })
        .collect()
}

/// `Re Σ_k tr(G_k (T'_k − T_k))`.
fn directional(grads: &[CMat], from: &[CMat], to: &[CMat]) -> f64 {
    grads.iter().zip(from.iter().zip(to)).map(|(g, (a, b))| linalg::trace_re(&(g * (b - a)))).sum()
}

fn solve(p: &ShapingProblem, init: Vec<CMat>, opts: &SolverOptions) -> Result<ShapingSolution> {
    let identity = identity_table(p.n, p.num_links());
    let (unshaped, _) = p.exact(&identity)?;
    let init = init.iter().map(normalize_det).collect::<Result<Vec<_>>>()?;

    // The high-resolution law has no valid point when even an isotropic
    // whitened error exceeds the cap; shaping cannot help there.
    let feasible = p.links.iter().all(|l| l.silent || l.logdet_t <= p.n as f64 * SOLVER_CAP.ln());
    let mut ts = Vec::with_capacity(p.num_links());
    if feasible {
        for (k, b) in init.iter().enumerate() {
            if p.links[k].silent {
                ts.push(linalg::identity(p.n));
                continue;
            }
            let t = p.whiten(k, b)?;
            ts.push(project_spectrum(&t, p.links[k].logdet_t).expect("feasible"));
        }
    }

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut kkt = 0.0;
    let mut converged = p.links.iter().all(|l| l.silent) || !feasible;
    let mut f = if feasible && !converged { p.whitened_objective(&ts)? } else { unshaped };
    if feasible && !converged {
        history.push(f);
    }
    let mut alpha_prev: Option<f64> = None;

    while !converged && iterations < opts.max_iters {
        let step = descent(p, &ts)?;
        kkt = step.norm2.sqrt();
        if kkt <= opts.gradient_tol {
            converged = true;
            break;
        }
        let mut alpha = alpha_prev.map_or(1.0 / kkt, |a| 2.0 * a).min(5.0 / kkt);
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let cand = advance(p, &step, alpha);
            let fc = p.whitened_objective(&cand)?;
            let slope = directional(&step.grads, &ts, &cand);
            if fc <= f + opts.armijo_c * slope && fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= opts.backtrack;
        }
        let Some((cand, fc)) = accepted else {
            // No decrease representable at this precision.
            converged = true;
            break;
        };
        iterations += 1;
        alpha_prev = Some(alpha);
        // Projected-gradient residual: displacement per unit step in the T_k metric.
        kkt = step
            .halves
            .iter()
            .zip(ts.iter().zip(&cand))
            .map(|(half, (a, b))| {
                let h_inv = linalg::inv_hpd(half, "T^{1/2}").unwrap_or_else(|_| linalg::identity(p.n));
                linalg::frobenius(&(&h_inv * (b - a) * &h_inv)).powi(2)
            })
            .sum::<f64>()
            .sqrt()
            / alpha;
        ts = cand;
        f = fc;
        history.push(f);
        if history.len() > opts.stall_window {
            let past = history[history.len() - 1 - opts.stall_window];
            if past - f <= opts.tol * past.abs() {
                converged = true;
            }
        }
    }
    if !converged {
        log::warn!("shaping for TX {} stopped after {} iterations (residual {kkt:.3e})", p.tx, iterations);
    }

    let mut bs = if feasible && p.num_links() > 0 {
        ts.iter().enumerate().map(|(k, t)| p.shaping_for(k, t)).collect::<Result<Vec<_>>>()?
    } else {
        identity.clone()
    };
    let (mut objective, _) = p.exact(&bs)?;
    if !(objective <= unshaped) {
        bs = identity;
        objective = unshaped;
    }
    let (qqs, clamped) = p.error_covs(&bs)?;
    let approx = match p.approx(&bs) {
        Ok(v) => Some(v),
        Err(Error::ApproxOutOfRange) => None,
        Err(e) => return Err(e),
    };
    Ok(ShapingSolution {
        tx: p.tx,
        coop: p.coop.clone(),
        rates: p.rates.clone(),
        b: bs.into_iter().map(CovMatrix::new).collect::<Result<_>>()?,
        q_q: qqs.into_iter().map(CovMatrix::new).collect::<Result<_>>()?,
        objective_exact: objective,
        objective_approx: approx,
        objective_unshaped: unshaped,
        iterations,
        converged,
        kkt_residual: kkt,
        clamped,
        history,
    })
}
