//! Monte Carlo sweeps of fusion MSE and zero-forcing sum rate over backhaul rates.
//!
//! Trial `t` draws from a ChaCha8 stream `t` keyed by the master seed, in the
//! order channel, all local estimates, then one `CN(0, I)` vector per directed
//! link. Every algorithm in a sweep consumes the same draws, so curves are
//! compared on common random numbers and results do not depend on scheduling.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionRule};
use crate::linalg::{self, CMat, CVec};
use crate::model::{ComplexGaussian, CovMatrix, Dims, Scenario, ScenarioDoc, ScenarioSampler};
use crate::quantizer::{empirical_error_cov, train_lloyd_shaped, AnalyticQuantizer, Codebook, LloydOptions};
use crate::shaping::{link_gamma, optimize_shaping, unshaped_model, SolverOptions};

const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Shaped,
    Unshaped,
    WzBound,
    NoCoop,
    /// Unquantized exchange of local estimates.
    InfiniteBackhaul,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Shaped => "shaped",
            Algorithm::Unshaped => "unshaped",
            Algorithm::WzBound => "wz_bound",
            Algorithm::NoCoop => "no_coop",
            Algorithm::InfiniteBackhaul => "infinite_backhaul",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Analytic,
    /// Trained Lloyd codebooks for rates up to the training cap.
    #[serde(alias = "trained_vq")]
    Trained,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Analytic => "analytic",
            Mode::Trained => "trained_vq",
        }
    }
}

/// How each TX scales its zero-forcing precoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// The TX's own row has power `P`.
    #[default]
    PerTx,
    /// The whole precoder has power `K·P`.
    SumPower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub rates: Vec<u32>,
    pub algorithms: Vec<Algorithm>,
    pub mode: Mode,
    pub trials: usize,
    /// Reporting TXs (0-based) for MSE sweeps.
    pub tx: Vec<usize>,
    pub seed: u64,
    /// Per-TX transmit power, linear scale, with unit receiver noise.
    pub power: f64,
    pub power_mode: PowerMode,
    /// Training-set size per codebook in trained mode.
    pub train_samples: usize,
    pub solver: SolverOptions,
    pub lloyd: LloydOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rates: (0..=30).step_by(2).collect(),
            algorithms: vec![Algorithm::Shaped, Algorithm::Unshaped, Algorithm::WzBound, Algorithm::NoCoop],
            mode: Mode::Analytic,
            trials: 100_000,
            tx: vec![0],
            seed: 0,
            power: 100.0,
            power_mode: PowerMode::PerTx,
            train_samples: 20_000,
            solver: SolverOptions::default(),
            lloyd: LloydOptions { max_rate: 8, ..LloydOptions::default() },
        }
    }
}

impl SweepConfig {
    fn validate(&self, s: &Scenario) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Config("rate grid is empty".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms selected".into()));
        }
        if self.trials < 2 {
            return Err(Error::Config("at least two trials are needed for a confidence interval".into()));
        }
        if let Some(&i) = self.tx.iter().find(|&&i| i >= s.k()) {
            return Err(Error::Config(format!("reporting TX {} does not exist", i + 1)));
        }
        if !(self.power > 0.0) {
            return Err(Error::Config("power must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub rate: u32,
    pub algorithm: Algorithm,
    /// Reporting TX (0-based); `None` for network-wide sum-rate rows.
    pub tx: Option<usize>,
    pub mse: f64,
    pub mse_ci95: f64,
    /// Closed-form MSE of the fusion rule used.
    pub predicted_mse: f64,
    pub sum_rate: Option<f64>,
    pub sum_rate_ci95: Option<f64>,
    pub clamped: bool,
    /// Whether trained codebooks replaced the analytic quantizer.
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepMeta {
    pub seed: u64,
    pub trials: usize,
    pub scenario_digest: String,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub meta: SweepMeta,
}

pub const CSV_HEADER: &str = "rate,algorithm,tx,mse,mse_ci95,sum_rate,clamped";

impl SweepResult {
    /// CSV with 1-based TX ids (`all` for network-wide rows).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let tx = r.tx.map_or_else(|| "all".to_string(), |i| (i + 1).to_string());
            let sum_rate = r.sum_rate.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.rate,
                r.algorithm.name(),
                tx,
                r.mse,
                r.mse_ci95,
                sum_rate,
                r.clamped
            );
        }
        out
    }

    pub fn find(&self, algorithm: Algorithm, rate: u32, tx: Option<usize>) -> Option<&SweepRecord> {
        self.records.iter().find(|r| r.algorithm == algorithm && r.rate == rate && r.tx == tx)
    }
}

pub fn scenario_digest(s: &Scenario) -> String {
    digest::of_json(&ScenarioDoc::from_scenario(s))
}

/// Generator for trial `t`: stream `t` of the ChaCha8 key derived from `seed`.
pub fn trial_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}

/// Sample mean and 95% normal-approximation half-width of each output of
/// `f` over `trials` trials, reduced in fixed chunks in trial order.
pub fn monte_carlo<F>(trials: usize, seed: u64, width: usize, f: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
{
    let starts: Vec<usize> = (0..trials).step_by(CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| {
            let mut sum = vec![0.0; width];
            let mut sq = vec![0.0; width];
            for t in start..(start + CHUNK).min(trials) {
                let v = f(&mut trial_rng(seed, t as u64))?;
                for j in 0..width {
                    sum[j] += v[j];
                    sq[j] += v[j] * v[j];
                }
            }
            Ok((sum, sq))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    for (s, q) in chunks {
        for j in 0..width {
            sum[j] += s[j];
            sq[j] += q[j];
        }
    }
    let nf = trials as f64;
    Ok((0..width)
        .map(|j| {
            let mean = sum[j] / nf;
            let var = ((sq[j] - nf * mean * mean) / (nf - 1.0)).max(0.0);
            (mean, 1.96 * (var / nf).sqrt())
        })
        .collect())
}

/// One trial's random inputs.
pub struct Draw {
    pub h: CVec,
    pub estimates: Vec<CVec>,
    /// `noise[i][j]`: `CN(0, I)` draw for the `j`-th incoming link of TX `i`.
    pub noise: Vec<Vec<CVec>>,
}

pub fn draw(s: &Scenario, sampler: &ScenarioSampler, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let h = sampler.channel(rng);
    let estimates = sampler.local_estimates(&h, rng)?;
    let noise = (0..s.k())
        .map(|i| s.coop(i).iter().map(|_| linalg::standard_complex_normal(s.n(), rng)).collect())
        .collect();
    Ok(Draw { h, estimates, noise })
}

enum LinkQuantizer {
    Analytic(AnalyticQuantizer),
    Trained(Codebook),
}

/// Quantizers on the incoming links of one TX plus its fusion rule.
struct Pipeline {
    tx: usize,
    rule: FusionRule,
    links: Vec<LinkQuantizer>,
    clamped: bool,
    trained: bool,
}

impl Pipeline {
    fn estimate(&self, d: &Draw) -> Result<CVec> {
        let received = self
            .rule
            .coop
            .iter()
            .zip(&self.links)
            .enumerate()
            .map(|(j, (&k, q))| match q {
                LinkQuantizer::Analytic(a) => Ok(a.quantize_with(&d.estimates[k], &d.noise[self.tx][j])),
                LinkQuantizer::Trained(cb) => cb.encode(&d.estimates[k]),
            })
            .collect::<Result<Vec<_>>>()?;
        self.rule.fuse(&d.estimates[self.tx], &received)
    }
}

/// Generator for codebook training data, disjoint from the trial streams.
fn training_rng(seed: u64, rate: u32, from: usize, to: usize, held_out: bool) -> ChaCha8Rng {
    let tag = (1u64 << 63) | (u64::from(held_out) << 62) | ((rate as u64) << 32) | ((from as u64) << 16) | to as u64;
    trial_rng(seed, tag)
}

fn train_link(
    s: &Scenario,
    cfg: &SweepConfig,
    rate: u32,
    from: usize,
    to: usize,
    b: &CovMatrix,
) -> Result<(Codebook, CovMatrix)> {
    let gamma = ComplexGaussian::new(&link_gamma(s, from)?);
    let needed = cfg.lloyd.min_samples_per_cell << rate;
    let count = cfg.train_samples.max(needed);
    let mut rng = training_rng(cfg.seed, rate, from, to, false);
    let samples: Vec<CVec> = (0..count).map(|_| gamma.sample(&mut rng)).collect();
    let cb = train_lloyd_shaped(&samples, b, rate, &LloydOptions { seed: cfg.seed, ..cfg.lloyd.clone() })?;
    let mut rng = training_rng(cfg.seed, rate, from, to, true);
    let held_out: Vec<CVec> = (0..count).map(|_| gamma.sample(&mut rng)).collect();
    let q = empirical_error_cov(&cb, &held_out)?;
    Ok((cb, q))
}

fn build_pipeline(s: &Scenario, alg: Algorithm, i: usize, rate: u32, cfg: &SweepConfig) -> Result<Pipeline> {
    let coop = s.coop(i).to_vec();
    let rates = s.rates_into(i);
    let gammas = coop.iter().map(|&k| link_gamma(s, k)).collect::<Result<Vec<_>>>()?;
    let (qq, shapings, clamped) = match alg {
        Algorithm::NoCoop => {
            let mut alone = s.coop_sets().to_vec();
            alone[i].clear();
            let s_alone = s.clone().with_coop(alone)?;
            let rule = fusion::fusion_weights(&s_alone, i, &[])?;
            return Ok(Pipeline { tx: i, rule, links: Vec::new(), clamped: false, trained: false });
        }
        Algorithm::InfiniteBackhaul => (vec![CovMatrix::zeros(s.n()); coop.len()], None, false),
        Algorithm::Unshaped => {
            let hr = unshaped_model(s, i, &rates)?;
            let clamped = hr.iter().any(|h| h.clamped);
            (hr.into_iter().map(|h| h.q_q).collect(), Some(vec![CovMatrix::identity(s.n()); coop.len()]), clamped)
        }
        Algorithm::Shaped => {
            let sol = optimize_shaping(s, i, &rates, &cfg.solver)?;
            (sol.q_q, Some(sol.b), sol.clamped)
        }
        Algorithm::WzBound => unreachable!("the bound has no estimator"),
    };
    let train = cfg.mode == Mode::Trained && rate > 0 && rate <= cfg.lloyd.max_rate;
    if let (true, Some(bs)) = (train, &shapings) {
        let mut links = Vec::with_capacity(coop.len());
        let mut empirical = Vec::with_capacity(coop.len());
        for (&k, b) in coop.iter().zip(bs) {
            let (cb, q) = train_link(s, cfg, rate, k, i, b)?;
            links.push(LinkQuantizer::Trained(cb));
            empirical.push(q);
        }
        let rule = fusion::fusion_weights(s, i, &empirical)?;
        return Ok(Pipeline { tx: i, rule, links, clamped, trained: true });
    }
    let links = gammas
        .iter()
        .zip(&qq)
        .map(|(g, q)| AnalyticQuantizer::new(g, q).map(LinkQuantizer::Analytic))
        .collect::<Result<Vec<_>>>()?;
    let rule = fusion::fusion_weights(s, i, &qq)?;
    Ok(Pipeline { tx: i, rule, links, clamped, trained: false })
}

/// Centralized MSE from the unquantized estimates of TX `i` and its cooperators.
pub fn wz_bound_for(s: &Scenario, i: usize) -> Result<f64> {
    let mut errs = vec![s.regularized_error(i)];
    errs.extend(s.coop(i).iter().map(|&k| s.regularized_error(k)));
    let refs: Vec<&CMat> = errs.iter().collect();
    fusion::centralized_bound(s.q_h().matrix(), &refs)
}

fn sort_records(records: &mut [SweepRecord]) {
    records.sort_by(|a, b| (a.algorithm, a.rate, a.tx).cmp(&(b.algorithm, b.rate, b.tx)));
}

fn meta(s: &Scenario, cfg: &SweepConfig) -> SweepMeta {
    SweepMeta { seed: cfg.seed, trials: cfg.trials, scenario_digest: scenario_digest(s), mode: cfg.mode }
}

fn squared_error(h: &CVec, est: &CVec) -> f64 {
    (h - est).norm_squared() / h.len() as f64
}

pub fn run_mse_sweep(s: &Scenario, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate(s)?;
    let sampler = ScenarioSampler::new(s);
    let mut records = Vec::new();
    for &rate in &cfg.rates {
        let s_r = s.clone().with_uniform_rate(rate);
        let mut pipelines = Vec::new();
        for &alg in &cfg.algorithms {
            for &i in &cfg.tx {
                if alg == Algorithm::WzBound {
                    let bound = wz_bound_for(&s_r, i)?;
                    records.push(SweepRecord {
                        rate,
                        algorithm: alg,
                        tx: Some(i),
                        mse: bound,
                        mse_ci95: 0.0,
                        predicted_mse: bound,
                        sum_rate: None,
                        sum_rate_ci95: None,
                        clamped: false,
                        trained: false,
                    });
                } else {
                    pipelines.push((alg, build_pipeline(&s_r, alg, i, rate, cfg)?));
                }
            }
        }
        let stats = monte_carlo(cfg.trials, cfg.seed, pipelines.len(), |rng| {
            let d = draw(&s_r, &sampler, rng)?;
            pipelines.iter().map(|(_, p)| Ok(squared_error(&d.h, &p.estimate(&d)?))).collect()
        })?;
        for ((alg, p), (mse, ci)) in pipelines.iter().zip(stats) {
            records.push(SweepRecord {
                rate,
                algorithm: *alg,
                tx: Some(p.tx),
                mse,
                mse_ci95: ci,
                predicted_mse: p.rule.predicted_mse,
                sum_rate: None,
                sum_rate_ci95: None,
                clamped: p.clamped,
                trained: p.trained,
            });
        }
    }
    sort_records(&mut records);
    Ok(SweepResult { records, meta: meta(s, cfg) })
}

/// Sum over receivers of `log2(1 + SINR)` when TX `i` transmits row `i` of the
/// zero-forcing precoder built from its own estimate, for `M = N = 1`.
pub fn zf_sum_rate(h: &CVec, estimates: &[CVec], dims: Dims, power: f64, mode: PowerMode) -> Result<f64> {
    if dims.m != 1 || dims.n_rx != 1 {
        return Err(Error::InvalidModel("zero-forcing sum rate needs single-antenna TXs and RXs".into()));
    }
    let (k, l) = (dims.k, dims.l);
    if l > k {
        return Err(Error::InvalidModel(format!("{l} receivers cannot be served by {k} single-antenna TXs")));
    }
    if estimates.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: estimates.len() });
    }
    if let Some(v) = std::iter::once(h).chain(estimates).find(|v| v.len() != dims.n()) {
        return Err(Error::DimensionMismatch { expected: dims.n(), got: v.len() });
    }
    let to_matrix = |v: &CVec| CMat::from_column_slice(l, k, v.as_slice());
    let mut precoder = CMat::zeros(k, l);
    for (i, est) in estimates.iter().enumerate() {
        let h_i = to_matrix(est);
        let t = match linalg::inv_hpd(&(&h_i * h_i.adjoint()), "estimated channel Gram matrix") {
            Ok(inv) => h_i.adjoint() * inv,
            Err(_) => {
                log::debug!("TX {} estimate is rank deficient; its precoder row is zero", i + 1);
                continue;
            }
        };
        let norm = match mode {
            PowerMode::PerTx => t.row(i).norm() / power.sqrt(),
            PowerMode::SumPower => t.norm() / (k as f64 * power).sqrt(),
        };
        if norm > 0.0 && norm.is_finite() {
            precoder.row_mut(i).copy_from(&(t.row(i) / linalg::c(norm)));
        }
    }
    let g = to_matrix(h) * precoder;
    Ok((0..l)
        .map(|r| {
            let signal = g[(r, r)].norm_sqr();
            let interference: f64 = (0..l).filter(|&j| j != r).map(|j| g[(r, j)].norm_sqr()).sum();
            (1.0 + signal / (interference + 1.0)).log2()
        })
        .sum())
}

/// As [`run_mse_sweep`] with every TX estimating, reporting the network sum
/// rate and the TX-averaged MSE; always includes the unquantized baseline.
pub fn run_sumrate_sweep(s: &Scenario, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate(s)?;
    if cfg.algorithms.contains(&Algorithm::WzBound) {
        return Err(Error::Config("wz_bound has no estimator for a sum-rate sweep".into()));
    }
    let mut algorithms = cfg.algorithms.clone();
    if !algorithms.contains(&Algorithm::InfiniteBackhaul) {
        algorithms.push(Algorithm::InfiniteBackhaul);
    }
    let dims = s.dims();
    let sampler = ScenarioSampler::new(s);
    let mut records = Vec::new();
    for &rate in &cfg.rates {
        let s_r = s.clone().with_uniform_rate(rate);
        let sets = algorithms
            .iter()
            .map(|&alg| (0..s.k()).map(|i| build_pipeline(&s_r, alg, i, rate, cfg)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let stats = monte_carlo(cfg.trials, cfg.seed, 2 * sets.len(), |rng| {
            let d = draw(&s_r, &sampler, rng)?;
            let mut out = Vec::with_capacity(2 * sets.len());
            for set in &sets {
                let ests = set.iter().map(|p| p.estimate(&d)).collect::<Result<Vec<_>>>()?;
                out.push(zf_sum_rate(&d.h, &ests, dims, cfg.power, cfg.power_mode)?);
                out.push(ests.iter().map(|e| squared_error(&d.h, e)).sum::<f64>() / ests.len() as f64);
            }
            Ok(out)
        })?;
        for (j, (&alg, set)) in algorithms.iter().zip(&sets).enumerate() {
            let (rate_mean, rate_ci) = stats[2 * j];
            let (mse, mse_ci) = stats[2 * j + 1];
            records.push(SweepRecord {
                rate,
                algorithm: alg,
                tx: None,
                mse,
                mse_ci95: mse_ci,
                predicted_mse: set.iter().map(|p| p.rule.predicted_mse).sum::<f64>() / set.len() as f64,
                sum_rate: Some(rate_mean),
                sum_rate_ci95: Some(rate_ci),
                clamped: set.iter().any(|p| p.clamped),
                trained: set.iter().any(|p| p.trained),
            });
        }
    }
    sort_records(&mut records);
    Ok(SweepResult { records, meta: meta(s, cfg) })
}

/// Sweep block of an experiment document; TX ids are 1-based.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithms: Option<Vec<Algorithm>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Per-TX transmit power in dB relative to the unit noise power.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_mode: Option<PowerMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    /// Total coordination budget for allocation runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u32>,
}

/// Experiment document: a scenario plus sweep and solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioDoc,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub lloyd: Option<LloydOptions>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    /// Resolved sweep settings; unset fields take [`SweepConfig::default`] values.
    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let mut cfg = SweepConfig { solver: self.solver.clone(), ..SweepConfig::default() };
        let b = &self.sweep;
        if let Some(r) = &b.rates {
            cfg.rates = r.clone();
        }
        if let Some(a) = &b.algorithms {
            cfg.algorithms = a.clone();
        }
        if let Some(m) = b.mode {
            cfg.mode = m;
        }
        if let Some(t) = b.trials {
            cfg.trials = t;
        }
        if let Some(tx) = &b.tx {
            cfg.tx = tx
                .iter()
                .map(|&i| i.checked_sub(1).ok_or_else(|| Error::Config("TX ids are 1-based".into())))
                .collect::<Result<_>>()?;
        }
        if let Some(s) = b.seed {
            cfg.seed = s;
        }
        if let Some(db) = b.power_db {
            cfg.power = 10f64.powf(db / 10.0);
        }
        if let Some(p) = b.power_mode {
            cfg.power_mode = p;
        }
        if let Some(n) = b.train_samples {
            cfg.train_samples = n;
        }
        if let Some(l) = &self.lloyd {
            cfg.lloyd = l.clone();
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use crate::model::two_tx_diagonal;

    fn broadcast() -> Scenario {
        two_tx_diagonal(&[0.1, 0.9, 0.1, 0.9], &[0.9, 0.1, 0.9, 0.1]).unwrap()
    }

    fn small_cfg(trials: usize) -> SweepConfig {
        SweepConfig { rates: vec![0, 6, 12], trials, seed: 3, ..SweepConfig::default() }
    }

    #[test]
    fn perfect_csi_identity_channel() {
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let h = CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
        let r = zf_sum_rate(&h, &[h.clone(), h.clone()], dims, 100.0, PowerMode::PerTx).unwrap();
        assert_eq!(r, 2.0 * 101f64.log2());
    }

    #[test]
    fn rank_deficient_estimate_silences_its_row() {
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let h = CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
        let r = zf_sum_rate(&h, &[CVec::zeros(4), h.clone()], dims, 100.0, PowerMode::PerTx).unwrap();
        // Receiver 2 still gets its stream from TX 2; receiver 1 gets nothing.
        assert!((r - 101f64.log2()).abs() < 1e-12);
        assert!(zf_sum_rate(&h, &[h.clone()], dims, 100.0, PowerMode::PerTx).is_err());
        let multi = Dims::new(2, 2, 2, 1).unwrap();
        assert!(zf_sum_rate(&CVec::zeros(8), &[CVec::zeros(8), CVec::zeros(8)], multi, 1.0, PowerMode::PerTx).is_err());
    }

    #[test]
    fn sum_power_normalization() {
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let h = CVec::from_vec(vec![C64::new(2.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
        // T = diag(1/2, 1); ‖T‖_F² = 5/4 scaled to 200: G = diag(2·s/2, s) with s² = 160.
        let r = zf_sum_rate(&h, &[h.clone(), h.clone()], dims, 100.0, PowerMode::SumPower).unwrap();
        assert!((r - 2.0 * 161f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_correct() {
        let f = |rng: &mut ChaCha8Rng| Ok(vec![linalg::standard_complex_normal(1, rng)[0].norm_sqr()]);
        let a = monte_carlo(5000, 9, 1, f).unwrap();
        let b = monte_carlo(5000, 9, 1, f).unwrap();
        assert_eq!(a, b);
        assert!((a[0].0 - 1.0).abs() < 3.0 * a[0].1);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| monte_carlo(5000, 9, 1, f).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn sweep_matches_closed_form() {
        let s = broadcast();
        let res = run_mse_sweep(&s, &small_cfg(20_000)).unwrap();
        assert_eq!(res.records.len(), 3 * 4);
        for r in &res.records {
            assert!(r.mse > 0.0);
            if r.algorithm != Algorithm::WzBound {
                assert!((r.mse - r.predicted_mse).abs() < 4.0 * r.mse_ci95 + 1e-3 * r.predicted_mse, "{r:?}");
            }
        }
        let wz: Vec<f64> = res.records.iter().filter(|r| r.algorithm == Algorithm::WzBound).map(|r| r.mse).collect();
        assert!(wz.windows(2).all(|w| w[0] == w[1]));
        // Rate 0: both quantized algorithms reduce to no cooperation.
        let nc = res.find(Algorithm::NoCoop, 0, Some(0)).unwrap();
        assert_eq!(res.find(Algorithm::Shaped, 0, Some(0)).unwrap().mse, nc.mse);
        assert_eq!(res.find(Algorithm::Unshaped, 0, Some(0)).unwrap().mse, nc.mse);
    }

    #[test]
    fn csv_layout() {
        let s = broadcast();
        let cfg = SweepConfig { rates: vec![4], trials: 100, ..SweepConfig::default() };
        let res = run_mse_sweep(&s, &cfg).unwrap();
        let csv = res.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 7);
        assert_eq!(row[0], "4");
        assert_eq!(row[1], "shaped");
        assert_eq!(row[2], "1");
        assert_eq!(row[5], "");
        assert_eq!(csv, run_mse_sweep(&s, &cfg).unwrap().to_csv());
    }

    #[test]
    fn sumrate_rows_and_baseline() {
        let s = broadcast();
        let cfg = SweepConfig {
            rates: vec![4, 8],
            algorithms: vec![Algorithm::Shaped, Algorithm::Unshaped, Algorithm::NoCoop],
            trials: 500,
            ..SweepConfig::default()
        };
        let res = run_sumrate_sweep(&s, &cfg).unwrap();
        assert_eq!(res.records.len(), 2 * 3 + 2);
        let base: Vec<f64> = res
            .records
            .iter()
            .filter(|r| r.algorithm == Algorithm::InfiniteBackhaul)
            .map(|r| r.sum_rate.unwrap())
            .collect();
        assert_eq!(base[0], base[1]);
        let bad = SweepConfig { algorithms: vec![Algorithm::WzBound], ..cfg };
        assert!(run_sumrate_sweep(&s, &bad).is_err());
    }

    #[test]
    fn trained_mode_runs_below_cap() {
        let s = broadcast();
        let cfg = SweepConfig {
            rates: vec![2, 20],
            algorithms: vec![Algorithm::Unshaped],
            mode: Mode::Trained,
            trials: 2000,
            train_samples: 4000,
            lloyd: LloydOptions { max_rate: 4, max_iters: 30, ..LloydOptions::default() },
            ..SweepConfig::default()
        };
        let res = run_mse_sweep(&s, &cfg).unwrap();
        let low = res.find(Algorithm::Unshaped, 2, Some(0)).unwrap();
        let high = res.find(Algorithm::Unshaped, 20, Some(0)).unwrap();
        assert!(low.trained && !high.trained);
        assert!((low.mse - low.predicted_mse).abs() < 0.1 * low.predicted_mse, "{low:?}");
    }

    #[test]
    fn config_validation() {
        let s = broadcast();
        assert!(run_mse_sweep(&s, &SweepConfig { rates: vec![], ..SweepConfig::default() }).unwrap_err().is_config());
        assert!(run_mse_sweep(&s, &SweepConfig { tx: vec![5], ..SweepConfig::default() }).unwrap_err().is_config());
        assert!(run_mse_sweep(&s, &SweepConfig { trials: 1, ..SweepConfig::default() }).unwrap_err().is_config());
    }

    #[test]
    fn experiment_document() {
        let doc = ExperimentConfig::from_json(
            r#"{"scenario":{"K":2,"L":2,"M":1,"N":1,"q_h":"identity",
                 "q_errors":[[0.1,0.9,0.1,0.9],[0.9,0.1,0.9,0.1]]},
                "sweep":{"rates":[0,2],"algorithms":["shaped","no_coop"],"mode":"trained_vq",
                         "trials":10,"tx":[2],"seed":5,"power_db":20},
                "solver":{"max_iters":50}}"#,
        )
        .unwrap();
        let cfg = doc.sweep_config().unwrap();
        assert_eq!(cfg.tx, vec![1]);
        assert_eq!(cfg.mode, Mode::Trained);
        assert!((cfg.power - 100.0).abs() < 1e-9);
        assert_eq!(cfg.solver.max_iters, 50);
        assert!(ExperimentConfig::from_json(r#"{"scenario":{"K":1,"L":1,"M":1,"N":1},"bogus":1}"#).is_err());
        let zero = ExperimentConfig { sweep: SweepBlock { tx: Some(vec![0]), ..SweepBlock::default() }, ..doc };
        assert!(zero.sweep_config().is_err());
    }
}
