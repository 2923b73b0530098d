//! Integer split of a total coordination budget across links, minimizing the
//! average shaped fusion MSE over transmitters.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::RwLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Scenario;
use crate::shaping::{optimize_shaping, SolverOptions};

pub const MAX_CANDIDATES: u128 = 100_000;

/// Relative tolerance under which two average MSEs count as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exhaustive,
    Alternating,
}

#[derive(Clone, Debug, Serialize)]
pub struct Allocation {
    /// `(from, to)` for each entry of `link_rates`.
    pub links: Vec<(usize, usize)>,
    pub link_rates: Vec<u32>,
    /// `rates[k][i]` bits from TX `k` to TX `i`.
    pub rates: Vec<Vec<u32>>,
    pub avg_mse: f64,
    pub per_tx_mse: Vec<f64>,
    pub method: Method,
}

impl Allocation {
    pub fn rate(&self, from: usize, to: usize) -> u32 {
        self.rates[from][to]
    }

    pub fn total(&self) -> u32 {
        self.link_rates.iter().sum()
    }
}

/// One evaluated split.
#[derive(Clone, Debug, Serialize)]
pub struct Candidate {
    pub link_rates: Vec<u32>,
    pub avg_mse: f64,
    pub per_tx_mse: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExhaustiveResult {
    pub best: Allocation,
    /// Every split in enumeration order.
    pub candidates: Vec<Candidate>,
}

/// Directed links `(k, i)` ordered by receiving TX `i`, then by `A_i` order.
pub fn links(s: &Scenario) -> Vec<(usize, usize)> {
    (0..s.k()).flat_map(|i| s.coop(i).iter().map(move |&k| (k, i))).collect()
}

/// Column label of a link with 1-based TX ids, e.g. `r_21`.
pub fn link_label(link: (usize, usize)) -> String {
    format!("r_{}{}", link.0 + 1, link.1 + 1)
}

/// Number of nonnegative integer splits of `total` into `parts` parts.
pub fn composition_count(total: u32, parts: usize) -> u128 {
    if parts == 0 {
        return u128::from(total == 0);
    }
    // C(total + parts − 1, parts − 1), computed incrementally; saturates on overflow.
    let mut acc: u128 = 1;
    for j in 1..parts as u128 {
        acc = match acc.checked_mul(total as u128 + j) {
            Some(v) => v / j,
            None => return u128::MAX,
        };
    }
    acc
}

/// All nonnegative integer splits of `total` into `parts` parts, lexicographic.
pub fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    fn rec(left: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for r in 0..=left {
            prefix.push(r);
            rec(left - r, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts == 0 {
        if total == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

/// Memoized per-TX shaped MSE, keyed by the rates on that TX's incoming links.
pub struct Evaluator<'a> {
    s: &'a Scenario,
    opts: SolverOptions,
    links: Vec<(usize, usize)>,
    cache: RwLock<HashMap<(usize, Vec<u32>), f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(s: &'a Scenario, opts: SolverOptions) -> Self {
        Self { s, opts, links: links(s), cache: RwLock::new(HashMap::new()) }
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    fn tx_mse(&self, i: usize, incoming: Vec<u32>) -> Result<f64> {
        let key = (i, incoming);
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = optimize_shaping(self.s, i, &key.1, &self.opts)?.objective_exact;
        self.cache.write().expect("cache lock").insert(key, v);
        Ok(v)
    }

    /// Average and per-TX MSE for rates given in [`links`] order.
    pub fn evaluate(&self, link_rates: &[u32]) -> Result<(f64, Vec<f64>)> {
        if link_rates.len() != self.links.len() {
            return Err(Error::DimensionMismatch { expected: self.links.len(), got: link_rates.len() });
        }
        let per_tx = (0..self.s.k())
            .map(|i| {
                let incoming = self
                    .links
                    .iter()
                    .zip(link_rates)
                    .filter(|((_, to), _)| *to == i)
                    .map(|(_, &r)| r)
                    .collect();
                self.tx_mse(i, incoming)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((per_tx.iter().sum::<f64>() / per_tx.len() as f64, per_tx))
    }

    fn allocation(&self, link_rates: Vec<u32>, method: Method) -> Result<Allocation> {
        let (avg_mse, per_tx_mse) = self.evaluate(&link_rates)?;
        let k = self.s.k();
        let mut rates = vec![vec![0; k]; k];
        for (&(from, to), &r) in self.links.iter().zip(&link_rates) {
            rates[from][to] = r;
        }
        Ok(Allocation { links: self.links.clone(), link_rates, rates, avg_mse, per_tx_mse, method })
    }
}

fn spread(rates: &[u32]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let mean = rates.iter().map(|&r| r as f64).sum::<f64>() / rates.len() as f64;
    rates.iter().map(|&r| (r as f64 - mean).powi(2)).sum()
}

/// Candidate order: lower MSE, then (within tie tolerance) more balanced, then lexicographic.
fn better(a: &Candidate, b: &Candidate) -> Ordering {
    let scale = a.avg_mse.abs().max(b.avg_mse.abs());
    if (a.avg_mse - b.avg_mse).abs() > TIE_TOL * scale {
        return a.avg_mse.total_cmp(&b.avg_mse);
    }
    spread(&a.link_rates).total_cmp(&spread(&b.link_rates)).then_with(|| a.link_rates.cmp(&b.link_rates))
}

pub fn allocate_exhaustive(s: &Scenario, total: u32, opts: &SolverOptions) -> Result<ExhaustiveResult> {
    let ev = Evaluator::new(s, opts.clone());
    let count = composition_count(total, ev.links.len());
    if count > MAX_CANDIDATES {
        return Err(Error::TooManyCandidates { count, limit: MAX_CANDIDATES });
    }
    let splits = compositions(total, ev.links.len());
    let candidates = splits
        .into_par_iter()
        .map(|link_rates| {
            let (avg_mse, per_tx_mse) = ev.evaluate(&link_rates)?;
            Ok(Candidate { link_rates, avg_mse, per_tx_mse })
        })
        .collect::<Result<Vec<_>>>()?;
    let winner = candidates.iter().min_by(|a, b| better(a, b)).expect("at least one split");
    let best = ev.allocation(winner.link_rates.clone(), Method::Exhaustive)?;
    Ok(ExhaustiveResult { best, candidates })
}

/// Greedy single-bit moves between links from `init` (rates in [`links`]
/// order), taking the best strictly improving move until none remains.
pub fn allocate_alternating(s: &Scenario, init: &[u32], opts: &SolverOptions) -> Result<Allocation> {
    let ev = Evaluator::new(s, opts.clone());
    let (mut f, _) = ev.evaluate(init)?;
    let mut current = init.to_vec();
    loop {
        let mut best: Option<Candidate> = None;
        for from in 0..current.len() {
            if current[from] == 0 {
                continue;
            }
            for to in 0..current.len() {
                if to == from {
                    continue;
                }
                let mut moved = current.clone();
                moved[from] -= 1;
                moved[to] += 1;
                let (avg_mse, per_tx_mse) = ev.evaluate(&moved)?;
                let cand = Candidate { link_rates: moved, avg_mse, per_tx_mse };
                if best.as_ref().is_none_or(|b| better(&cand, b) == Ordering::Less) {
                    best = Some(cand);
                }
            }
        }
        match best {
            Some(c) if c.avg_mse < f - TIE_TOL * f.abs() => {
                f = c.avg_mse;
                current = c.link_rates;
            }
            _ => break,
        }
    }
    ev.allocation(current, Method::Alternating)
}
