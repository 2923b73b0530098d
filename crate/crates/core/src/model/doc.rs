//! JSON scenario documents.
//!
//! TX indices in documents are 1-based; the library is 0-based.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_cellular_qh, build_feedback_error_cov, place_cellular, CellularGeometry, CellularParams,
    CovMatrix, Dims, Scenario,
};
use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};

/// Complex matrix as nested rows of `[re, im]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComplexRows(pub Vec<Vec<[f64; 2]>>);

impl From<&CMat> for ComplexRows {
    fn from(m: &CMat) -> Self {
        ComplexRows(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
                .collect(),
        )
    }
}

impl TryFrom<ComplexRows> for CMat {
    type Error = Error;

    fn try_from(rows: ComplexRows) -> Result<Self> {
        let nrows = rows.0.len();
        let ncols = rows.0.first().map_or(0, Vec::len);
        if rows.0.iter().any(|r| r.len() != ncols) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        Ok(CMat::from_fn(nrows, ncols, |i, j| {
            let [re, im] = rows.0[i][j];
            C64::new(re, im)
        }))
    }
}

impl From<CovMatrix> for ComplexRows {
    fn from(c: CovMatrix) -> Self {
        ComplexRows::from(c.matrix())
    }
}

impl TryFrom<ComplexRows> for CovMatrix {
    type Error = Error;

    fn try_from(rows: ComplexRows) -> Result<Self> {
        CovMatrix::new(CMat::try_from(rows)?)
    }
}

/// A covariance given as `"identity"`, a real diagonal, or a full complex matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Named(String),
    Diagonal(Vec<f64>),
    Full(ComplexRows),
}

impl MatrixSpec {
    pub fn to_cov(&self, n: usize) -> Result<CovMatrix> {
        let cov = match self {
            MatrixSpec::Named(name) if name == "identity" => CovMatrix::identity(n),
            MatrixSpec::Named(name) => {
                return Err(Error::Config(format!("unknown matrix name {name:?}")));
            }
            MatrixSpec::Diagonal(d) => CovMatrix::diag(d)?,
            MatrixSpec::Full(rows) => CovMatrix::try_from(rows.clone())?,
        };
        if cov.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: cov.dim() });
        }
        Ok(cov)
    }
}

/// Cellular block of a scenario document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellularDoc {
    #[serde(flatten)]
    pub params: CellularParams,
    /// Seed for RX placement and angular windows.
    #[serde(default)]
    pub seed: u64,
    /// Explicit geometry; drawn from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<CellularGeometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_h: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_errors: Option<Vec<MatrixSpec>>,
    /// `coop[i]` lists the TXs (1-based) that send to TX `i+1`; full cooperation when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coop: Option<Vec<Vec<usize>>>,
    /// `rates[k][i]` bits from TX `k+1` to TX `i+1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<Vec<u32>>>,
    /// Lattice constants keyed by real dimension `2n`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub m2n_overrides: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cellular: Option<CellularDoc>,
}

impl ScenarioDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.k, self.l, self.m, self.n)
    }

    /// Resolves the cellular geometry, drawing it from the seed when not given.
    pub fn cellular_geometry(&self) -> Result<Option<CellularGeometry>> {
        let Some(cell) = &self.cellular else { return Ok(None) };
        if let Some(g) = &cell.geometry {
            return Ok(Some(g.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
        Ok(Some(place_cellular(&cell.params, self.dims()?, &mut rng)?))
    }

    pub fn m2n_table(&self) -> Result<BTreeMap<u32, f64>> {
        self.m2n_overrides
            .iter()
            .map(|(k, v)| {
                let key = k
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("m2n override key {k:?} is not an integer")))?;
                Ok((key, *v))
            })
            .collect()
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        let dims = self.dims()?;
        let n = dims.n();
        let geometry = self.cellular_geometry()?;
        let q_h = match (&self.q_h, &self.cellular, &geometry) {
            (Some(spec), _, _) => spec.to_cov(n)?,
            (None, Some(cell), Some(geom)) => build_cellular_qh(&cell.params, dims, geom)?,
            _ => return Err(Error::Config("q_h is required without a cellular block".into())),
        };
        let q_err = match (&self.q_errors, &self.cellular) {
            (Some(specs), _) => specs.iter().map(|s| s.to_cov(n)).collect::<Result<Vec<_>>>()?,
            (None, Some(cell)) => build_feedback_error_cov(cell.params.sigma_e2, &cell.params.r_fb, dims)?,
            (None, None) => return Err(Error::Config("q_errors is required without a cellular block".into())),
        };
        let mut s = Scenario::new(dims, q_h, q_err)?.with_m2n_overrides(self.m2n_table()?);
        if let Some(coop) = &self.coop {
            let zero_based = coop
                .iter()
                .map(|set| {
                    set.iter()
                        .map(|&k| {
                            k.checked_sub(1)
                                .ok_or_else(|| Error::Config("TX ids in coop are 1-based".into()))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            s = s.with_coop(zero_based)?;
        }
        if let Some(rates) = &self.rates {
            s = s.with_rates(rates.clone())?;
        }
        Ok(s)
    }

    /// Fully explicit document (full matrices, no cellular block) for a scenario.
    pub fn from_scenario(s: &Scenario) -> Self {
        let d = s.dims();
        ScenarioDoc {
            k: d.k,
            l: d.l,
            m: d.m,
            n: d.n_rx,
            q_h: Some(MatrixSpec::Full(ComplexRows::from(s.q_h().matrix()))),
            q_errors: Some(
                s.q_errors().iter().map(|q| MatrixSpec::Full(ComplexRows::from(q.matrix()))).collect(),
            ),
            coop: Some(s.coop_sets().iter().map(|set| set.iter().map(|k| k + 1).collect()).collect()),
            rates: Some(s.rates().to_vec()),
            m2n_overrides: s.m2n_overrides().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            cellular: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_diagonal_document() {
        let doc = ScenarioDoc::from_json(
            r#"{"K":2,"L":2,"M":1,"N":1,"q_h":"identity",
                "q_errors":[[0.1,0.9,0.1,0.9],[0.9,0.1,0.9,0.1]],
                "coop":[[2],[1]],"rates":[[0,3],[5,0]],
                "m2n_overrides":{"8":0.07}}"#,
        )
        .unwrap();
        let s = doc.to_scenario().unwrap();
        assert_eq!(s.coop(0), &[1]);
        assert_eq!(s.rate(1, 0), 5);
        assert_eq!(s.m2n(), 0.07);
        assert_eq!(s.q_err(1).matrix()[(1, 1)].re, 0.1);
    }

    #[test]
    fn full_matrix_round_trip() {
        let doc = ScenarioDoc::from_json(
            r#"{"K":1,"L":1,"M":2,"N":1,
                "q_h":[[[1,0],[0.2,0.1]],[[0.2,-0.1],[1,0]]],
                "q_errors":[[0.5,0.5]]}"#,
        )
        .unwrap();
        let s = doc.to_scenario().unwrap();
        assert_eq!(s.q_h().matrix()[(1, 0)], C64::new(0.2, -0.1));
        let again = ScenarioDoc::from_scenario(&s).to_scenario().unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn cellular_document_builds_both_covariances() {
        let doc = ScenarioDoc::from_json(
            r#"{"K":2,"L":2,"M":2,"N":1,
                "cellular":{"r_c":1.0,"gamma":1e9,"epsilon":3,"d_0":0.1,"f":2e9,
                            "phi":0.5235987755982988,"sigma_e2":1.0,
                            "r_fb":[[5,1],[1,5]],"seed":3}}"#,
        )
        .unwrap();
        let s = doc.to_scenario().unwrap();
        assert_eq!(s.n(), 8);
        assert_eq!(s.q_err(0).matrix()[(0, 0)].re, 1.0 / 32.0);
    }

    #[test]
    fn bad_documents() {
        assert!(ScenarioDoc::from_json(r#"{"K":2,"L":2,"M":1,"N":1,"q_h":"ones","q_errors":[[1,1,1,1],[1,1,1,1]]}"#)
            .unwrap()
            .to_scenario()
            .is_err());
        assert!(ScenarioDoc::from_json(r#"{"K":2,"L":2,"M":1,"N":1,"q_h":"identity","q_errors":[[1,1,1],[1,1,1,1]]}"#)
            .unwrap()
            .to_scenario()
            .is_err());
        assert!(ScenarioDoc::from_json(r#"{"K":2,"L":2,"M":1,"N":1,"q_h":"identity"}"#)
            .unwrap()
            .to_scenario()
            .is_err());
    }
}
