//! Hexagonal multi-cell geometry, ULA spatial correlation with pathloss, and
//! feedback-limited estimation error covariances.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quadrature, CovMatrix, Dims};
use crate::error::{Error, Result};
use crate::linalg::{C64, CMat};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const QUAD_TOL: f64 = 1e-10;

/// Cellular simulation parameters. Distances are in km; pathloss `γ·d^{-ε}`
/// is evaluated with `d` in metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellularParams {
    pub r_c: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub d_0: f64,
    /// Carrier frequency (Hz).
    pub f: f64,
    /// Antenna spacing (m); `None` means half a wavelength.
    pub d_as: Option<f64>,
    /// Angle spread `θ_max − θ_min` (rad).
    pub phi: f64,
    pub sigma_e2: f64,
    /// Feedback rate per coefficient, `r_fb[k][l]` from RX `l` to TX `k`.
    pub r_fb: Vec<Vec<f64>>,
}

impl CellularParams {
    /// Parameters of the two-cell reference setting (1 km cells, 2 GHz,
    /// feedback rate 5 to the serving TX and 1 to the other).
    pub fn reference(k: usize, l: usize) -> Self {
        let r_fb = (0..k)
            .map(|tx| (0..l).map(|rx| if rx % k == tx { 5.0 } else { 1.0 }).collect())
            .collect();
        Self {
            r_c: 1.0,
            gamma: 1e9,
            epsilon: 3.0,
            d_0: 0.1,
            f: 2e9,
            d_as: None,
            phi: PI / 6.0,
            sigma_e2: 1.0,
            r_fb,
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f
    }

    pub fn antenna_spacing(&self) -> f64 {
        self.d_as.unwrap_or(0.5 * self.wavelength())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("cellular parameter {what}")));
        if !(self.r_c > 0.0) {
            return bad("r_c must be positive");
        }
        if !(self.d_0 >= 0.0 && self.d_0 < self.r_c) {
            return bad("d_0 must lie in [0, r_c)");
        }
        if !(self.f > 0.0) || !(self.phi > 0.0) || !(self.sigma_e2 > 0.0) {
            return bad("f, phi and sigma_e2 must be positive");
        }
        if self.r_fb.iter().flatten().any(|r| *r < 0.0) {
            return Err(Error::InvalidRate("negative feedback rate".into()));
        }
        Ok(())
    }
}

/// Transmitter and receiver positions (km) and per-RX angular windows (rad).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellularGeometry {
    pub tx: Vec<[f64; 2]>,
    pub rx: Vec<[f64; 2]>,
    pub theta_min: Vec<f64>,
    pub theta_max: Vec<f64>,
}

impl CellularGeometry {
    pub fn distance(&self, rx: usize, tx: usize) -> f64 {
        let (a, b) = (self.rx[rx], self.tx[tx]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}

/// Centre of hexagonal cell `j`: cell 0 at the origin, cells 1..=6 around it.
fn cell_center(j: usize, r_c: f64) -> Result<[f64; 2]> {
    match j {
        0 => Ok([0.0, 0.0]),
        1..=6 => {
            let angle = PI / 6.0 + (j - 1) as f64 * PI / 3.0;
            let d = 3f64.sqrt() * r_c;
            Ok([d * angle.cos(), d * angle.sin()])
        }
        _ => Err(Error::InvalidGeometry(format!("at most 7 hexagonal cells supported, got cell {j}"))),
    }
}

/// Flat-topped hexagon of circumradius `r` centred at the origin.
fn in_hexagon(x: f64, y: f64, r: f64) -> bool {
    let s3 = 3f64.sqrt();
    y.abs() <= 0.5 * s3 * r && s3 * x.abs() + y.abs() <= s3 * r
}

/// Places one TX at each cell centre and RX `l` uniformly in cell `l mod K`,
/// rejecting points closer than `d_0` to that cell's TX. Each RX gets an
/// angular window of width `phi` centred uniformly in `[0, 2π)`.
pub fn place_cellular<R: Rng + ?Sized>(
    p: &CellularParams,
    dims: Dims,
    rng: &mut R,
) -> Result<CellularGeometry> {
    p.validate()?;
    let tx = (0..dims.k).map(|j| cell_center(j, p.r_c)).collect::<Result<Vec<_>>>()?;
    let mut rx = Vec::with_capacity(dims.l);
    let mut theta_min = Vec::with_capacity(dims.l);
    let mut theta_max = Vec::with_capacity(dims.l);
    let half_h = 0.5 * 3f64.sqrt() * p.r_c;
    for l in 0..dims.l {
        let home = tx[l % dims.k];
        let point = loop {
            let x = rng.random_range(-p.r_c..p.r_c);
            let y = rng.random_range(-half_h..half_h);
            if in_hexagon(x, y, p.r_c) && (x * x + y * y).sqrt() >= p.d_0 {
                break [home[0] + x, home[1] + y];
            }
        };
        rx.push(point);
        let center = rng.random_range(0.0..2.0 * PI);
        theta_min.push(center - 0.5 * p.phi);
        theta_max.push(center + 0.5 * p.phi);
    }
    Ok(CellularGeometry { tx, rx, theta_min, theta_max })
}

/// `γ d^{-ε}/(θ_max−θ_min) ∫ exp(i (2π/λ) δ d_as cos θ) dθ` for antenna offset `δ = j − i`.
pub(crate) fn correlation_entry(
    gain: f64,
    offset: i64,
    wavelength: f64,
    d_as: f64,
    theta_min: f64,
    theta_max: f64,
) -> C64 {
    if offset == 0 {
        return C64::new(gain, 0.0);
    }
    let k = 2.0 * PI / wavelength * offset as f64 * d_as;
    let re = quadrature::integrate(|t| (k * t.cos()).cos(), theta_min, theta_max, QUAD_TOL);
    let im = quadrature::integrate(|t| (k * t.cos()).sin(), theta_min, theta_max, QUAD_TOL);
    C64::new(re, im) * (gain / (theta_max - theta_min))
}

/// Per-link ULA correlation `Θ_{l,k}` (M×M).
pub fn link_correlation(p: &CellularParams, m: usize, distance_km: f64, theta_min: f64, theta_max: f64) -> CMat {
    let gain = p.gamma * (1000.0 * distance_km).powf(-p.epsilon);
    let (lambda, d_as) = (p.wavelength(), p.antenna_spacing());
    let mut theta = CMat::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = correlation_entry(gain, j as i64 - i as i64, lambda, d_as, theta_min, theta_max);
            theta[(i, j)] = v;
            theta[(j, i)] = v.conj();
        }
    }
    theta
}

/// Channel covariance for the cellular layout: RX channels independent, TX
/// blocks of each RX independent, each block `Θ_{l,k}`. RX antennas are
/// treated as independent copies.
pub fn build_cellular_qh(p: &CellularParams, dims: Dims, geom: &CellularGeometry) -> Result<CovMatrix> {
    p.validate()?;
    if geom.tx.len() != dims.k || geom.rx.len() != dims.l {
        return Err(Error::InvalidGeometry(format!(
            "geometry has {} TX / {} RX, expected {} / {}",
            geom.tx.len(),
            geom.rx.len(),
            dims.k,
            dims.l
        )));
    }
    let n = dims.n();
    let mut q = CMat::zeros(n, n);
    for l in 0..dims.l {
        for k in 0..dims.k {
            let d = geom.distance(l, k);
            if d < p.d_0 {
                return Err(Error::InvalidGeometry(format!(
                    "RX {l} is {d:.4} km from TX {k}, below d_0 = {} km",
                    p.d_0
                )));
            }
            let theta = link_correlation(p, dims.m, d, geom.theta_min[l], geom.theta_max[l]);
            for a in 0..dims.n_rx {
                for i in 0..dims.m {
                    for j in 0..dims.m {
                        q[(dims.index(l, a, k, i), dims.index(l, a, k, j))] = theta[(i, j)];
                    }
                }
            }
        }
    }
    CovMatrix::new(q)
}

/// `Q_k` with the block for RX `l` equal to `2^{-r_fb[k][l]} σ_E² I`.
pub fn build_feedback_error_cov(sigma_e2: f64, r_fb: &[Vec<f64>], dims: Dims) -> Result<Vec<CovMatrix>> {
    if !(sigma_e2 > 0.0) {
        return Err(Error::Config(format!("sigma_e2 must be positive, got {sigma_e2}")));
    }
    if r_fb.len() != dims.k || r_fb.iter().any(|row| row.len() != dims.l) {
        return Err(Error::Config(format!("feedback rate table must be {}x{}", dims.k, dims.l)));
    }
    let n = dims.n();
    (0..dims.k)
        .map(|k| {
            let mut diag = vec![0.0; n];
            for l in 0..dims.l {
                let r = r_fb[k][l];
                if r < 0.0 {
                    return Err(Error::InvalidRate(format!("negative feedback rate {r}")));
                }
                let v = (-r).exp2() * sigma_e2;
                for a in 0..dims.n_rx {
                    for tx in 0..dims.k {
                        for t in 0..dims.m {
                            diag[dims.index(l, a, tx, t)] = v;
                        }
                    }
                }
            }
            CovMatrix::diag(&diag)
        })
        .collect()
}
