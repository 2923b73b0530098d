//! Linear MMSE fusion of a local estimate with quantized estimates received
//! from cooperating transmitters.

use rand::Rng;
use serde::Serialize;

use crate::digest;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};
use crate::model::{ComplexGaussian, CovMatrix, Scenario};

/// Statistics a fusion rule was built from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionInputs {
    pub q_h: CovMatrix,
    pub q_i: CovMatrix,
    pub q_k: Vec<CovMatrix>,
    pub q_qq: Vec<CovMatrix>,
}

/// Reconstruction `h̃ = W_ii ĥ^(i) + Σ_k W_ki z_ki` for one transmitter.
#[derive(Clone, Debug)]
pub struct FusionRule {
    pub tx: usize,
    /// Cooperators, in the order of `w_k`.
    pub coop: Vec<usize>,
    pub w_ii: CMat,
    pub w_k: Vec<CMat>,
    pub predicted_mse: f64,
    pub inputs: FusionInputs,
    pub inputs_digest: String,
}

struct Link {
    p: CMat,
    a: CMat,
}

fn link(q_h: &CMat, q_k: &CMat, q_qq: &CMat) -> Result<Link> {
    let gamma = q_h + q_k;
    let p = &gamma - q_qq;
    let a = linalg::solve_hpd(&gamma, &p, "Q_h + Q_k")?.adjoint();
    Ok(Link { p, a })
}

/// Whether a link's quantized output carries no information (`Q_Q = Γ`).
pub fn is_silent(gamma: &CMat, q_qq: &CMat) -> bool {
    let scale = linalg::herm_eigenvalues(gamma).last().copied().unwrap_or(0.0);
    let slack = linalg::herm_eigenvalues(&(gamma - q_qq)).last().copied().unwrap_or(0.0);
    slack <= 1e-12 * scale
}

fn check_inputs(s: &Scenario, i: usize, qq: &[CovMatrix]) -> Result<()> {
    if i >= s.k() {
        return Err(Error::Config(format!("TX index {i} out of range")));
    }
    let c_i = s.coop(i).len();
    if qq.len() != c_i {
        return Err(Error::DimensionMismatch { expected: c_i, got: qq.len() });
    }
    if let Some(q) = qq.iter().find(|q| q.dim() != s.n()) {
        return Err(Error::DimensionMismatch { expected: s.n(), got: q.dim() });
    }
    Ok(())
}

/// Optimal weights `[W_ii, W_l1i, …] = Q_h Υ Ω^{-1}` for TX `i`, given the
/// quantization error covariances of its incoming links (ordered as `A_i`).
pub fn fusion_weights(s: &Scenario, i: usize, qq: &[CovMatrix]) -> Result<FusionRule> {
    check_inputs(s, i, qq)?;
    let n = s.n();
    let coop = s.coop(i).to_vec();
    let q_h = s.q_h().matrix();
    let q_i = s.regularized_error(i);
    // Silent links get zero weight and stay out of the linear system.
    let mut active = Vec::with_capacity(coop.len());
    let mut links = Vec::with_capacity(coop.len());
    for (j, (&k, q)) in coop.iter().zip(qq).enumerate() {
        let q_k = s.regularized_error(k);
        if !is_silent(&(q_h + &q_k), q.matrix()) {
            active.push(j);
            links.push(link(q_h, &q_k, q.matrix())?);
        }
    }

    let blocks = links.len() + 1;
    let mut omega = CMat::zeros(blocks * n, blocks * n);
    let mut upsilon = CMat::zeros(n, blocks * n);
    omega.view_mut((0, 0), (n, n)).copy_from(&(q_h + &q_i));
    upsilon.view_mut((0, 0), (n, n)).copy_from(&linalg::identity(n));
    for (j, lj) in links.iter().enumerate() {
        let r = (j + 1) * n;
        upsilon.view_mut((0, r), (n, n)).copy_from(&lj.a.adjoint());
        omega.view_mut((0, r), (n, n)).copy_from(&(q_h * lj.a.adjoint()));
        omega.view_mut((r, 0), (n, n)).copy_from(&(&lj.a * q_h));
        for (t, lt) in links.iter().enumerate() {
            let col = (t + 1) * n;
            let block = if t == j { lj.p.clone() } else { &lj.a * q_h * lt.a.adjoint() };
            omega.view_mut((r, col), (n, n)).copy_from(&block);
        }
    }
    let cond = linalg::cond_herm(&omega);
    if !cond.is_finite() {
        return Err(Error::IllConditioned { cond, context: format!("fusion system of TX {i}") });
    }
    if cond > linalg::COND_WARN {
        log::warn!("fusion system of TX {i} has condition number {cond:.3e}");
    }
    // Ω is Hermitian, so W^H = Ω^{-1} Υ^H Q_h.
    let w_h = linalg::solve_hpd(&omega, &(upsilon.adjoint() * q_h), "Ω")
        .map_err(|_| Error::IllConditioned { cond, context: format!("fusion system of TX {i}") })?;
    let w = w_h.adjoint();
    let predicted_mse = linalg::trace_re(&(q_h - &w * upsilon.adjoint() * q_h)) / n as f64;
    let w_ii = w.view((0, 0), (n, n)).into_owned();
    let mut w_k = vec![CMat::zeros(n, n); coop.len()];
    for (b, &j) in active.iter().enumerate() {
        w_k[j] = w.view((0, (b + 1) * n), (n, n)).into_owned();
    }

    let inputs = FusionInputs {
        q_h: s.q_h().clone(),
        q_i: s.q_err(i).clone(),
        q_k: coop.iter().map(|&k| s.q_err(k).clone()).collect(),
        q_qq: qq.to_vec(),
    };
    let inputs_digest = digest::of_json(&inputs);
    Ok(FusionRule { tx: i, coop, w_ii, w_k, predicted_mse, inputs, inputs_digest })
}

/// `Λ_k = ((Q_h+Q_k) P^{-1} (Q_h+Q_k) − Q_h)^{-1}` with `P = Q_h + Q_k − Q_Qk`.
pub fn lambda_term(q_h: &CMat, q_k: &CMat, q_qq: &CMat) -> Result<CMat> {
    let gamma = q_h + q_k;
    if is_silent(&gamma, q_qq) {
        return Ok(CMat::zeros(gamma.nrows(), gamma.ncols()));
    }
    let p = &gamma - q_qq;
    let inner = &gamma * linalg::solve_hpd(&p, &gamma, "P = Q_h + Q_k − Q_Q")? - q_h;
    linalg::inv_hpd(&inner, "Λ term")
}

/// `(1/n) tr(Q_h^{-1} + Q_i^{-1} + Σ_k Λ_k)^{-1}` from raw matrices.
pub fn closed_form_mse_raw(q_h: &CMat, q_i: &CMat, links: &[(CMat, CMat)]) -> Result<f64> {
    let n = q_h.nrows();
    let mut info = linalg::inv_hpd(q_h, "Q_h")? + linalg::inv_hpd(q_i, "Q_i")?;
    for (q_k, q_qq) in links {
        info += lambda_term(q_h, q_k, q_qq)?;
    }
    Ok(linalg::trace_re(&linalg::inv_hpd(&info, "information matrix")?) / n as f64)
}

/// Predicted per-dimension MSE `D^(i)opt` of the optimal linear fusion.
pub fn closed_form_mse(s: &Scenario, i: usize, qq: &[CovMatrix]) -> Result<f64> {
    check_inputs(s, i, qq)?;
    let links: Vec<(CMat, CMat)> = s
        .coop(i)
        .iter()
        .zip(qq)
        .map(|(&k, q)| (s.regularized_error(k), q.matrix().clone()))
        .collect();
    closed_form_mse_raw(s.q_h().matrix(), &s.regularized_error(i), &links)
}

/// Per-dimension MSE of arbitrary weights under the gain-plus-noise model:
/// `(1/n) tr(E Q_h E^H + Σ_k W_k (A_k Q_k A_k^H + A_k Q_Qk) W_k^H + W_ii Q_i W_ii^H)`
/// with `E = Σ_k W_k A_k + W_ii − I`.
pub fn mse_for_weights(s: &Scenario, i: usize, qq: &[CovMatrix], w_ii: &CMat, w_k: &[CMat]) -> Result<f64> {
    check_inputs(s, i, qq)?;
    if w_k.len() != qq.len() {
        return Err(Error::DimensionMismatch { expected: qq.len(), got: w_k.len() });
    }
    let n = s.n();
    let q_h = s.q_h().matrix();
    let mut bias = w_ii - linalg::identity(n);
    let mut noise = w_ii * s.q_err(i).matrix() * w_ii.adjoint();
    for ((&k, q), w) in s.coop(i).iter().zip(qq).zip(w_k) {
        let l = link(q_h, s.q_err(k).matrix(), q.matrix())?;
        bias += w * &l.a;
        let own = &l.a * s.q_err(k).matrix() * l.a.adjoint() + &l.a * q.matrix();
        noise += w * own * w.adjoint();
    }
    Ok(linalg::trace_re(&(&bias * q_h * bias.adjoint() + noise)) / n as f64)
}

impl FusionRule {
    /// Applies the rule; `received` must follow the rule's cooperator order.
    pub fn fuse(&self, local: &CVec, received: &[CVec]) -> Result<CVec> {
        if received.len() != self.w_k.len() {
            return Err(Error::DimensionMismatch { expected: self.w_k.len(), got: received.len() });
        }
        let n = self.w_ii.nrows();
        if let Some(v) = std::iter::once(local).chain(received).find(|v| v.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
        let mut out = &self.w_ii * local;
        for (w, z) in self.w_k.iter().zip(received) {
            out += w * z;
        }
        Ok(out)
    }

    /// MSE of this rule's weights evaluated through the quadratic form.
    pub fn quadratic_mse(&self, s: &Scenario) -> Result<f64> {
        mse_for_weights(s, self.tx, &self.inputs.q_qq, &self.w_ii, &self.w_k)
    }
}

pub fn fuse(rule: &FusionRule, local: &CVec, received: &[CVec]) -> Result<CVec> {
    rule.fuse(local, received)
}

/// `(1/n) tr(Q_h^{-1} + Σ_j Q_j^{-1})^{-1}`: MSE of the centralized estimator
/// from all listed unquantized estimates.
pub fn centralized_bound(q_h: &CMat, errors: &[&CMat]) -> Result<f64> {
    let n = q_h.nrows();
    let mut info = linalg::inv_hpd(q_h, "Q_h")?;
    for q in errors {
        info += linalg::inv_hpd(q, "error covariance")?;
    }
    Ok(linalg::trace_re(&linalg::inv_hpd(&info, "information matrix")?) / n as f64)
}

/// Two-TX Wyner–Ziv bound `(1/n) tr(Q_1^{-1} + Q_2^{-1} + Q_h^{-1})^{-1}`.
pub fn wyner_ziv_bound(q_h: &CMat, q_1: &CMat, q_2: &CMat) -> Result<f64> {
    centralized_bound(q_h, &[q_1, q_2])
}

/// Monte Carlo MSE of the exact conditional-mean estimator of `h` from all
/// unquantized estimates `ĥ^(j) = h + e^(j)`, built from the joint covariance.
pub fn brute_force_joint_mmse<R: Rng + ?Sized>(
    q_h: &CovMatrix,
    errors: &[CovMatrix],
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = q_h.dim();
    let m = errors.len();
    if let Some(q) = errors.iter().find(|q| q.dim() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: q.dim() });
    }
    let mut c_yy = CMat::zeros(m * n, m * n);
    let mut c_hy = CMat::zeros(n, m * n);
    for a in 0..m {
        c_hy.view_mut((0, a * n), (n, n)).copy_from(q_h.matrix());
        for b in 0..m {
            let block = if a == b { q_h.matrix() + errors[a].matrix() } else { q_h.matrix().clone() };
            c_yy.view_mut((a * n, b * n), (n, n)).copy_from(&block);
        }
    }
    let gain = match linalg::solve_hpd(&c_yy, &c_hy.adjoint(), "joint covariance") {
        Ok(g) => g.adjoint(),
        Err(_) => {
            let ridge = 1e-12 * linalg::trace_re(&c_yy) / (m * n) as f64;
            let reg = &c_yy + linalg::identity(m * n) * c(ridge);
            linalg::solve_hpd(&reg, &c_hy.adjoint(), "joint covariance")?.adjoint()
        }
    };
    let channel = ComplexGaussian::new(q_h);
    let noise: Vec<ComplexGaussian> = errors.iter().map(ComplexGaussian::new).collect();
    let mut total = 0.0;
    let mut y = CVec::zeros(m * n);
    for _ in 0..trials {
        let h = channel.sample(rng);
        for (a, e) in noise.iter().enumerate() {
            y.rows_mut(a * n, n).copy_from(&(&h + e.sample(rng)));
        }
        total += (&h - &gain * &y).norm_squared();
    }
    Ok(total / (trials as f64 * n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, real_diag, C64};
    use crate::model::two_tx_diagonal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn broadcast() -> Scenario {
        two_tx_diagonal(&[0.1, 0.9, 0.1, 0.9], &[0.9, 0.1, 0.9, 0.1]).unwrap()
    }

    #[test]
    fn no_cooperation_is_bayesian_estimator() {
        let s = broadcast().with_coop(vec![vec![], vec![]]).unwrap();
        let rule = fusion_weights(&s, 0, &[]).unwrap();
        let q_h = s.q_h().matrix();
        let expected = q_h * linalg::inv_hpd(&(q_h + s.q_err(0).matrix()), "x").unwrap();
        assert!(frobenius(&(&rule.w_ii - expected)) < 1e-12);
        let bound = centralized_bound(q_h, &[s.q_err(0).matrix()]).unwrap();
        assert!((rule.predicted_mse - bound).abs() < 1e-12);
        // (1/4)·Σ 1/(1 + 1/q) over diag(0.1, 0.9, 0.1, 0.9)
        let direct = 0.5 * (1.0 / 11.0) + 0.5 * (0.9 / 1.9);
        assert!((bound - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_quantization_reaches_wyner_ziv() {
        let s = broadcast();
        let rule = fusion_weights(&s, 0, &[CovMatrix::zeros(4)]).unwrap();
        let wz = wyner_ziv_bound(s.q_h().matrix(), s.q_err(0).matrix(), s.q_err(1).matrix()).unwrap();
        assert!((rule.predicted_mse - wz).abs() < 1e-12);
        // per-coordinate (1 + 10 + 10/9)^{-1}
        assert!((wz - 1.0 / (1.0 + 10.0 + 10.0 / 9.0)).abs() < 1e-12);
        assert!((wz - 0.082_568_807).abs() < 1e-8);
    }

    #[test]
    fn three_unit_informations() {
        let i2 = linalg::identity(2);
        assert!((wyner_ziv_bound(&i2, &i2, &i2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let tiny = linalg::identity(2) * c(1e-8);
        assert!(wyner_ziv_bound(&i2, &tiny, &i2).unwrap() < 1e-7);
        assert!(wyner_ziv_bound(&i2, &real_diag(&[1.0, 0.0]), &i2).is_err());
    }

    #[test]
    fn closed_form_paths_agree() {
        let s = broadcast();
        for rate_q in [0.01, 0.05, 0.3] {
            let qq = CovMatrix::scaled_identity(4, rate_q).unwrap();
            let rule = fusion_weights(&s, 0, std::slice::from_ref(&qq)).unwrap();
            let closed = closed_form_mse(&s, 0, std::slice::from_ref(&qq)).unwrap();
            assert!((rule.predicted_mse - closed).abs() < 1e-12, "{} vs {}", rule.predicted_mse, closed);
            let quad = rule.quadratic_mse(&s).unwrap();
            assert!((quad - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_reduction_oracle() {
        // With commuting diagonal matrices the closed form splits per coordinate:
        // Λ = ((γ²/(γ−q)) − 1)^{-1}, D = mean over coords of 1/(1 + 1/q1 + Λ).
        let s = broadcast();
        let q = 0.04;
        let (q1, q2) = ([0.1, 0.9, 0.1, 0.9], [0.9, 0.1, 0.9, 0.1]);
        let mut expected = 0.0;
        for j in 0..4 {
            let gamma = 1.0 + q2[j];
            let lambda = 1.0 / (gamma * gamma / (gamma - q) - 1.0);
            expected += 1.0 / (1.0 + 1.0 / q1[j] + lambda) / 4.0;
        }
        let got = closed_form_mse(&s, 0, &[CovMatrix::scaled_identity(4, q).unwrap()]).unwrap();
        assert!((got - expected).abs() < 1e-13);
    }

    #[test]
    fn weights_beat_perturbations() {
        let s = broadcast();
        let qq = vec![CovMatrix::diag(&[0.05, 0.2, 0.05, 0.2]).unwrap()];
        let rule = fusion_weights(&s, 0, &qq).unwrap();
        let best = rule.quadratic_mse(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut d_ii = CMat::from_fn(4, 4, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let mut d_k = CMat::from_fn(4, 4, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let norm = (frobenius(&d_ii).powi(2) + frobenius(&d_k).powi(2)).sqrt();
            d_ii *= c(1e-3 / norm);
            d_k *= c(1e-3 / norm);
            let perturbed = mse_for_weights(&s, 0, &qq, &(&rule.w_ii + d_ii), &[&rule.w_k[0] + d_k]).unwrap();
            assert!(perturbed >= best - 1e-12);
        }
    }

    #[test]
    fn monotone_in_quantization_error() {
        let s = broadcast();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let d: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 0.5).collect();
            let shrink: Vec<f64> = d.iter().map(|x| x * rng.random::<f64>()).collect();
            let big = closed_form_mse(&s, 0, &[CovMatrix::diag(&d).unwrap()]).unwrap();
            let small = closed_form_mse(&s, 0, &[CovMatrix::diag(&shrink).unwrap()]).unwrap();
            assert!(small <= big + 1e-15);
        }
    }

    #[test]
    fn fuse_contracts() {
        let s = broadcast();
        let mut rule = fusion_weights(&s, 0, &[CovMatrix::scaled_identity(4, 0.1).unwrap()]).unwrap();
        let x = CVec::from_fn(4, |k, _| C64::new(k as f64, 1.0));
        assert_eq!(rule.fuse(&CVec::zeros(4), &[CVec::zeros(4)]).unwrap(), CVec::zeros(4));
        rule.w_ii = linalg::identity(4);
        rule.w_k[0] = CMat::zeros(4, 4);
        assert_eq!(rule.fuse(&x, &[CVec::from_element(4, C64::new(9.0, 9.0))]).unwrap(), x);
        assert!(rule.fuse(&x, &[]).is_err());
        assert!(rule.fuse(&x, &[CVec::zeros(3)]).is_err());
    }

    #[test]
    fn woodbury_route_matches() {
        // (1/n) tr(Q_h − Q_h Υ Ω^{-1} Υ^H Q_h) equals (1/n) tr(Q_h^{-1} + Υ Θ^{-1} Υ^H)^{-1}.
        let s = broadcast();
        let qq = CovMatrix::diag(&[0.02, 0.3, 0.02, 0.3]).unwrap();
        let rule = fusion_weights(&s, 0, std::slice::from_ref(&qq)).unwrap();
        let q_h = s.q_h().matrix();
        let l = link(q_h, s.q_err(1).matrix(), qq.matrix()).unwrap();
        let theta_k = &l.p - &l.a * q_h * l.a.adjoint();
        let info = linalg::inv_hpd(q_h, "").unwrap()
            + linalg::inv_hpd(s.q_err(0).matrix(), "").unwrap()
            + l.a.adjoint() * linalg::inv_hpd(&theta_k, "").unwrap() * &l.a;
        let woodbury = linalg::trace_re(&linalg::inv_hpd(&info, "").unwrap()) / 4.0;
        assert!((woodbury - rule.predicted_mse).abs() < 1e-12);
    }

    #[test]
    fn brute_force_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let i2 = CovMatrix::identity(2);
        let one = brute_force_joint_mmse(&i2, std::slice::from_ref(&i2), 100_000, &mut rng).unwrap();
        assert!((one - 0.5).abs() < 0.01, "{one}");
        let three = brute_force_joint_mmse(&i2, &[i2.clone(), i2.clone(), i2.clone()], 100_000, &mut rng).unwrap();
        assert!((three - 0.25).abs() < 0.01, "{three}");
    }

    #[test]
    fn silent_link_is_no_cooperation() {
        let s = broadcast();
        let gamma = s.q_h().matrix() + s.q_err(1).matrix();
        let rule = fusion_weights(&s, 0, &[CovMatrix::new(gamma).unwrap()]).unwrap();
        let alone = centralized_bound(s.q_h().matrix(), &[s.q_err(0).matrix()]).unwrap();
        assert!((rule.predicted_mse - alone).abs() < 1e-14);
        assert_eq!(rule.w_k[0], CMat::zeros(4, 4));
        let gamma = CovMatrix::new(s.q_h().matrix() + s.q_err(1).matrix()).unwrap();
        assert!((closed_form_mse(&s, 0, &[gamma]).unwrap() - alone).abs() < 1e-14);
    }

    #[test]
    fn mismatched_inputs() {
        let s = broadcast();
        assert!(fusion_weights(&s, 0, &[]).is_err());
        assert!(closed_form_mse(&s, 0, &[CovMatrix::zeros(3)]).is_err());
    }
}
