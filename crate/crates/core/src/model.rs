//! Conditional mean `E[X^t] = Σ_l φ^t_l β_l ψ^t_l`, the Gaussian random-effects
//! likelihood with β integrated out, the exact β posterior, and Monte-Carlo
//! rollouts under a future action plan.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{basis_eval, basis_eval_series, BasisParams};
use crate::data::UnitRecord;
use crate::effects::{psi_aggregate, EffectParams};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Prior standard deviation of each β entry.
    pub sigma_beta: f64,
}

impl NoiseScales {
    pub fn new(sigma: f64, sigma_beta: f64) -> Result<Self> {
        let ns = NoiseScales { sigma, sigma_beta };
        ns.validate()?;
        Ok(ns)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma_beta > 0.0)
            || !self.sigma.is_finite()
            || !self.sigma_beta.is_finite()
        {
            return Err(Error::Config(format!(
                "noise scales must be positive and finite (sigma {}, sigma_beta {})",
                self.sigma, self.sigma_beta
            )));
        }
        Ok(())
    }
}

/// Exact Gaussian posterior over one unit's β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub unit_id: String,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl PosteriorState {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let r = self.dim();
        DMatrix::from_fn(r, r, |i, j| self.covariance[i][j])
    }

    /// Point mass at `mean`.
    pub fn point(unit_id: impl Into<String>, mean: Vec<f64>) -> Self {
        let r = mean.len();
        PosteriorState {
            unit_id: unit_id.into(),
            mean,
            covariance: vec![vec![0.0; r]; r],
        }
    }
}

/// One regression row: features `φ^t ⊙ ψ^t`, target `x^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub t: usize,
    pub row: Vec<f64>,
    pub target: f64,
}

/// Everything needed to evaluate and predict with the structured model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub basis: BasisParams,
    pub effects: EffectParams,
    pub noise: NoiseScales,
}

/// Which rows the β posterior conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorWindow {
    /// Rows `1..=min(T0, origin)`.
    #[default]
    BurnIn,
    /// Rows `1..=origin`.
    Full,
}

pub fn conditional_mean(phi: &[f64], beta: &[f64], psi: &[f64]) -> Result<f64> {
    if phi.len() != beta.len() || psi.len() != beta.len() {
        return Err(Error::Shape(format!(
            "phi {}, beta {}, psi {}",
            phi.len(),
            beta.len(),
            psi.len()
        )));
    }
    Ok(phi.iter().zip(beta).zip(psi).map(|((p, b), s)| p * b * s).sum())
}

pub fn build_design(
    unit: &UnitRecord,
    bp: &BasisParams,
    ep: &EffectParams,
    t_from: usize,
    t_to: usize,
) -> Result<Vec<DesignRow>> {
    if t_from < 1 || t_from > t_to || t_to > unit.horizon() {
        return Err(Error::Shape(format!(
            "design range {t_from}..={t_to} invalid for T = {}",
            unit.horizon()
        )));
    }
    if bp.r != ep.r {
        return Err(Error::Shape(format!("basis r = {} but effects r = {}", bp.r, ep.r)));
    }
    let phi = basis_eval_series(bp, &unit.x[..=t_to], &unit.z)?;
    (t_from..=t_to)
        .map(|t| {
            let mut row = psi_aggregate(ep, &unit.d, t)?;
            for (v, p) in row.iter_mut().zip(&phi[t - 1]) {
                *v *= p;
            }
            Ok(DesignRow {
                t,
                row,
                target: unit.x[t],
            })
        })
        .collect()
}

/// Posterior mean, covariance and log evidence for a design, with the pieces
/// the gradient needs.
pub(crate) struct EvidenceParts {
    pub log_evidence: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub(crate) fn design_matrix(rows: &[DesignRow], r: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if rows.iter().any(|row| row.row.len() != r) {
        return Err(Error::Shape("design rows of unequal width".into()));
    }
    let phi = DMatrix::from_fn(rows.len(), r, |i, j| rows[i].row[j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|row| row.target));
    Ok((phi, y))
}

fn cond_estimate(m: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().fold(f64::MIN, |a, &b| a.max(b));
    let min = ev.iter().fold(f64::MAX, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn evidence_parts(phi: &DMatrix<f64>, y: &DVector<f64>, ns: &NoiseScales) -> Result<EvidenceParts> {
    ns.validate()?;
    let (t, r) = phi.shape();
    let v = ns.sigma * ns.sigma;
    let vb = ns.sigma_beta * ns.sigma_beta;
    let mut prec = phi.tr_mul(phi) / v;
    for i in 0..r {
        prec[(i, i)] += 1.0 / vb;
    }
    let chol = Cholesky::new(prec.clone()).ok_or_else(|| Error::Singular {
        context: "posterior precision".into(),
        cond: cond_estimate(&prec),
    })?;
    let b = phi.tr_mul(y) / v;
    let mean = chol.solve(&b);
    let cov = chol.inverse();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_evidence = -0.5 * t as f64 * (2.0 * std::f64::consts::PI).ln()
        - t as f64 * ns.sigma.ln()
        - r as f64 * ns.sigma_beta.ln()
        - 0.5 * log_det
        - 0.5 * y.dot(y) / v
        + 0.5 * b.dot(&mean);
    if !log_evidence.is_finite() {
        return Err(Error::NonFinite("log evidence".into()));
    }
    Ok(EvidenceParts {
        log_evidence,
        mean,
        cov,
    })
}

/// `q(β) = N(m, S)` with `S = (ΦᵀΦ/σ² + I/σ_β²)⁻¹`, `m = S Φᵀ y / σ²`.
pub fn beta_posterior(rows: &[DesignRow], r: usize, ns: &NoiseScales) -> Result<PosteriorState> {
    let (phi, y) = design_matrix(rows, r)?;
    let parts = evidence_parts(&phi, &y, ns)?;
    Ok(PosteriorState {
        unit_id: String::new(),
        mean: parts.mean.iter().copied().collect(),
        covariance: (0..r).map(|i| (0..r).map(|j| parts.cov[(i, j)]).collect()).collect(),
    })
}

/// `log N(y; 0, σ² I + σ_β² Φ Φᵀ)`, evaluated through the `r × r` precision.
pub fn log_evidence(rows: &[DesignRow], r: usize, ns: &NoiseScales) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Shape("log evidence needs at least one row".into()));
    }
    let (phi, y) = design_matrix(rows, r)?;
    Ok(evidence_parts(&phi, &y, ns)?.log_evidence)
}

/// Posterior for `unit` given history up to `origin`.
pub fn unit_posterior(
    unit: &UnitRecord,
    bundle: &ModelBundle,
    window: PosteriorWindow,
    t0: usize,
    origin: usize,
) -> Result<PosteriorState> {
    let t_to = match window {
        PosteriorWindow::BurnIn => t0.min(origin),
        PosteriorWindow::Full => origin,
    };
    let rows = if t_to >= 1 {
        build_design(unit, &bundle.basis, &bundle.effects, 1, t_to)?
    } else {
        Vec::new()
    };
    let mut post = beta_posterior(&rows, bundle.effects.r, &bundle.noise)?;
    post.unit_id.clone_from(&unit.unit_id);
    Ok(post)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub unit_id: String,
    /// Per-horizon average over samples.
    pub mean: Vec<f64>,
    pub sample_std: Vec<f64>,
    /// `M × Δ`
    pub samples: Vec<Vec<f64>>,
}

/// Lower factor `L` with `L Lᵀ = Σ`; symmetric eigen fallback for
/// semidefinite covariances.
fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::<f64, Dyn>::new(cov.clone()) {
        return ch.l();
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut q = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        q.column_mut(j).scale_mut(s);
    }
    q
}

/// Monte-Carlo rollout of `Δ = future_d.len()` steps after `origin`.
///
/// Each sample draws β from the posterior, then rolls forward feeding its own
/// sampled `x̂` back into the basis. Observation noise is included in every
/// sample; the reported mean averages it out.
#[allow(clippy::too_many_arguments)]
pub fn predict_mc(
    unit: &UnitRecord,
    origin: usize,
    bundle: &ModelBundle,
    posterior: &PosteriorState,
    future_d: &[usize],
    samples: usize,
    seed: u64,
) -> Result<McPrediction> {
    let (bp, ep, ns) = (&bundle.basis, &bundle.effects, &bundle.noise);
    let r = ep.r;
    let horizon = future_d.len();
    if horizon == 0 || samples == 0 {
        return Err(Error::Config("prediction needs Δ ≥ 1 and M ≥ 1".into()));
    }
    if unit.x.len() < origin + 1 || unit.d.len() < origin {
        return Err(Error::Shape(format!(
            "unit {} has no history up to t = {origin}",
            unit.unit_id
        )));
    }
    if posterior.dim() != r || bp.r != r {
        return Err(Error::Shape("posterior / basis / effects dimension mismatch".into()));
    }
    for &level in future_d {
        if level != 0 {
            ep.family(level)?;
        }
    }
    let mut plan: Vec<usize> = unit.d[..origin].to_vec();
    plan.extend_from_slice(future_d);
    let psi: Vec<Vec<f64>> = (1..=horizon)
        .map(|i| psi_aggregate(ep, &plan, origin + i))
        .collect::<Result<_>>()?;

    let mut base = bp.runner(&unit.z)?;
    for &x in &unit.x[..origin] {
        base.advance(x);
    }
    let l = sampling_factor(&posterior.covariance_matrix());
    let mut rng = rng::stream(seed, &unit.unit_id);
    let mut draws = Vec::with_capacity(samples);
    let mut beta = vec![0.0; r];
    let mut xi = vec![0.0; r];
    for _ in 0..samples {
        xi.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        for i in 0..r {
            beta[i] = posterior.mean[i] + (0..r).map(|j| l[(i, j)] * xi[j]).sum::<f64>();
        }
        let mut run = base.clone();
        let mut prev = unit.x[origin];
        let mut path = Vec::with_capacity(horizon);
        for psi_t in &psi {
            let phi = run.advance(prev);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let mu: f64 = (0..r).map(|k| phi[k] * beta[k] * psi_t[k]).sum();
            prev = mu + ns.sigma * eps;
            path.push(prev);
        }
        draws.push(path);
    }
    let m = samples as f64;
    let mean: Vec<f64> = (0..horizon).map(|h| draws.iter().map(|p| p[h]).sum::<f64>() / m).collect();
    let sample_std = (0..horizon)
        .map(|h| {
            if samples < 2 {
                return 0.0;
            }
            let ss: f64 = draws.iter().map(|p| (p[h] - mean[h]).powi(2)).sum();
            (ss / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(McPrediction {
        unit_id: unit.unit_id.clone(),
        mean,
        sample_std,
        samples: draws,
    })
}

/// `(φ^{t+1} ⊙ ψ^{t+1})ᵀ m`: the exact one-step-ahead predictive mean.
pub fn one_step_mean(
    unit: &UnitRecord,
    origin: usize,
    bundle: &ModelBundle,
    posterior: &PosteriorState,
    next_level: usize,
) -> Result<f64> {
    let mut plan: Vec<usize> = unit.d[..origin].to_vec();
    plan.push(next_level);
    let psi = psi_aggregate(&bundle.effects, &plan, origin + 1)?;
    let phi = basis_eval(&bundle.basis, &unit.x[..=origin], &unit.z)?;
    let feat: Vec<f64> = phi.iter().zip(&psi).map(|(a, b)| a * b).collect();
    Ok(dot(&feat, &posterior.mean))
}

/// Root-mean-squared error per horizon offset across units.
pub fn rmse_by_horizon(preds: &[Vec<f64>], actuals: &[Vec<f64>]) -> Result<Vec<f64>> {
    if preds.len() != actuals.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} prediction rows vs {} actual rows",
            preds.len(),
            actuals.len()
        )));
    }
    let h = preds[0].len();
    if preds.iter().chain(actuals).any(|v| v.len() != h) {
        return Err(Error::Shape("ragged horizon vectors".into()));
    }
    let n = preds.len() as f64;
    Ok((0..h)
        .map(|j| {
            let ss: f64 = preds.iter().zip(actuals).map(|(p, a)| (p[j] - a[j]).powi(2)).sum();
            (ss / n).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::basis_init_random;
    use crate::effects::EffectFamily;
    use rand::Rng as _;

    fn row(t: usize, v: Vec<f64>, y: f64) -> DesignRow {
        DesignRow { t, row: v, target: y }
    }

    #[test]
    fn conditional_mean_cases() {
        assert_eq!(conditional_mean(&[1.0, 1.0], &[2.0, 3.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(conditional_mean(&[1.0, 1.0], &[2.0, 3.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(conditional_mean(&[1.0], &[2.0, 3.0], &[1.0, 1.0]).is_err());
        let phi = [0.3, -1.7, 2.2];
        let beta = [1.1, 0.4, -0.9];
        let psi = [2.0, 0.5, 1.5];
        let mut naive = 0.0;
        for l in (0..3).rev() {
            naive += (phi[l] * psi[l]) * beta[l];
        }
        assert!((conditional_mean(&phi, &beta, &psi).unwrap() - naive).abs() < 1e-15);
    }

    #[test]
    fn zero_rows_gives_prior() {
        let ns = NoiseScales::new(0.7, 1.5).unwrap();
        let p = beta_posterior(&[], 3, &ns).unwrap();
        assert_eq!(p.mean, vec![0.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.25 } else { 0.0 };
                assert!((p.covariance[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_ridge() {
        let ns = NoiseScales::new(1.0, 1.0).unwrap();
        let p = beta_posterior(&[row(1, vec![1.0, 0.0, 0.0], 2.0)], 3, &ns).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-12);
        assert!(p.mean[1].abs() < 1e-12 && p.mean[2].abs() < 1e-12);
        assert!((p.covariance[0][0] - 0.5).abs() < 1e-12);
        assert!((p.covariance[1][1] - 1.0).abs() < 1e-12);
        let le = log_evidence(&[row(1, vec![1.0, 0.0, 0.0], 2.0)], 3, &ns).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 4.0 / (2.0 * 2.0);
        assert!((le - want).abs() < 1e-12);
    }

    #[test]
    fn zero_design_evidence_is_noise_only() {
        let ns = NoiseScales::new(0.5, 2.0).unwrap();
        let ys = [0.3, -1.0, 2.0];
        let rows: Vec<_> = ys.iter().enumerate().map(|(i, &y)| row(i + 1, vec![0.0; 2], y)).collect();
        let want: f64 = ys
            .iter()
            .map(|y| -0.5 * (2.0 * std::f64::consts::PI * 0.25).ln() - y * y / (2.0 * 0.25))
            .sum();
        assert!((log_evidence(&rows, 2, &ns).unwrap() - want).abs() < 1e-12);
    }

    /// Independent route: Gaussian elimination on the normal equations.
    fn ridge_oracle(rows: &[DesignRow], r: usize, ns: &NoiseScales) -> Vec<f64> {
        let lam = (ns.sigma / ns.sigma_beta).powi(2);
        let mut a = vec![vec![0.0; r + 1]; r];
        for i in 0..r {
            for j in 0..r {
                a[i][j] = rows.iter().map(|x| x.row[i] * x.row[j]).sum::<f64>();
            }
            a[i][i] += lam;
            a[i][r] = rows.iter().map(|x| x.row[i] * x.target).sum::<f64>();
        }
        for c in 0..r {
            let p = (c..r).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            for i in 0..r {
                if i != c {
                    let f = a[i][c] / a[c][c];
                    for j in c..=r {
                        a[i][j] -= f * a[c][j];
                    }
                }
            }
        }
        (0..r).map(|i| a[i][r] / a[i][i]).collect()
    }

    #[test]
    fn posterior_mean_matches_ridge_oracle() {
        let mut g = rng::master(5);
        let ns = NoiseScales::new(0.8, 1.3).unwrap();
        let rows: Vec<_> = (0..20)
            .map(|t| {
                let v: Vec<f64> = (0..4).map(|_| g.random_range(-2.0..2.0)).collect();
                row(t + 1, v, g.random_range(-3.0..3.0))
            })
            .collect();
        let p = beta_posterior(&rows, 4, &ns).unwrap();
        let oracle = ridge_oracle(&rows, 4, &ns);
        for (a, b) in p.mean.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for i in 0..4 {
            for j in 0..4 {
                assert!((p.covariance[i][j] - p.covariance[j][i]).abs() < 1e-10);
            }
        }
    }

    fn toy_bundle() -> ModelBundle {
        let ep = EffectParams::new(2).with_level(
            1,
            EffectFamily::Unbounded {
                w1: vec![0.2, -0.5],
                w2: vec![1.0, 0.5],
                w3: vec![1.5, -0.5],
            },
        );
        ModelBundle {
            basis: basis_init_random(3, 1, 4, 2, true),
            effects: ep,
            noise: NoiseScales::new(0.3, 1.0).unwrap(),
        }
    }

    fn toy_unit() -> UnitRecord {
        UnitRecord {
            unit_id: "u".into(),
            z: vec![0.4],
            x: vec![0.5, 0.1, -0.3, 0.8, 1.2, 0.9],
            d: vec![0, 0, 1, 0, 0],
        }
    }

    #[test]
    fn design_rows_by_hand() {
        let b = toy_bundle();
        let u = toy_unit();
        let rows = build_design(&u, &b.basis, &b.effects, 1, 5).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            let phi = crate::basis::basis_eval(&b.basis, &u.x[..r.t], &u.z).unwrap();
            let mut psi = vec![1.0; 2];
            for tp in 1..=r.t {
                let f = crate::effects::psi_single(&b.effects, u.d[tp - 1], tp, r.t).unwrap();
                psi[0] *= f[0];
                psi[1] *= f[1];
            }
            assert_eq!(r.row, vec![phi[0] * psi[0], phi[1] * psi[1]]);
            assert_eq!(r.target, u.x[r.t]);
            if r.t < 3 {
                assert_eq!(r.row, phi);
            }
        }
        assert_eq!(build_design(&u, &b.basis, &b.effects, 4, 4).unwrap().len(), 1);
        assert!(build_design(&u, &b.basis, &b.effects, 0, 4).is_err());
        assert!(build_design(&u, &b.basis, &b.effects, 3, 6).is_err());
    }

    #[test]
    fn predict_noiseless_point_mass_matches_hand_rollout() {
        let mut b = toy_bundle();
        b.noise.sigma = 1e-300;
        let u = toy_unit();
        let beta = vec![0.7, -1.1];
        let post = PosteriorState::point("u", beta.clone());
        let future = [0, 0, 0];
        let origin = 2;
        let pred = predict_mc(&u, origin, &b, &post, &future, 3, 1).unwrap();
        // hand rollout: append each mean and re-evaluate the basis from scratch
        let mut x: Vec<f64> = u.x[..=origin].to_vec();
        let mut plan: Vec<usize> = u.d[..origin].to_vec();
        for (i, &lvl) in future.iter().enumerate() {
            plan.push(lvl);
            let phi = crate::basis::basis_eval(&b.basis, &x, &u.z).unwrap();
            let psi = psi_aggregate(&b.effects, &plan, origin + i + 1).unwrap();
            let mu = conditional_mean(&phi, &beta, &psi).unwrap();
            assert!((pred.mean[i] - mu).abs() < 1e-12, "{} vs {mu}", pred.mean[i]);
            x.push(mu);
        }
        assert!(pred.sample_std.iter().all(|&s| s < 1e-12));
    }

    #[test]
    fn predict_reproducible() {
        let b = toy_bundle();
        let u = toy_unit();
        let rows = build_design(&u, &b.basis, &b.effects, 1, 2).unwrap();
        let mut post = beta_posterior(&rows, 2, &b.noise).unwrap();
        post.unit_id = "u".into();
        let a = predict_mc(&u, 2, &b, &post, &[1, 0], 1, 9).unwrap();
        let c = predict_mc(&u, 2, &b, &post, &[1, 0], 1, 9).unwrap();
        assert_eq!(a, c);
        assert!(predict_mc(&u, 2, &b, &post, &[3], 1, 9).is_err());
        assert!(predict_mc(&u, 2, &b, &post, &[], 1, 9).is_err());
    }

    #[test]
    fn one_step_mc_converges_to_analytic() {
        let b = toy_bundle();
        let u = toy_unit();
        let origin = 3;
        let post = unit_posterior(&u, &b, PosteriorWindow::Full, 2, origin).unwrap();
        let pred = predict_mc(&u, origin, &b, &post, &[0], 10_000, 21).unwrap();
        let exact = one_step_mean(&u, origin, &b, &post, 0).unwrap();
        let se = pred.sample_std[0] / 100.0;
        assert!((pred.mean[0] - exact).abs() <= 4.0 * se, "{} vs {exact} (se {se})", pred.mean[0]);
    }

    #[test]
    fn rmse_cases() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(rmse_by_horizon(&a, &a).unwrap(), vec![0.0, 0.0]);
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x - 2.5).collect()).collect();
        assert_eq!(rmse_by_horizon(&shifted, &a).unwrap(), vec![2.5, 2.5]);
        // toy table: errors (1,0), (-2,1), (2,-1)
        let p = vec![vec![1.0, 0.0], vec![-2.0, 1.0], vec![2.0, -1.0]];
        let z = vec![vec![0.0; 2]; 3];
        let got = rmse_by_horizon(&p, &z).unwrap();
        assert!((got[0] - 3.0f64.sqrt()).abs() < 1e-15);
        assert!((got[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(rmse_by_horizon(&p, &z[..2]).is_err());
    }
}
