//! Marginal-likelihood fitting.
//!
//! The objective is `Σ_n log N(y_n; 0, σ² I + σ_β² Φ_n Φ_nᵀ)` over every row
//! of every unit. Parameters live in one flat vector
//! `[effects…, log σ, log σ_β, basis…]` (the basis block only when it is
//! optimized) and are updated by full-batch Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_backward, basis_eval_series, basis_forward_taped, basis_init_random};
use crate::data::{Dataset, UnitRecord};
use crate::effects::{EffectFamily, EffectParams, LevelShape};
use crate::error::{Error, Result};
use crate::model::{evidence_parts, ModelBundle, NoiseScales};
use crate::optim::{max_relative_error, Adam};
use crate::rng;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimize_basis: bool,
    /// Only rows `t ≤ T0` drive basis updates.
    #[serde(rename = "freeze_after_T0")]
    pub freeze_after_t0: bool,
    pub gradient_mode: GradientMode,
    /// Fraction of units held out for checkpoint selection.
    pub holdout: f64,
    /// Central-difference width in `finite_difference` mode.
    pub fd_step: f64,
    /// Width of a freshly initialized basis.
    pub basis_hidden: usize,
    pub basis_bounded: bool,
    pub init_sigma: f64,
    pub init_sigma_beta: f64,
    /// Effect family per level; unlisted levels are unbounded.
    pub levels: BTreeMap<usize, LevelShape>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 50,
            seed: 0,
            optimize_basis: true,
            freeze_after_t0: false,
            gradient_mode: GradientMode::Analytic,
            holdout: 0.1,
            fd_step: 1e-5,
            basis_hidden: 16,
            basis_bounded: true,
            init_sigma: 1.0,
            init_sigma_beta: 1.0,
            levels: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", self.holdout)));
        }
        if !(self.fd_step > 0.0) || self.basis_hidden == 0 {
            return Err(Error::Config("fd_step must be > 0 and basis_hidden ≥ 1".into()));
        }
        NoiseScales::new(self.init_sigma, self.init_sigma_beta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-unit log evidence on the training units.
    pub train: f64,
    /// Mean per-unit log evidence on the holdout units (training units when
    /// there is no holdout).
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub bundle: ModelBundle,
    /// Epoch 0 is the initialization.
    pub curve: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub holdout_units: Vec<String>,
}

/// Which blocks the flat parameter vector contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradOptions {
    pub include_basis: bool,
    /// Rows after this time do not contribute basis gradients.
    pub basis_rows_until: Option<usize>,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions {
            include_basis: true,
            basis_rows_until: None,
        }
    }
}

pub fn flatten(bundle: &ModelBundle, include_basis: bool) -> Vec<f64> {
    let mut out = Vec::new();
    bundle.effects.write_flat(&mut out);
    out.push(bundle.noise.sigma.ln());
    out.push(bundle.noise.sigma_beta.ln());
    if include_basis {
        bundle.basis.write_flat(&mut out);
    }
    out
}

/// Inverse of [`flatten`] onto a template with the same structure.
pub fn unflatten(template: &ModelBundle, theta: &[f64], include_basis: bool) -> ModelBundle {
    let mut b = template.clone();
    let n = b.effects.read_flat(theta);
    b.noise = NoiseScales {
        sigma: theta[n].exp(),
        sigma_beta: theta[n + 1].exp(),
    };
    if include_basis {
        b.basis.read_flat(&theta[n + 2..]);
    }
    b
}

/// Log evidence of one unit over rows `1..=T`.
pub fn unit_objective(unit: &UnitRecord, bundle: &ModelBundle) -> Result<f64> {
    unit_objective_with(unit, bundle, None)
}

/// Basis rows of every unit, reused while the basis is held fixed.
type PhiCache = Vec<Vec<Vec<f64>>>;

fn phi_cache(ds: &Dataset, bp: &crate::basis::BasisParams) -> Result<PhiCache> {
    ds.units
        .par_iter()
        .map(|u| basis_eval_series(bp, &u.x, &u.z))
        .collect()
}

fn unit_objective_with(unit: &UnitRecord, bundle: &ModelBundle, phi: Option<&[Vec<f64>]>) -> Result<f64> {
    let (phi, psi) = unit_features(unit, bundle, false, phi)?.0;
    let (a, y) = design(&phi, &psi, unit);
    Ok(evidence_parts(&a, &y, &bundle.noise)?.log_evidence)
}

type Features = ((Vec<Vec<f64>>, Vec<Vec<f64>>), Option<crate::basis::BasisTape>);

fn unit_features(unit: &UnitRecord, bundle: &ModelBundle, taped: bool, cached: Option<&[Vec<f64>]>) -> Result<Features> {
    let t = unit.horizon();
    if t == 0 {
        return Err(Error::InvalidUnit {
            unit_id: unit.unit_id.clone(),
            msg: "no observed steps".into(),
        });
    }
    let (phi, tape) = if let (Some(p), false) = (cached, taped) {
        (p.to_vec(), None)
    } else if taped {
        let (p, tape) = basis_forward_taped(&bundle.basis, &unit.x, &unit.z, t)?;
        (p, Some(tape))
    } else {
        (basis_eval_series(&bundle.basis, &unit.x, &unit.z)?, None)
    };
    let psi = (1..=t)
        .map(|s| crate::effects::psi_aggregate(&bundle.effects, &unit.d, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(((phi, psi), tape))
}

fn design(phi: &[Vec<f64>], psi: &[Vec<f64>], unit: &UnitRecord) -> (nalgebra::DMatrix<f64>, nalgebra::DVector<f64>) {
    let r = phi.first().map_or(0, Vec::len);
    let a = nalgebra::DMatrix::from_fn(phi.len(), r, |t, l| phi[t][l] * psi[t][l]);
    let y = nalgebra::DVector::from_fn(phi.len(), |t, _| unit.x[t + 1]);
    (a, y)
}

/// Log evidence of one unit and its gradient in the [`flatten`] layout.
pub fn unit_gradient(unit: &UnitRecord, bundle: &ModelBundle, opts: GradOptions) -> Result<(f64, Vec<f64>)> {
    unit_gradient_with(unit, bundle, opts, None)
}

fn unit_gradient_with(
    unit: &UnitRecord,
    bundle: &ModelBundle,
    opts: GradOptions,
    cached: Option<&[Vec<f64>]>,
) -> Result<(f64, Vec<f64>)> {
    let ep = &bundle.effects;
    let r = ep.r;
    let ((phi, psi), tape) = unit_features(unit, bundle, opts.include_basis, cached)?;
    let (a, y) = design(&phi, &psi, unit);
    let ns = &bundle.noise;
    let parts = evidence_parts(&a, &y, ns)?;
    let (m, s) = (&parts.mean, &parts.cov);
    let v = ns.sigma * ns.sigma;
    let vb = ns.sigma_beta * ns.sigma_beta;
    let t_len = a.nrows();

    let resid = &y - &a * m;
    // ∂L/∂Φ = ((y − Φm)mᵀ − ΦS)/σ²
    let g = (&resid * m.transpose() - &a * s) / v;
    let ata = a.tr_mul(&a);
    let d_v = -(t_len as f64) / (2.0 * v) + ((s * &ata).trace() + resid.norm_squared()) / (2.0 * v * v);
    let d_vb = -(r as f64) / (2.0 * vb) + (s.trace() + m.norm_squared()) / (2.0 * vb * vb);

    let n_eff = ep.n_params();
    let n_basis = if opts.include_basis { bundle.basis.n_params() } else { 0 };
    let mut grad = vec![0.0; n_eff + 2 + n_basis];
    grad[n_eff] = 2.0 * v * d_v;
    grad[n_eff + 1] = 2.0 * vb * d_vb;

    let offsets = ep.offsets();
    let apps = unit.applications();
    let mut upstream = Vec::with_capacity(t_len);
    let mut factors: Vec<Vec<f64>> = Vec::new();
    let mut coeff = vec![0.0; r];
    for t in 1..=t_len {
        let row = t - 1;
        let active: Vec<(usize, usize)> = apps.iter().copied().filter(|&(s, _)| s <= t).collect();
        factors.clear();
        for &(s, d) in &active {
            factors.push(ep.factor(d, t - s)?);
        }
        for (j, &(s, d)) in active.iter().enumerate() {
            for l in 0..r {
                let mut others = 1.0;
                for (k, f) in factors.iter().enumerate() {
                    if k != j {
                        others *= f[l];
                    }
                }
                coeff[l] = g[(row, l)] * phi[row][l] * others;
            }
            ep.accumulate_factor_grad(d, t - s, &coeff, offsets[&d], &mut grad)?;
        }
        if opts.include_basis {
            let keep = opts.basis_rows_until.is_none_or(|until| t <= until);
            upstream.push(
                (0..r)
                    .map(|l| if keep { g[(row, l)] * psi[row][l] } else { 0.0 })
                    .collect::<Vec<f64>>(),
            );
        }
    }
    if let Some(tape) = tape {
        let gb = basis_backward(&bundle.basis, &tape, &upstream)?;
        let mut flat = Vec::with_capacity(n_basis);
        gb.write_flat(&mut flat);
        grad[n_eff + 2..].copy_from_slice(&flat);
    }
    if let Some(i) = grad.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of unit {} at {}", unit.unit_id, param_path(bundle, i))));
    }
    Ok((parts.log_evidence, grad))
}

/// Human-readable name of a flat parameter index.
pub fn param_path(bundle: &ModelBundle, i: usize) -> String {
    let n_eff = bundle.effects.n_params();
    if i < n_eff {
        let mut level = 0;
        let mut base = 0;
        for (d, o) in bundle.effects.offsets() {
            if o <= i {
                level = d;
                base = o;
            }
        }
        let r = bundle.effects.r;
        let local = i - base;
        return match bundle.effects.levels.get(&level) {
            Some(EffectFamily::Unbounded { .. }) => {
                format!("effects[{level}].w{}[{}]", local / r + 1, local % r)
            }
            Some(EffectFamily::Bounded { k, .. }) => format!("effects[{level}].w[{}][{}]", local / k, local % k),
            None => format!("effects[{i}]"),
        };
    }
    match i - n_eff {
        0 => "log_sigma".into(),
        1 => "log_sigma_beta".into(),
        j => format!("basis[{}]", j - 2),
    }
}

/// `Σ_n log_evidence` over the units with indices `idx`.
pub fn objective_on(ds: &Dataset, idx: &[usize], bundle: &ModelBundle) -> Result<f64> {
    objective_cached(ds, idx, bundle, None)
}

fn objective_cached(ds: &Dataset, idx: &[usize], bundle: &ModelBundle, cache: Option<&PhiCache>) -> Result<f64> {
    let parts: Vec<f64> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| unit_objective_with(&ds.units[i], bundle, cache.map(|c| c[i].as_slice())))
                .sum::<Result<f64>>()
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

pub fn objective(ds: &Dataset, bundle: &ModelBundle) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    objective_on(ds, &idx, bundle)
}

/// Objective and gradient, reduced chunk by chunk in a fixed order.
pub fn gradient_on(ds: &Dataset, idx: &[usize], bundle: &ModelBundle, opts: GradOptions) -> Result<(f64, Vec<f64>)> {
    gradient_cached(ds, idx, bundle, opts, None)
}

fn gradient_cached(
    ds: &Dataset,
    idx: &[usize],
    bundle: &ModelBundle,
    opts: GradOptions,
    cache: Option<&PhiCache>,
) -> Result<(f64, Vec<f64>)> {
    let n = bundle.effects.n_params() + 2 + if opts.include_basis { bundle.basis.n_params() } else { 0 };
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut f = 0.0;
            let mut g = vec![0.0; n];
            for &i in chunk {
                let (fi, gi) = unit_gradient_with(&ds.units[i], bundle, opts, cache.map(|c| c[i].as_slice()))?;
                f += fi;
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
            }
            Ok((f, g))
        })
        .collect::<Result<_>>()?;
    let mut f = 0.0;
    let mut g = vec![0.0; n];
    for (pf, pg) in parts {
        f += pf;
        g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
    }
    Ok((f, g))
}

pub fn gradient(ds: &Dataset, bundle: &ModelBundle, opts: GradOptions) -> Result<(f64, Vec<f64>)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    gradient_on(ds, &idx, bundle, opts)
}

/// Central-difference gradient in the [`flatten`] layout.
pub fn gradient_fd(ds: &Dataset, idx: &[usize], bundle: &ModelBundle, include_basis: bool, step: f64) -> Result<Vec<f64>> {
    let theta = flatten(bundle, include_basis);
    let mut x = theta.clone();
    let mut g = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        x[i] = theta[i] + step;
        let up = objective_on(ds, idx, &unflatten(bundle, &x, include_basis))?;
        x[i] = theta[i] - step;
        let dn = objective_on(ds, idx, &unflatten(bundle, &x, include_basis))?;
        x[i] = theta[i];
        g[i] = (up - dn) / (2.0 * step);
    }
    Ok(g)
}

/// Max relative error of the analytic gradient against central differences.
pub fn grad_check(bundle: &ModelBundle, ds: &Dataset, step: f64, include_basis: bool) -> Result<f64> {
    let opts = GradOptions {
        include_basis,
        basis_rows_until: None,
    };
    let (_, analytic) = gradient(ds, bundle, opts)?;
    let theta = flatten(bundle, include_basis);
    let f = |x: &[f64]| objective(ds, &unflatten(bundle, x, include_basis)).unwrap_or(f64::NAN);
    Ok(max_relative_error(f, &analytic, &theta, step))
}

/// Near-identity effects for every level in the data (and every configured
/// level): `w1, w2 ∼ N(0, 0.1²)`, `w3 = 1`; bounded tables start at 1.
pub fn init_effects(ds: &Dataset, r: usize, shapes: &BTreeMap<usize, LevelShape>, seed: u64) -> EffectParams {
    let mut levels: std::collections::BTreeSet<usize> =
        ds.units.iter().flat_map(|u| u.applications()).map(|(_, d)| d).collect();
    levels.extend(shapes.keys().copied().filter(|&d| d != 0));
    let mut g = rng::substream(seed, "effects-init");
    let small = Normal::new(0.0, 0.1).expect("init normal");
    let mut ep = EffectParams::new(r);
    for d in levels {
        let fam = match shapes.get(&d).copied().unwrap_or(LevelShape::Unbounded) {
            LevelShape::Unbounded => EffectFamily::Unbounded {
                w1: (0..r).map(|_| small.sample(&mut g)).collect(),
                w2: (0..r).map(|_| small.sample(&mut g)).collect(),
                w3: vec![1.0; r],
            },
            LevelShape::Bounded { k } => EffectFamily::Bounded { k, w: vec![vec![1.0; k]; r] },
        };
        ep.levels.insert(d, fam);
    }
    ep
}

/// Fresh bundle: random basis with inputs scaled to unit spread, near-identity
/// effects and the configured initial noise scales.
pub fn init_bundle(ds: &Dataset, r: usize, cfg: &TrainConfig) -> Result<ModelBundle> {
    let mut basis = basis_init_random(cfg.seed, ds.meta.z_dim, cfg.basis_hidden, r, cfg.basis_bounded);
    let xs: Vec<f64> = ds.units.iter().flat_map(|u| u.x.iter().copied()).collect();
    if xs.len() > 1 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        if var > 0.0 {
            basis.input_scale = 1.0 / var.sqrt();
        }
    }
    Ok(ModelBundle {
        basis,
        effects: init_effects(ds, r, &cfg.levels, cfg.seed),
        noise: NoiseScales::new(cfg.init_sigma, cfg.init_sigma_beta)?,
    })
}

/// Training / holdout unit indices for a seeded split.
pub fn holdout_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, "holdout"));
    let n_hold = ((frac * n as f64 + 1e-9).floor() as usize).min(n.saturating_sub(1));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

/// Fits from a fresh initialization.
pub fn fit(ds: &Dataset, r: usize, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let init = init_bundle(ds, r, cfg)?;
    fit_from(ds, init, cfg)
}

/// Fits starting at `init`; the basis is only updated when
/// `cfg.optimize_basis` is set.
pub fn fit_from(ds: &Dataset, init: ModelBundle, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidDataset("cannot fit an empty dataset".into()));
    }
    init.effects.validate()?;
    if init.basis.r != init.effects.r {
        return Err(Error::Shape("basis and effects disagree on r".into()));
    }
    let include_basis = cfg.optimize_basis;
    let opts = GradOptions {
        include_basis,
        basis_rows_until: cfg.freeze_after_t0.then_some(ds.meta.t0),
    };
    let (train, hold) = holdout_split(ds.len(), cfg.holdout, cfg.seed);
    let cache = if include_basis { None } else { Some(phi_cache(ds, &init.basis)?) };
    let sel = if hold.is_empty() { &train } else { &hold };
    let n_train = train.len() as f64;
    let n_sel = sel.len() as f64;

    let mut theta = flatten(&init, include_basis);
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut bundle = init.clone();
    let mut best = (f64::NEG_INFINITY, 0, init.clone());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            let (_, g) = match cfg.gradient_mode {
                GradientMode::Analytic => gradient_cached(ds, &train, &bundle, opts, cache.as_ref()),
                GradientMode::FiniteDifference => {
                    gradient_fd(ds, &train, &bundle, include_basis, cfg.fd_step).map(|g| (0.0, g))
                }
            }
            .map_err(|e| Error::Divergence {
                epoch,
                msg: e.to_string(),
            })?;
            let neg: Vec<f64> = g.iter().map(|v| -v / n_train).collect();
            adam.step(&mut theta, &neg);
            bundle = unflatten(&init, &theta, include_basis);
        }
        let eval = |idx: &[usize]| {
            objective_cached(ds, idx, &bundle, cache.as_ref()).map_err(|e| Error::Divergence {
                epoch,
                msg: e.to_string(),
            })
        };
        let train_obj = eval(&train)? / n_train;
        let sel_obj = if hold.is_empty() { train_obj } else { eval(sel)? / n_sel };
        if !train_obj.is_finite() || !sel_obj.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: "objective is not finite".into(),
            });
        }
        curve.push(EpochRecord {
            epoch,
            train: train_obj,
            holdout: sel_obj,
        });
        if sel_obj > best.0 {
            best = (sel_obj, epoch, bundle.clone());
        }
    }
    Ok(FitResult {
        bundle: best.2,
        curve,
        selected_epoch: best.1,
        holdout_units: hold.iter().map(|&i| ds.units[i].unit_id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_design, log_evidence};
    use crate::sim::{generate_dataset, SimConfig};

    fn tiny(seed: u64, sigma: f64) -> (Dataset, crate::sim::GroundTruth) {
        generate_dataset(&SimConfig {
            r: 3,
            t: 8,
            t0: 3,
            k: 3,
            levels_per_unit: 1,
            n: 4,
            z_dim: 2,
            hidden: 4,
            sigma_noise: sigma,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
    }

    fn bundle_for(gt: &crate::sim::GroundTruth, sigma: f64) -> ModelBundle {
        ModelBundle {
            basis: gt.basis.clone(),
            effects: gt.effects.clone(),
            noise: NoiseScales::new(sigma, 1.3).unwrap(),
        }
    }

    #[test]
    fn objective_decomposes_and_matches_model() {
        let (ds, gt) = tiny(1, 0.5);
        let b = bundle_for(&gt, 0.7);
        let total = objective(&ds, &b).unwrap();
        let mut sum = 0.0;
        for u in &ds.units {
            let rows = build_design(u, &b.basis, &b.effects, 1, u.horizon()).unwrap();
            sum += log_evidence(&rows, 3, &b.noise).unwrap();
        }
        assert!((total - sum).abs() <= 1e-9 * sum.abs());
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (ds, gt) = tiny(seed, 0.5);
            let mut b = bundle_for(&gt, 0.8);
            b.effects = init_effects(&ds, 3, &BTreeMap::new(), seed);
            b.effects.levels.values_mut().for_each(|f| {
                if let EffectFamily::Unbounded { w1, w2, .. } = f {
                    w1.iter_mut().for_each(|v| *v += 0.7);
                    w2.iter_mut().for_each(|v| *v += 0.4);
                }
            });
            let err = grad_check(&b, &ds, 1e-5, true).unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn bounded_gradient_matches_finite_differences() {
        let (ds, gt) = tiny(4, 0.5);
        let shapes: BTreeMap<usize, LevelShape> = [(1, LevelShape::Bounded { k: 3 }), (2, LevelShape::Bounded { k: 2 })].into();
        let mut b = bundle_for(&gt, 0.6);
        b.effects = init_effects(&ds, 3, &shapes, 1);
        let mut g = rng::master(3);
        use rand::Rng as _;
        b.effects.levels.values_mut().for_each(|f| {
            if let EffectFamily::Bounded { w, .. } = f {
                w.iter_mut().flatten().for_each(|v| *v += g.random_range(-0.5..0.5));
            }
        });
        assert!(grad_check(&b, &ds, 1e-5, true).unwrap() <= 1e-5);
    }

    #[test]
    fn finite_difference_mode_agrees() {
        let (ds, gt) = tiny(2, 0.5);
        let b = bundle_for(&gt, 0.9);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (_, a) = gradient_on(&ds, &idx, &b, GradOptions::default()).unwrap();
        let fd = gradient_fd(&ds, &idx, &b, true, 1e-5).unwrap();
        for (x, y) in a.iter().zip(&fd) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-3), "{x} vs {y}");
        }
    }

    #[test]
    fn unused_level_has_zero_gradient() {
        let (ds, gt) = tiny(3, 0.5);
        let mut b = bundle_for(&gt, 0.9);
        b.effects.levels.insert(
            7,
            EffectFamily::Unbounded {
                w1: vec![0.1; 3],
                w2: vec![0.2; 3],
                w3: vec![1.0; 3],
            },
        );
        let (_, g) = gradient(&ds, &b, GradOptions::default()).unwrap();
        let off = b.effects.offsets()[&7];
        assert!(g[off..off + 9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn freeze_zeroes_late_basis_rows() {
        let (ds, gt) = tiny(5, 0.5);
        let b = bundle_for(&gt, 0.9);
        let frozen = GradOptions {
            include_basis: true,
            basis_rows_until: Some(0),
        };
        let (_, g) = gradient(&ds, &b, frozen).unwrap();
        let n = b.effects.n_params() + 2;
        assert!(g[n..].iter().all(|&v| v == 0.0));
        assert!(g[..n].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn order_of_reduction_is_fixed() {
        let (ds, gt) = generate_dataset(&SimConfig {
            n: 150,
            r: 2,
            k: 2,
            levels_per_unit: 1,
            ..SimConfig::default()
        })
        .unwrap();
        let b = bundle_for(&gt, 0.9);
        let a = gradient(&ds, &b, GradOptions::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| gradient(&ds, &b, GradOptions::default()).unwrap());
        assert_eq!(a, c);
        // sequential per-unit sum agrees to rounding
        let mut f = 0.0;
        for u in &ds.units {
            f += unit_gradient(u, &b, GradOptions::default()).unwrap().0;
        }
        assert!((a.0 - f).abs() <= 1e-12 * f.abs());
    }

    #[test]
    fn zero_lr_keeps_parameters_and_runs_repeat() {
        let (ds, _) = tiny(6, 0.5);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let res = fit(&ds, 3, &cfg).unwrap();
        let init = init_bundle(&ds, 3, &cfg).unwrap();
        assert_eq!(res.bundle, init);
        let cfg = TrainConfig { lr: 0.01, ..cfg };
        assert_eq!(fit(&ds, 3, &cfg).unwrap(), fit(&ds, 3, &cfg).unwrap());
    }

    #[test]
    fn selected_epoch_is_best_holdout() {
        let (ds, _) = generate_dataset(&SimConfig {
            n: 40,
            r: 2,
            k: 2,
            levels_per_unit: 1,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            holdout: 0.25,
            seed: 1,
            ..TrainConfig::default()
        };
        let res = fit(&ds, 2, &cfg).unwrap();
        assert_eq!(res.curve.len(), 11);
        assert_eq!(res.holdout_units.len(), 10);
        let best = res
            .curve
            .iter()
            .max_by(|a, b| a.holdout.total_cmp(&b.holdout))
            .unwrap();
        assert_eq!(best.epoch, res.selected_epoch);
    }

    #[test]
    fn noiseless_fit_recovers_effects() {
        let (ds, gt) = generate_dataset(&SimConfig {
            r: 2,
            k: 2,
            levels_per_unit: 1,
            n: 200,
            sigma_noise: 0.0,
            seed: 11,
            ..SimConfig::default()
        })
        .unwrap();
        let mut init = bundle_for(&gt, 0.5);
        init.effects = init_effects(&ds, 2, &BTreeMap::new(), 0);
        let cfg = TrainConfig {
            lr: 0.02,
            epochs: 1500,
            holdout: 0.0,
            optimize_basis: false,
            ..TrainConfig::default()
        };
        let res = fit_from(&ds, init, &cfg).unwrap();
        let (EffectFamily::Unbounded { w1, w2, w3 }, EffectFamily::Unbounded { w1: e1, w2: e2, w3: e3 }) =
            (&gt.effects.levels[&1], &res.bundle.effects.levels[&1])
        else {
            panic!("family")
        };
        for l in 0..2 {
            for (t, e) in [(w1[l], e1[l]), (w2[l], e2[l]), (w3[l], e3[l])] {
                assert!(((e - t) / t).abs() <= 0.05, "{e} vs {t}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let (ds, gt) = generate_dataset(&SimConfig {
            r: 2,
            t: 14,
            t0: 4,
            k: 2,
            levels_per_unit: 1,
            n: 30,
            z_dim: 2,
            hidden: 4,
            sigma_noise: 0.05,
            seed: 9,
            ..SimConfig::default()
        })
        .unwrap();
        let opts = GradOptions {
            include_basis: false,
            basis_rows_until: None,
        };
        let template = bundle_for(&gt, 0.5);
        let mut theta = flatten(&template, false);
        let mut adam = Adam::new(theta.len(), 0.01);
        for _ in 0..1500 {
            let (_, g) = gradient(&ds, &unflatten(&template, &theta, false), opts).unwrap();
            adam.step(&mut theta, &g.iter().map(|v| -v / 30.0).collect::<Vec<_>>());
        }
        // polish with Newton steps on a finite-difference Hessian
        let grad_at = |th: &[f64]| gradient(&ds, &unflatten(&template, th, false), opts).unwrap().1;
        let n = theta.len();
        for _ in 0..8 {
            let g = grad_at(&theta);
            let mut h = nalgebra::DMatrix::zeros(n, n);
            for j in 0..n {
                let mut a = theta.clone();
                let mut b = theta.clone();
                a[j] += 1e-5;
                b[j] -= 1e-5;
                let (ga, gb) = (grad_at(&a), grad_at(&b));
                for i in 0..n {
                    h[(i, j)] = (ga[i] - gb[i]) / 2e-5;
                }
            }
            let h = (&h + h.transpose()) * 0.5;
            let step = h.lu().solve(&nalgebra::DVector::from_vec(g)).unwrap();
            theta.iter_mut().zip(step.iter()).for_each(|(t, s)| *t -= s);
        }
        let g = grad_at(&theta);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-4, "gradient norm {norm}");
    }

    #[test]
    fn truth_beats_perturbation_on_noiseless_data() {
        let (ds, gt) = generate_dataset(&SimConfig {
            r: 2,
            k: 2,
            levels_per_unit: 1,
            n: 300,
            sigma_noise: 0.0,
            seed: 5,
            ..SimConfig::default()
        })
        .unwrap();
        let truth = bundle_for(&gt, 0.05);
        let mut off = truth.clone();
        if let Some(EffectFamily::Unbounded { w2, .. }) = off.effects.levels.get_mut(&1) {
            w2[0] *= 1.1;
        }
        assert!(objective(&ds, &truth).unwrap() > objective(&ds, &off).unwrap());
    }

    #[test]
    fn finer_step_checks_tighter() {
        let (ds, gt) = tiny(7, 0.5);
        let b = bundle_for(&gt, 0.8);
        assert!(grad_check(&b, &ds, 1e-5, false).unwrap() < grad_check(&b, &ds, 1e-2, false).unwrap());
    }
}
