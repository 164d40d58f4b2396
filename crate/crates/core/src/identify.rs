//! Assumption checks and constructive recovery of β and ψ from the
//! conditional means, given a known basis.
//!
//! β_n is the least-squares solution over the unit's all-default window.
//! Effect lags of a level are the shared unknowns of a cross-sectional
//! regression over the units that receive it: at `t = s + τ` the mean is
//! `Σ_l (φ^t_l β_nl C_nl) ψ_l(d, τ)`, where the carry `C` collects the factors
//! of the unit's other actions. Levels are processed in order of first use;
//! a unit only contributes to a lag once every other factor in its carry is
//! known, so later levels reuse what earlier ones identified. Unbounded
//! levels are then inverted from lags 1..3.
//!
//! With noisy data the realized outcomes stand in for the conditional means,
//! which makes every step a plug-in estimator that is exact only at σ = 0.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_eval_series, BasisParams};
use crate::data::{Dataset, UnitRecord};
use crate::effects::{EffectFamily, EffectParams, LevelShape};
use crate::error::{Error, Result};
use crate::linalg::{dot, logit, lstsq, rank_and_cond, singular_values};

/// `|ψ̂|` below this is reported as a likely violation of the non-zero effect
/// requirement.
pub const NEAR_ZERO_PSI: f64 = 1e-8;
/// Lags of an unbounded level used by the identification step.
pub const UNBOUNDED_LAGS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rows: usize,
    pub rank: usize,
    pub expected: usize,
    pub cond: f64,
}

impl RankInfo {
    fn of(a: &DMatrix<f64>) -> Self {
        let (rank, cond) = rank_and_cond(&singular_values(a));
        RankInfo {
            rows: a.nrows(),
            rank,
            expected: a.ncols(),
            cond,
        }
    }

    pub fn full(&self) -> bool {
        self.rows >= self.expected && self.rank == self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCheck {
    pub unit_id: String,
    pub burn_in: usize,
    /// Rank of the burn-in design `A_n`.
    pub burn_in_rank: RankInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCheck {
    pub level: usize,
    pub k_d: usize,
    pub first_use: Option<usize>,
    /// Units applying the level with the required default gap after it.
    pub n_units: usize,
    /// Units applying the level at all.
    pub n_applied: usize,
    /// Smallest run of defaults after an application that is not cut off by
    /// the end of the series.
    pub min_gap: Option<usize>,
    /// Basis-row rank at each lag needed for identification.
    pub lag_ranks: Vec<RankInfo>,
    pub a3: bool,
    pub a4: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub r: usize,
    pub units: Vec<UnitCheck>,
    pub levels: Vec<LevelCheck>,
    /// Burn-in at least `r` for every unit.
    pub a1: bool,
    /// Every burn-in design has full column rank.
    pub a2: bool,
    /// Enough units per level and default gaps after every action.
    pub a3: bool,
    /// Every per-lag design of every level has full column rank.
    pub a4: bool,
    pub failures: Vec<String>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.a1 && self.a2 && self.a3 && self.a4
    }
}

fn shape_of(shapes: &BTreeMap<usize, LevelShape>, level: usize) -> LevelShape {
    shapes.get(&level).copied().unwrap_or(LevelShape::Unbounded)
}

/// Lags identified for a level of the given shape.
pub fn lags_needed(shape: LevelShape) -> usize {
    match shape {
        LevelShape::Unbounded => UNBOUNDED_LAGS,
        LevelShape::Bounded { k } => k,
    }
}

/// Basis rows `φ^1..φ^T` for every unit.
fn all_basis_rows(ds: &Dataset, bp: &BasisParams) -> Result<Vec<Vec<Vec<f64>>>> {
    ds.units
        .par_iter()
        .map(|u| basis_eval_series(bp, &u.x, &u.z))
        .collect()
}

/// Rows `φ^t`, `t = 2..=T0n`, stacked as `A_n`.
fn burn_in_design(phi: &[Vec<f64>], unit: &UnitRecord, r: usize) -> (DMatrix<f64>, DVector<f64>) {
    let t0 = unit.burn_in();
    let n = t0.saturating_sub(1);
    let a = DMatrix::from_fn(n, r, |i, l| phi[i + 1][l]);
    let b = DVector::from_fn(n, |i, _| unit.x[i + 2]);
    (a, b)
}

pub fn check_assumptions(
    ds: &Dataset,
    r: usize,
    shapes: &BTreeMap<usize, LevelShape>,
    bp: &BasisParams,
) -> Result<AssumptionReport> {
    if bp.r != r {
        return Err(Error::Shape(format!("basis has r = {}, expected {r}", bp.r)));
    }
    let phis = all_basis_rows(ds, bp)?;
    let mut failures = Vec::new();

    let units: Vec<UnitCheck> = ds
        .units
        .par_iter()
        .zip(&phis)
        .map(|(u, phi)| {
            let (a, _) = burn_in_design(phi, u, r);
            UnitCheck {
                unit_id: u.unit_id.clone(),
                burn_in: u.burn_in(),
                burn_in_rank: RankInfo::of(&a),
            }
        })
        .collect();
    let a1_bad: Vec<&UnitCheck> = units.iter().filter(|u| u.burn_in < r).collect();
    let a2_bad: Vec<&UnitCheck> = units.iter().filter(|u| !u.burn_in_rank.full()).collect();
    if let Some(u) = a1_bad.first() {
        failures.push(format!(
            "{} unit(s) with burn-in below r = {r}, e.g. {} (T0 = {})",
            a1_bad.len(),
            u.unit_id,
            u.burn_in
        ));
    }
    if let Some(u) = a2_bad.first() {
        failures.push(format!(
            "{} unit(s) with rank-deficient burn-in design, e.g. {} (rank {} of {})",
            a2_bad.len(),
            u.unit_id,
            u.burn_in_rank.rank,
            r
        ));
    }

    let mut used: BTreeSet<usize> = ds.units.iter().flat_map(|u| u.applications()).map(|(_, d)| d).collect();
    used.extend(shapes.keys().copied().filter(|&d| d != 0));
    let mut levels = Vec::new();
    for &d in &used {
        let shape = shape_of(shapes, d);
        let k_d = shape.k_d();
        let mut first_use: Option<usize> = None;
        let mut min_gap: Option<usize> = None;
        let mut n_applied = 0;
        let mut members: Vec<(usize, usize)> = Vec::new();
        let mut gaps_ok = true;
        for (ui, u) in ds.units.iter().enumerate() {
            let Some(s) = u.d.iter().position(|&l| l == d).map(|i| i + 1) else {
                continue;
            };
            n_applied += 1;
            first_use = Some(first_use.map_or(s, |f| f.min(s)));
            let zeros = u.d[s..].iter().take_while(|&&l| l == 0).count();
            let truncated = s + zeros == u.horizon();
            if !truncated {
                min_gap = Some(min_gap.map_or(zeros, |g| g.min(zeros)));
            }
            if zeros + 1 >= k_d || truncated {
                members.push((ui, s));
            } else {
                gaps_ok = false;
            }
        }
        let n_units = members.len();
        let a3 = n_units >= r && gaps_ok;
        if !a3 {
            failures.push(format!(
                "level {d}: {n_units} unit(s) with the required gap (need {r}){}",
                if gaps_ok { "" } else { "; some applications lack k_d − 1 default steps" }
            ));
        }
        let lag_ranks: Vec<RankInfo> = (0..lags_needed(shape))
            .map(|tau| {
                let rows: Vec<&Vec<f64>> = members
                    .iter()
                    .filter(|&&(ui, s)| s + tau <= ds.units[ui].horizon())
                    .map(|&(ui, s)| &phis[ui][s + tau - 1])
                    .collect();
                RankInfo::of(&DMatrix::from_fn(rows.len(), r, |i, l| rows[i][l]))
            })
            .collect();
        let a4 = lag_ranks.iter().all(RankInfo::full);
        if !a4 {
            failures.push(format!("level {d}: rank-deficient design at some lag"));
        }
        levels.push(LevelCheck {
            level: d,
            k_d,
            first_use,
            n_units,
            n_applied,
            min_gap,
            lag_ranks,
            a3,
            a4,
        });
    }
    Ok(AssumptionReport {
        r,
        a1: a1_bad.is_empty(),
        a2: a2_bad.is_empty(),
        a3: levels.iter().all(|l| l.a3),
        a4: levels.iter().all(|l| l.a4),
        units,
        levels,
        failures,
    })
}

/// `β̂ = A_n⁺ b_n` over the unit's all-default window.
pub fn identify_beta(unit: &UnitRecord, bp: &BasisParams, r: usize) -> Result<Vec<f64>> {
    let phi = basis_eval_series(bp, &unit.x, &unit.z)?;
    Ok(fit_beta(&phi, unit, r)?.beta)
}

#[derive(Debug, Clone)]
struct BetaFit {
    beta: Vec<f64>,
    rank: RankInfo,
    rss: f64,
    dof: usize,
}

fn fit_beta(phi: &[Vec<f64>], unit: &UnitRecord, r: usize) -> Result<BetaFit> {
    let (a, b) = burn_in_design(phi, unit, r);
    let context = format!("burn-in design of unit {}", unit.unit_id);
    let sol = lstsq(&a, &b, &context)?;
    let beta = sol.solution;
    let resid = &b - &a * DVector::from_column_slice(&beta);
    Ok(BetaFit {
        beta,
        rank: RankInfo {
            rows: a.nrows(),
            rank: sol.rank,
            expected: r,
            cond: sol.cond,
        },
        rss: resid.norm_squared(),
        dof: a.nrows() - r,
    })
}

/// Recovers `(w1, w2, w3)` from the lag-1, 2, 3 values of an unbounded level.
pub fn invert_unbounded(alpha1: &[f64], alpha2: &[f64], alpha3: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let r = alpha1.len();
    if alpha2.len() != r || alpha3.len() != r {
        return Err(Error::Shape("lag vectors differ in length".into()));
    }
    let (mut w1, mut w2, mut w3) = (vec![0.0; r], vec![0.0; r], vec![0.0; r]);
    for l in 0..r {
        let den = alpha1[l] - alpha2[l];
        if !(den.abs() >= 1e-12) {
            return Err(Error::Degenerate { component: l });
        }
        let s = (alpha2[l] - alpha3[l]) / den;
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InversionDomain { component: l, ratio: s });
        }
        w1[l] = logit(s);
        w2[l] = (alpha1[l] - alpha3[l]) / (s - s * s * s);
        w3[l] = alpha1[l] - s * w2[l];
    }
    Ok((w1, w2, w3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitBeta {
    pub unit_id: String,
    pub beta: Vec<f64>,
    pub rank: RankInfo,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagFit {
    pub lag: usize,
    pub rank: RankInfo,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFit {
    pub level: usize,
    /// Fixed-point pass in which the level became identifiable.
    pub pass: usize,
    pub lags: Vec<LagFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionFailure {
    pub level: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IdentifyDiagnostics {
    /// Levels in the order they were identified.
    pub order: Vec<usize>,
    pub levels: Vec<LevelFit>,
    pub inversion_failures: Vec<InversionFailure>,
    /// Pooled residual variance of the burn-in fits.
    pub sigma2_hat: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyResult {
    pub r: usize,
    pub beta_hat: Vec<UnitBeta>,
    /// `psi_lag_hat[d][τ][l] = ψ̂_l(d, τ)`.
    pub psi_lag_hat: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Every bounded level and every unbounded level whose inversion succeeded.
    pub effect_params_hat: EffectParams,
    pub diagnostics: IdentifyDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct IdentifyOptions {
    /// Record inversion failures as diagnostics instead of failing.
    pub allow_inversion_failure: bool,
    /// Skip the assumption check (useful for partial data).
    pub skip_check: bool,
}

struct Known {
    lags: BTreeMap<usize, Vec<Vec<f64>>>,
    families: BTreeMap<usize, EffectFamily>,
}

impl Known {
    fn factor(&self, level: usize, lag: usize) -> Option<Vec<f64>> {
        if let Some(v) = self.lags.get(&level).and_then(|v| v.get(lag)) {
            return Some(v.clone());
        }
        let fam = self.families.get(&level)?;
        let r = match fam {
            EffectFamily::Unbounded { w1, .. } => w1.len(),
            EffectFamily::Bounded { w, .. } => w.len(),
        };
        Some((0..r).map(|l| fam.value(l, lag)).collect())
    }
}

struct Prepared<'a> {
    ds: &'a Dataset,
    r: usize,
    phis: Vec<Vec<Vec<f64>>>,
    betas: Vec<BetaFit>,
    sigma2: f64,
}

/// Product of the known factors of every action of `unit` other than the one
/// at `skip`, evaluated at `t`. `None` when one of them is still unknown.
fn carry(unit: &UnitRecord, skip: usize, t: usize, known: &Known, r: usize) -> Option<Vec<f64>> {
    let mut c = vec![1.0; r];
    for (s, d) in unit.applications() {
        if s == skip || s > t {
            continue;
        }
        let f = known.factor(d, t - s)?;
        c.iter_mut().zip(&f).for_each(|(a, b)| *a *= b);
    }
    Some(c)
}

/// Lag regression of `level` at lag `tau`; `None` when too few units are
/// eligible for a full-rank solve.
fn solve_lag(
    prep: &Prepared,
    betas: &[Vec<f64>],
    level: usize,
    tau: usize,
    known: &Known,
) -> Result<std::result::Result<(Vec<f64>, LagFit), RankInfo>> {
    let r = prep.r;
    struct Row {
        feat: Vec<f64>,
        target: f64,
    }
    let rows: Vec<Row> = prep
        .ds
        .units
        .par_iter()
        .enumerate()
        .filter_map(|(ui, u)| {
            let s = u.d.iter().position(|&l| l == level)? + 1;
            let t = s + tau;
            if t > u.horizon() {
                return None;
            }
            let c = carry(u, s, t, known, r)?;
            let phi = &prep.phis[ui][t - 1];
            let feat = (0..r).map(|l| phi[l] * c[l] * betas[ui][l]).collect();
            Some(Row { feat, target: u.x[t] })
        })
        .collect();
    let a = DMatrix::from_fn(rows.len(), r, |i, l| rows[i].feat[l]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i].target);
    let info = RankInfo::of(&a);
    if !info.full() {
        return Ok(Err(info));
    }
    let context = format!("level {level} lag {tau}");
    let psi = lstsq(&a, &y, &context)?.solution;
    let resid: f64 = rows
        .iter()
        .map(|row| (row.target - dot(&row.feat, &psi)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Ok((
        psi,
        LagFit {
            lag: tau,
            rank: info,
            residual_norm: resid,
        },
    )))
}

fn prepare<'a>(ds: &'a Dataset, bp: &BasisParams, r: usize) -> Result<Prepared<'a>> {
    if bp.r != r {
        return Err(Error::Shape(format!("basis has r = {}, expected {r}", bp.r)));
    }
    let phis = all_basis_rows(ds, bp)?;
    let betas: Vec<BetaFit> = ds
        .units
        .par_iter()
        .zip(&phis)
        .map(|(u, phi)| fit_beta(phi, u, r))
        .collect::<Result<_>>()?;
    let dof: usize = betas.iter().map(|b| b.dof).sum();
    let sigma2 = if dof > 0 {
        betas.iter().map(|b| b.rss).sum::<f64>() / dof as f64
    } else {
        0.0
    };
    Ok(Prepared {
        ds,
        r,
        phis,
        betas,
        sigma2,
    })
}

/// Lags `0..n_lags` of a single level, treating every other non-default
/// action as unknown (units with other actions inside the window are left out).
pub fn identify_psi_lags(
    ds: &Dataset,
    level: usize,
    bp: &BasisParams,
    r: usize,
    n_lags: usize,
) -> Result<Vec<Vec<f64>>> {
    let prep = prepare(ds, bp, r)?;
    let betas = prep.betas.iter().map(|b| b.beta.clone()).collect::<Vec<_>>();
    let known = Known {
        lags: BTreeMap::new(),
        families: BTreeMap::new(),
    };
    (0..n_lags)
        .map(|tau| match solve_lag(&prep, &betas, level, tau, &known)? {
            Ok((psi, _)) => Ok(psi),
            Err(info) => Err(Error::RankDeficient {
                context: format!("level {level} lag {tau}"),
                rank: info.rank,
                expected: r,
                cond: info.cond,
            }),
        })
        .collect()
}

pub fn identify_all(
    ds: &Dataset,
    bp: &BasisParams,
    r: usize,
    shapes: &BTreeMap<usize, LevelShape>,
) -> Result<IdentifyResult> {
    identify_with(ds, bp, r, shapes, IdentifyOptions::default())
}

pub fn identify_with(
    ds: &Dataset,
    bp: &BasisParams,
    r: usize,
    shapes: &BTreeMap<usize, LevelShape>,
    opts: IdentifyOptions,
) -> Result<IdentifyResult> {
    if !opts.skip_check {
        let report = check_assumptions(ds, r, shapes, bp)?;
        if !report.passed() {
            return Err(Error::AssumptionFailed(report.failures.join("; ")));
        }
    }
    let prep = prepare(ds, bp, r)?;
    let mut diag = IdentifyDiagnostics {
        sigma2_hat: Some(prep.sigma2),
        ..Default::default()
    };

    // first-use order
    let mut first: BTreeMap<usize, usize> = BTreeMap::new();
    for u in &ds.units {
        for (s, d) in u.applications() {
            let e = first.entry(d).or_insert(s);
            *e = (*e).min(s);
        }
    }
    let mut pending: Vec<usize> = first.keys().copied().collect();
    pending.sort_by_key(|d| (first[d], *d));

    let mut known = Known {
        lags: BTreeMap::new(),
        families: BTreeMap::new(),
    };
    let betas: Vec<Vec<f64>> = prep.betas.iter().map(|b| b.beta.clone()).collect();
    let mut pass = 0;
    let mut last_blocker: Option<(usize, usize, RankInfo)> = None;
    while !pending.is_empty() {
        pass += 1;
        let mut progressed = false;
        let mut still = Vec::new();
        for &d in &pending {
            let shape = shape_of(shapes, d);
            let mut lags = Vec::new();
            let mut fits = Vec::new();
            let mut blocked = None;
            for tau in 0..lags_needed(shape) {
                match solve_lag(&prep, &betas, d, tau, &known)
                    .map_err(|e| Error::Identification { level: d, source: Box::new(e) })?
                {
                    Ok((psi, fit)) => {
                        lags.push(psi);
                        fits.push(fit);
                    }
                    Err(info) => {
                        blocked = Some((tau, info));
                        break;
                    }
                }
            }
            if let Some((tau, info)) = blocked {
                last_blocker = Some((d, tau, info));
                still.push(d);
                continue;
            }
            progressed = true;
            if let Some(fam) = level_family(shape, &lags, r) {
                known.families.insert(d, fam);
            }
            known.lags.insert(d, lags);
            diag.order.push(d);
            diag.levels.push(LevelFit { level: d, pass, lags: fits });
        }
        if !progressed {
            let (d, tau, info) = last_blocker.expect("a blocked level");
            return Err(Error::Identification {
                level: d,
                source: Box::new(Error::RankDeficient {
                    context: format!("lag {tau} design (first use t = {})", first[&d]),
                    rank: info.rank,
                    expected: r,
                    cond: info.cond,
                }),
            });
        }
        pending = still;
    }

    let mut ep = EffectParams::new(r);
    for &d in &diag.order {
        let lags = &known.lags[&d];
        for (tau, psi) in lags.iter().enumerate() {
            for (l, &v) in psi.iter().enumerate() {
                if v.abs() < NEAR_ZERO_PSI {
                    diag.warnings.push(format!("level {d} lag {tau} component {l}: ψ̂ ≈ 0"));
                }
            }
        }
        match shape_of(shapes, d) {
            LevelShape::Bounded { .. } => {
                ep.levels.insert(d, known.families[&d].clone());
            }
            LevelShape::Unbounded => match invert_unbounded(&lags[1], &lags[2], &lags[3]) {
                Ok((w1, w2, w3)) => {
                    ep.levels.insert(d, EffectFamily::Unbounded { w1, w2, w3 });
                }
                Err(e) if opts.allow_inversion_failure => {
                    diag.inversion_failures.push(InversionFailure {
                        level: d,
                        message: e.to_string(),
                    });
                }
                Err(e) => return Err(Error::Identification { level: d, source: Box::new(e) }),
            },
        }
    }

    let beta_hat = ds
        .units
        .iter()
        .zip(&prep.betas)
        .zip(betas)
        .map(|((u, b), beta)| UnitBeta {
            unit_id: u.unit_id.clone(),
            beta,
            rank: b.rank,
            residual_norm: b.rss.sqrt(),
        })
        .collect();
    Ok(IdentifyResult {
        r,
        beta_hat,
        psi_lag_hat: known.lags,
        effect_params_hat: ep,
        diagnostics: diag,
    })
}

/// Parametric family from identified lags; `None` when an unbounded level
/// cannot be inverted.
fn level_family(shape: LevelShape, lags: &[Vec<f64>], r: usize) -> Option<EffectFamily> {
    match shape {
        LevelShape::Bounded { k } => Some(EffectFamily::Bounded {
            k,
            w: (0..r).map(|l| (0..k).map(|tau| lags[tau][l]).collect()).collect(),
        }),
        LevelShape::Unbounded => invert_unbounded(&lags[1], &lags[2], &lags[3])
            .ok()
            .map(|(w1, w2, w3)| EffectFamily::Unbounded { w1, w2, w3 }),
    }
}

/// `|a − b| / max(|b|, floor)`.
pub fn relative_error(est: f64, truth: f64) -> f64 {
    (est - truth).abs() / truth.abs().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sigmoid;
    use crate::sim::{generate_dataset, SimConfig};

    fn forward(w1: f64, w2: f64, w3: f64, lag: i32) -> f64 {
        sigmoid(w1).powi(lag) * w2 + w3
    }

    #[test]
    fn inversion_example() {
        let (w1, w2, w3) = invert_unbounded(&[2.2], &[1.72], &[1.432]).unwrap();
        assert!((w1[0] - 0.405465).abs() < 1e-6);
        assert!((w2[0] - 2.0).abs() < 1e-12);
        assert!((w3[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inversion_errors() {
        assert!(matches!(
            invert_unbounded(&[1.0], &[1.0], &[1.0]),
            Err(Error::Degenerate { component: 0 })
        ));
        // ratio 2 lies outside (0, 1)
        assert!(matches!(
            invert_unbounded(&[2.2, 3.0], &[1.72, 2.0], &[1.432, 0.0]),
            Err(Error::InversionDomain { component: 1, .. })
        ));
    }

    #[test]
    fn inversion_round_trip() {
        let mut g = crate::rng::master(5);
        use rand::Rng as _;
        for _ in 0..200 {
            let t: (f64, f64, f64) = (g.random_range(-3.0..3.0), g.random_range(-3.0..3.0), g.random_range(-3.0..3.0));
            if t.1.abs() < 0.1 {
                continue;
            }
            let a: Vec<f64> = (1..=3).map(|k| forward(t.0, t.1, t.2, k)).collect();
            let (w1, w2, w3) = invert_unbounded(&a[0..1], &a[1..2], &a[2..3]).unwrap();
            assert!((w1[0] - t.0).abs() <= 1e-8 * t.0.abs().max(1.0));
            assert!((w2[0] - t.1).abs() <= 1e-8 * t.1.abs().max(1.0));
            assert!((w3[0] - t.2).abs() <= 1e-8 * t.2.abs().max(1.0));
        }
    }

    fn noiseless() -> (Dataset, crate::sim::GroundTruth) {
        generate_dataset(&SimConfig {
            r: 3,
            k: 3,
            levels_per_unit: 2,
            n: 60,
            t: 24,
            t0: 8,
            sigma_noise: 0.0,
            seed: 2,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn simulated_schedules_pass() {
        let (ds, gt) = noiseless();
        let rep = check_assumptions(&ds, 3, &BTreeMap::new(), &gt.basis).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
        assert_eq!(rep.levels.len(), 2);
    }

    #[test]
    fn short_burn_in_fails_a1() {
        let (mut ds, gt) = noiseless();
        ds.units[0].d[2] = 1;
        ds.units[0].d.iter_mut().skip(3).for_each(|l| *l = 0);
        let rep = check_assumptions(&ds, 3, &BTreeMap::new(), &gt.basis).unwrap();
        assert!(!rep.a1 && !rep.passed());
        assert!(matches!(
            identify_all(&ds, &gt.basis, 3, &BTreeMap::new()),
            Err(Error::AssumptionFailed(_))
        ));
    }

    #[test]
    fn duplicate_rows_fail_a2() {
        // constant history gives identical basis rows once the state settles
        let bp = crate::basis::BasisParams::zeros(1, 2, 2, true);
        let unit = UnitRecord {
            unit_id: "c".into(),
            z: vec![0.0],
            x: vec![0.0; 7],
            d: vec![0, 0, 0, 1, 0, 0],
        };
        let meta = crate::data::DatasetMeta {
            k: 2,
            t: 6,
            t0: 3,
            z_dim: 1,
            r_hint: None,
        };
        let ds = Dataset::new(meta, vec![unit.clone()]).unwrap();
        let rep = check_assumptions(&ds, 2, &BTreeMap::new(), &bp).unwrap();
        assert!(rep.a1 && !rep.a2);
        assert!(identify_beta(&unit, &bp, 2).is_err());
    }

    #[test]
    fn noiseless_beta_exact_and_orthogonal() {
        let (ds, gt) = noiseless();
        for (u, truth) in ds.units.iter().zip(&gt.units) {
            let b = identify_beta(u, &gt.basis, 3).unwrap();
            for l in 0..3 {
                assert!(relative_error(b[l], truth.beta[l]) <= 1e-6);
            }
        }
        let noisy = generate_dataset(&SimConfig {
            sigma_noise: 1.0,
            n: 5,
            ..SimConfig::default()
        })
        .unwrap();
        for u in &noisy.0.units {
            let phi = basis_eval_series(&noisy.1.basis, &u.x, &u.z).unwrap();
            let (a, y) = burn_in_design(&phi, u, 5);
            let b = identify_beta(u, &noisy.1.basis, 5).unwrap();
            let g = a.transpose() * (y - &a * DVector::from_vec(b));
            assert!(g.norm() <= 1e-8, "{}", g.norm());
        }
    }

    #[test]
    fn noiseless_full_pipeline() {
        let (ds, gt) = noiseless();
        let res = identify_all(&ds, &gt.basis, 3, &BTreeMap::new()).unwrap();
        assert_eq!(res.diagnostics.order.len(), 2);
        for (d, fam) in &gt.effects.levels {
            let (EffectFamily::Unbounded { w1, w2, w3 }, EffectFamily::Unbounded { w1: e1, w2: e2, w3: e3 }) =
                (fam, &res.effect_params_hat.levels[d])
            else {
                panic!("family mismatch")
            };
            for l in 0..3 {
                assert!(relative_error(e1[l], w1[l]) <= 1e-6);
                assert!(relative_error(e2[l], w2[l]) <= 1e-6);
                assert!(relative_error(e3[l], w3[l]) <= 1e-6);
            }
        }
    }

    #[test]
    fn single_level_lags_and_scale_invariance() {
        let cfg = SimConfig {
            r: 3,
            k: 2,
            levels_per_unit: 1,
            n: 12,
            sigma_noise: 0.0,
            seed: 9,
            ..SimConfig::default()
        };
        let (ds, gt) = generate_dataset(&cfg).unwrap();
        let lags = identify_psi_lags(&ds, 1, &gt.basis, 3, 4).unwrap();
        for (tau, psi) in lags.iter().enumerate() {
            let truth = gt.effects.factor(1, tau).unwrap();
            for l in 0..3 {
                assert!(relative_error(psi[l], truth[l]) <= 1e-6);
            }
        }
        // β̂ and targets scaled by the same constant, basis rows held fixed
        let prep = prepare(&ds, &gt.basis, 3).unwrap();
        let betas: Vec<Vec<f64>> = prep.betas.iter().map(|b| b.beta.clone()).collect();
        let betas3v: Vec<Vec<f64>> = betas.iter().map(|b| b.iter().map(|v| v * 3.0).collect()).collect();
        let known = Known {
            lags: BTreeMap::new(),
            families: BTreeMap::new(),
        };
        let base = solve_lag(&prep, &betas, 1, 2, &known).unwrap().unwrap().0;
        let ds3 = {
            let mut d3 = ds.clone();
            for u in &mut d3.units {
                u.x.iter_mut().skip(1).for_each(|v| *v *= 3.0);
            }
            d3
        };
        let prep3 = Prepared {
            ds: &ds3,
            r: 3,
            phis: prep.phis.clone(),
            betas: prep.betas.clone(),
            sigma2: 0.0,
        };
        let other = solve_lag(&prep3, &betas3v, 1, 2, &known).unwrap().unwrap().0;
        for l in 0..3 {
            assert!((base[l] - other[l]).abs() <= 1e-9 * base[l].abs().max(1.0));
        }
    }
}
