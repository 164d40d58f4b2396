//! End-to-end experiments: the sparse-intervention forecasting benchmark and
//! the hold-out coverage study.
//!
//! Both draw a training population from the simulator, then a disjoint test
//! population whose units receive, at `T + 1`, a level they have never
//! received before (every level is still seen across the training units).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_fit, baseline_predict, BaselineConfig};
use crate::conformal::{conformal_interval, coverage_eval, plugin_interval, residual_scores, split_quantile};
use crate::data::{Dataset, UnitRecord};
use crate::error::{Error, Result};
use crate::model::{predict_mc, rmse_by_horizon, unit_posterior, one_step_mean, ModelBundle, PosteriorWindow};
use crate::sim::{generate_dataset, GroundTruth, ScheduleMode, SimConfig};
use crate::train::{fit, fit_from, init_effects, FitResult, TrainConfig};

/// Where the structured model's basis comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    /// Learned jointly with the effects.
    #[default]
    Learned,
    /// The simulator's own basis, held fixed.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Population settings; `N`, `schedule_mode` and `first_unit` are
    /// overridden per split.
    pub sim: SimConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub horizon: usize,
    pub basis_mode: BasisMode,
    pub window: PosteriorWindow,
    /// Monte-Carlo rollouts per test unit.
    pub mc_samples: usize,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sim: SimConfig::default(),
            n_train: 2000,
            n_test: 500,
            horizon: 5,
            basis_mode: BasisMode::Oracle,
            window: PosteriorWindow::Full,
            mc_samples: 200,
            // full-batch steps: one per epoch
            train: TrainConfig {
                epochs: 2000,
                lr: 0.05,
                ..TrainConfig::default()
            },
            baseline: BaselineConfig::default(),
        }
    }
}

impl BenchConfig {
    /// Same configuration with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.sim.seed = seed;
        c.train.seed = seed;
        c.baseline.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.horizon == 0 || self.mc_samples == 0 {
            return Err(Error::Config("n_train, n_test, horizon and mc_samples must be ≥ 1".into()));
        }
        self.train.validate()?;
        self.baseline.validate()?;
        self.populations().0.validate()?;
        self.populations().1.validate()
    }

    fn populations(&self) -> (SimConfig, SimConfig) {
        let train = SimConfig {
            n: self.n_train,
            schedule_mode: ScheduleMode::Train,
            first_unit: 0,
            horizon: self.horizon,
            ..self.sim.clone()
        };
        let test = SimConfig {
            n: self.n_test,
            schedule_mode: ScheduleMode::TestUnseen,
            first_unit: self.n_train,
            ..train.clone()
        };
        (train, test)
    }
}

/// Training population, test population and the simulator truth.
pub fn bench_data(cfg: &BenchConfig) -> Result<(Dataset, Dataset, GroundTruth)> {
    let (tr, te) = cfg.populations();
    let (train, truth) = generate_dataset(&tr)?;
    let (test, _) = generate_dataset(&te)?;
    Ok((train, test, truth))
}

/// Fits the structured model with rank `r`.
pub fn fit_structured(
    train: &Dataset,
    r: usize,
    mode: BasisMode,
    truth: &GroundTruth,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    match mode {
        BasisMode::Learned => fit(train, r, cfg),
        BasisMode::Oracle => {
            if truth.basis.r != r {
                return Err(Error::Config(format!(
                    "oracle basis has rank {}, model asks for {r}",
                    truth.basis.r
                )));
            }
            let init = ModelBundle {
                basis: truth.basis.clone(),
                effects: init_effects(train, r, &cfg.levels, cfg.seed),
                noise: crate::model::NoiseScales::new(cfg.init_sigma, cfg.init_sigma_beta)?,
            };
            let cfg = TrainConfig {
                optimize_basis: false,
                ..cfg.clone()
            };
            fit_from(train, init, &cfg)
        }
    }
}

/// Splits a test unit at `t` into its history and the next `horizon` actions
/// and outcomes.
pub fn forecast_window(unit: &UnitRecord, t: usize, horizon: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if unit.d.len() < t + horizon {
        return Err(Error::InvalidUnit {
            unit_id: unit.unit_id.clone(),
            msg: format!("needs {} steps for a {horizon}-step forecast after t = {t}", t + horizon),
        });
    }
    Ok((unit.d[t..t + horizon].to_vec(), unit.x[t + 1..=t + horizon].to_vec()))
}

/// Monte-Carlo mean forecast of `x^{t+1..t+Δ}`.
pub fn forecast_structured(
    bundle: &ModelBundle,
    unit: &UnitRecord,
    t: usize,
    t0: usize,
    future_d: &[usize],
    window: PosteriorWindow,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let post = unit_posterior(unit, bundle, window, t0, t)?;
    Ok(predict_mc(unit, t, bundle, &post, future_d, samples, seed)?.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    pub selected_epoch: usize,
    pub sigma_hat: f64,
}

impl BenchResult {
    fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == name)
    }

    /// True when the structured model has lower RMSE at every horizon.
    pub fn structured_wins(&self) -> bool {
        match (self.row("structured"), self.row("baseline")) {
            (Some(s), Some(b)) => s.rmse.iter().zip(&b.rmse).all(|(a, b)| a < b),
            _ => false,
        }
    }

    /// Table with one row per model and columns `T+1..T+Δ`.
    pub fn to_csv(&self) -> String {
        let h = self.rows.first().map_or(0, |r| r.rmse.len());
        let mut out = String::from("model");
        for j in 1..=h {
            out.push_str(&format!(",T+{j}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.model);
            for v in &row.rmse {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Structured model vs recurrent baseline on unseen-level forecasts.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let (train, test, truth) = bench_data(cfg)?;
    let t = cfg.sim.t;
    let fitted = fit_structured(&train, cfg.sim.r, cfg.basis_mode, &truth, &cfg.train)?;
    let baseline = baseline_fit(&train, &cfg.baseline)?;

    let per_unit: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = test
        .units
        .par_iter()
        .map(|u| {
            let (future_d, actual) = forecast_window(u, t, cfg.horizon)?;
            let s = forecast_structured(
                &fitted.bundle,
                u,
                t,
                cfg.sim.t0,
                &future_d,
                cfg.window,
                cfg.mc_samples,
                cfg.sim.seed,
            )?;
            let b = baseline_predict(&baseline, &u.x[..=t], &u.d[..t], &u.z, &future_d)?;
            Ok((s, b, actual))
        })
        .collect::<Result<_>>()?;
    let actual: Vec<Vec<f64>> = per_unit.iter().map(|p| p.2.clone()).collect();
    let structured: Vec<Vec<f64>> = per_unit.iter().map(|p| p.0.clone()).collect();
    let black_box: Vec<Vec<f64>> = per_unit.iter().map(|p| p.1.clone()).collect();
    Ok(BenchResult {
        seed: cfg.sim.seed,
        rows: vec![
            BenchRow {
                model: "structured".into(),
                rmse: rmse_by_horizon(&structured, &actual)?,
            },
            BenchRow {
                model: "baseline".into(),
                rmse: rmse_by_horizon(&black_box, &actual)?,
            },
        ],
        selected_epoch: fitted.selected_epoch,
        sigma_hat: fitted.bundle.noise.sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub sim: SimConfig,
    /// Rank of the fitted model (below `sim.r` for a misspecified fit).
    pub fit_r: usize,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub alpha: f64,
    pub basis_mode: BasisMode,
    pub window: PosteriorWindow,
    pub train: TrainConfig,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            sim: SimConfig {
                seed: 42,
                ..SimConfig::default()
            },
            fit_r: 2,
            n_train: 2000,
            n_cal: 2000,
            n_test: 2000,
            alpha: 0.05,
            basis_mode: BasisMode::Learned,
            window: PosteriorWindow::Full,
            train: TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub alpha: f64,
    pub q_hat: f64,
    pub sigma_hat: f64,
    pub conformal_coverage: f64,
    pub plugin_coverage: f64,
    pub conformal_width: f64,
    pub plugin_width: f64,
}

/// One-step forecasts of `x^{T+1}` (the first post-history step, under the
/// unit's unseen level) for every unit, with the realized values.
pub fn one_step_forecasts(bundle: &ModelBundle, ds: &Dataset, t: usize, window: PosteriorWindow) -> Result<(Vec<f64>, Vec<f64>)> {
    let pairs: Vec<(f64, f64)> = ds
        .units
        .par_iter()
        .map(|u| {
            let (future_d, actual) = forecast_window(u, t, 1)?;
            let post = unit_posterior(u, bundle, window, ds.meta.t0, t)?;
            Ok((one_step_mean(u, t, bundle, &post, future_d[0])?, actual[0]))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Split conformal vs plug-in Gaussian intervals on exchangeable hold-out
/// populations.
pub fn run_coverage(cfg: &CoverageConfig) -> Result<CoverageResult> {
    let base = SimConfig {
        schedule_mode: ScheduleMode::Train,
        n: cfg.n_train,
        first_unit: 0,
        ..cfg.sim.clone()
    };
    let held = |n: usize, first: usize| SimConfig {
        schedule_mode: ScheduleMode::TestUnseen,
        horizon: base.horizon.max(1),
        n,
        first_unit: first,
        ..base.clone()
    };
    let (train, truth) = generate_dataset(&base)?;
    let (cal, _) = generate_dataset(&held(cfg.n_cal, cfg.n_train))?;
    let (test, _) = generate_dataset(&held(cfg.n_test, cfg.n_train + cfg.n_cal))?;
    let fitted = fit_structured(&train, cfg.fit_r, cfg.basis_mode, &truth, &cfg.train)?;
    let b = &fitted.bundle;
    let t = cfg.sim.t;

    let (cal_pred, cal_actual) = one_step_forecasts(b, &cal, t, cfg.window)?;
    let q_hat = split_quantile(&residual_scores(&cal_pred, &cal_actual)?, cfg.alpha);
    let (pred, actual) = one_step_forecasts(b, &test, t, cfg.window)?;
    let cp: Vec<_> = pred.iter().map(|&p| conformal_interval(p, q_hat)).collect();
    let plug: Vec<_> = pred
        .iter()
        .map(|&p| plugin_interval(p, b.noise.sigma, cfg.alpha))
        .collect::<Result<_>>()?;
    Ok(CoverageResult {
        alpha: cfg.alpha,
        q_hat,
        sigma_hat: b.noise.sigma,
        conformal_coverage: coverage_eval(&cp, &actual)?,
        plugin_coverage: coverage_eval(&plug, &actual)?,
        conformal_width: 2.0 * q_hat,
        plugin_width: plug.first().map_or(0.0, |iv| iv.width()),
    })
}
