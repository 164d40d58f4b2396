//! Fully synthetic ground-truth generator.
//!
//! All parameters (effects, basis, initial-state map, per-unit random effects)
//! are drawn from fixed distributions under one seed; schedules follow rules
//! that keep every level identifiable: an all-default burn-in, distinct levels
//! per unit, and at least two default steps after every non-default action.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_init_random, BasisParams};
use crate::data::{Dataset, DatasetMeta, UnitRecord};
use crate::effects::{psi_aggregate, EffectFamily, EffectParams};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::conditional_mean;
use crate::rng::{self, Rng};

/// Default steps required after each non-default action.
pub const MIN_GAP: usize = 2;
const X0_HIDDEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    #[default]
    Train,
    /// History as in `Train` (ending early enough to keep the gap), then one
    /// level the unit has not received at `T + 1`, then defaults to `T + Δ`.
    TestUnseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub r: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "T0")]
    pub t0: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub z_dim: usize,
    /// Distinct non-default levels per unit.
    #[serde(rename = "I")]
    pub levels_per_unit: usize,
    pub sigma_noise: f64,
    pub seed: u64,
    /// Hidden width of the ground-truth basis.
    pub hidden: usize,
    pub schedule_mode: ScheduleMode,
    /// Future steps appended in `test_unseen` mode.
    pub horizon: usize,
    /// Index of the first generated unit; keeps ids (and streams) of separate
    /// draws from the same simulator disjoint.
    pub first_unit: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            r: 5,
            t: 20,
            t0: 10,
            k: 5,
            n: 50_000,
            z_dim: 5,
            levels_per_unit: 3,
            sigma_noise: 1.0,
            seed: 1,
            hidden: 16,
            schedule_mode: ScheduleMode::Train,
            horizon: 5,
            first_unit: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.r == 0 || self.z_dim == 0 || self.hidden == 0 {
            return bad("r, z_dim and hidden must be at least 1".into());
        }
        if self.t0 < self.r {
            return bad(format!("T0 = {} must be at least r = {}", self.t0, self.r));
        }
        if self.t0 > self.t {
            return bad(format!("T0 = {} exceeds T = {}", self.t0, self.t));
        }
        if self.k < 1 || self.levels_per_unit > self.k - 1 {
            return bad(format!("I = {} exceeds K − 1 = {}", self.levels_per_unit, self.k.saturating_sub(1)));
        }
        if self.schedule_mode == ScheduleMode::TestUnseen {
            if self.levels_per_unit + 1 > self.k - 1 {
                return bad("test mode needs a level each unit has not received".into());
            }
            if self.horizon == 0 {
                return bad("test mode needs horizon ≥ 1".into());
            }
        }
        if !(self.sigma_noise >= 0.0) {
            return bad("sigma_noise must be non-negative".into());
        }
        Ok(())
    }

    /// Total action steps per generated unit.
    pub fn total_steps(&self) -> usize {
        match self.schedule_mode {
            ScheduleMode::Train => self.t,
            ScheduleMode::TestUnseen => self.t + self.horizon,
        }
    }
}

/// Random single-hidden-layer map `z ↦ x^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateMap {
    pub w_hidden: Mat,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl InitialStateMap {
    fn random(z_dim: usize, rng: &mut Rng) -> Self {
        let mut u = || rng.random_range(-0.5..0.5);
        InitialStateMap {
            w_hidden: Mat::from_fn(X0_HIDDEN, z_dim, |_, _| u()),
            b_hidden: (0..X0_HIDDEN).map(|_| u()).collect(),
            w_out: (0..X0_HIDDEN).map(|_| u()).collect(),
            b_out: u(),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let mut h = self.b_hidden.clone();
        self.w_hidden.mul_vec_acc(z, &mut h);
        self.b_out + h.iter().zip(&self.w_out).map(|(a, w)| a.tanh() * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTruth {
    pub unit_id: String,
    pub mu: f64,
    pub sigma: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub effects: EffectParams,
    pub basis: BasisParams,
    pub initial_state: InitialStateMap,
    pub units: Vec<UnitTruth>,
}

/// Levels `1, 2` (and every 4th after) draw positive parameters, `3, 4` negative.
pub fn sample_effect_params(rng: &mut Rng, k: usize, r: usize) -> Result<EffectParams> {
    if k < 2 {
        return Err(Error::Config("need at least one non-default level (K ≥ 2)".into()));
    }
    let mut ep = EffectParams::new(r);
    for d in 1..k {
        let (a, b, c) = if (d - 1) % 4 < 2 {
            ((1.0, 2.0), (1.0, 2.0), (2.0, 3.0))
        } else {
            ((-2.0, -1.0), (-2.0, -1.0), (-1.0, 0.0))
        };
        let mut draw = |(lo, hi): (f64, f64)| -> Vec<f64> { (0..r).map(|_| rng.random_range(lo..hi)).collect() };
        let w1 = draw(a);
        let w2 = draw(b);
        let w3 = draw(c);
        ep.levels.insert(d, EffectFamily::Unbounded { w1, w2, w3 });
    }
    Ok(ep)
}

/// Action schedule of length `T` (train) or `T + Δ` (test).
pub fn sample_schedule(
    rng: &mut Rng,
    t: usize,
    t0: usize,
    k: usize,
    levels_per_unit: usize,
    mode: ScheduleMode,
    horizon: usize,
) -> Result<Vec<usize>> {
    let total = match mode {
        ScheduleMode::Train => t,
        ScheduleMode::TestUnseen => t + horizon,
    };
    let mut d = vec![0usize; total];
    let n_extra = usize::from(mode == ScheduleMode::TestUnseen);
    if levels_per_unit + n_extra > k.saturating_sub(1) {
        return Err(Error::Infeasible(format!(
            "{} distinct levels requested from K − 1 = {}",
            levels_per_unit + n_extra,
            k.saturating_sub(1)
        )));
    }
    let mut levels: Vec<usize> = (1..k).collect();
    levels.shuffle(rng);
    if levels_per_unit > 0 {
        // latest admissible action time for the recorded history
        let last = match mode {
            ScheduleMode::Train => t,
            ScheduleMode::TestUnseen => t.saturating_sub(MIN_GAP),
        };
        let first = t0 + 1;
        let compressed = (last + 1)
            .checked_sub(first + MIN_GAP * (levels_per_unit - 1))
            .unwrap_or(0);
        if last < first || compressed < levels_per_unit {
            return Err(Error::Infeasible(format!(
                "cannot place {levels_per_unit} actions with gap {MIN_GAP} in ({t0}, {last}]"
            )));
        }
        let mut slots = index::sample(rng, compressed, levels_per_unit).into_vec();
        slots.sort_unstable();
        for (j, (s, &level)) in slots.iter().zip(&levels).enumerate() {
            let time = first + s + MIN_GAP * j;
            d[time - 1] = level;
        }
    }
    if mode == ScheduleMode::TestUnseen {
        let unseen = &levels[levels_per_unit..];
        d[t] = unseen[rng.random_range(0..unseen.len())];
    }
    Ok(d)
}

/// Checks the schedule rules; returns the first violation.
pub fn check_schedule(d: &[usize], t0: usize) -> std::result::Result<(), String> {
    if d.iter().take(t0).any(|&l| l != 0) {
        return Err("non-default action inside burn-in".into());
    }
    let mut seen = std::collections::HashSet::new();
    for (i, &l) in d.iter().enumerate() {
        if l == 0 {
            continue;
        }
        if !seen.insert(l) {
            return Err(format!("level {l} repeated"));
        }
        let end = (i + 1 + MIN_GAP).min(d.len());
        if d[i + 1..end].iter().any(|&v| v != 0) {
            return Err(format!("action at t={} not followed by {MIN_GAP} defaults", i + 1));
        }
    }
    Ok(())
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let effects = sample_effect_params(&mut rng::substream(cfg.seed, "effects"), cfg.k, cfg.r)?;
    let basis = basis_init_random(cfg.seed, cfg.z_dim, cfg.hidden, cfg.r, true);
    let initial_state = InitialStateMap::random(cfg.z_dim, &mut rng::substream(cfg.seed, "x0"));

    let generated: Vec<(UnitRecord, UnitTruth)> = (cfg.first_unit..cfg.first_unit + cfg.n)
        .into_par_iter()
        .map(|idx| generate_unit(cfg, idx, &effects, &basis, &initial_state))
        .collect::<Result<_>>()?;
    let (units, truths): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    let meta = DatasetMeta {
        k: cfg.k,
        t: cfg.total_steps(),
        t0: cfg.t0,
        z_dim: cfg.z_dim,
        r_hint: Some(cfg.r),
    };
    let ds = Dataset::new(meta, units)?;
    Ok((
        ds,
        GroundTruth {
            effects,
            basis,
            initial_state,
            units: truths,
        },
    ))
}

fn generate_unit(
    cfg: &SimConfig,
    idx: usize,
    effects: &EffectParams,
    basis: &BasisParams,
    x0_map: &InitialStateMap,
) -> Result<(UnitRecord, UnitTruth)> {
    let unit_id = format!("u{idx}");
    let mut rng = rng::stream(cfg.seed, &unit_id);
    let std_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mu = std_normal.sample(&mut rng);
    let sigma = std_normal.sample(&mut rng).exp();
    let beta_dist = Normal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let beta: Vec<f64> = (0..cfg.r).map(|_| beta_dist.sample(&mut rng)).collect();
    let z_dist = Normal::new(0.0, 3.0).expect("covariate normal");
    let z: Vec<f64> = (0..cfg.z_dim).map(|_| z_dist.sample(&mut rng)).collect();
    let d = sample_schedule(
        &mut rng,
        cfg.t,
        cfg.t0,
        cfg.k,
        cfg.levels_per_unit,
        cfg.schedule_mode,
        cfg.horizon,
    )?;

    let total = d.len();
    let mut x = Vec::with_capacity(total + 1);
    x.push(x0_map.eval(&z));
    let mut run = basis.runner(&z)?;
    for t in 1..=total {
        let phi = run.advance(x[t - 1]);
        let psi = psi_aggregate(effects, &d, t)?;
        let mean = conditional_mean(&phi, &beta, &psi)?;
        let noise = if cfg.sigma_noise > 0.0 {
            cfg.sigma_noise * std_normal.sample(&mut rng)
        } else {
            0.0
        };
        x.push(mean + noise);
    }
    Ok((
        UnitRecord {
            unit_id: unit_id.clone(),
            z,
            x,
            d,
        },
        UnitTruth {
            unit_id,
            mu,
            sigma,
            beta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::basis_eval;

    #[test]
    fn effect_draw_ranges() {
        let ep = sample_effect_params(&mut rng::master(3), 9, 5).unwrap();
        for (&d, fam) in &ep.levels {
            let EffectFamily::Unbounded { w1, w2, w3 } = fam else {
                panic!("unexpected family")
            };
            let pos = (d - 1) % 4 < 2;
            for l in 0..5 {
                if pos {
                    assert!((1.0..=2.0).contains(&w1[l]) && (1.0..=2.0).contains(&w2[l]));
                    assert!((2.0..=3.0).contains(&w3[l]));
                } else {
                    assert!((-2.0..=-1.0).contains(&w1[l]) && (-2.0..=-1.0).contains(&w2[l]));
                    assert!((-1.0..=0.0).contains(&w3[l]));
                }
            }
        }
        assert_eq!(ep.factor(0, 4).unwrap(), vec![1.0; 5]);
        let again = sample_effect_params(&mut rng::master(3), 9, 5).unwrap();
        assert_eq!(again, ep);
    }

    #[test]
    fn schedule_rules_default_config() {
        let mut g = rng::master(17);
        for _ in 0..1000 {
            let d = sample_schedule(&mut g, 20, 10, 5, 3, ScheduleMode::Train, 5).unwrap();
            assert_eq!(d.len(), 20);
            assert_eq!(d.iter().filter(|&&l| l != 0).count(), 3);
            check_schedule(&d, 10).unwrap();
        }
    }

    #[test]
    fn test_mode_appends_unseen_level() {
        let mut g = rng::master(4);
        for _ in 0..500 {
            let d = sample_schedule(&mut g, 20, 10, 5, 3, ScheduleMode::TestUnseen, 5).unwrap();
            assert_eq!(d.len(), 25);
            check_schedule(&d, 10).unwrap();
            assert_ne!(d[20], 0);
            assert!(d[21..].iter().all(|&l| l == 0));
            assert!(!d[..20].contains(&d[20]));
        }
    }

    #[test]
    fn zero_levels_all_default() {
        let d = sample_schedule(&mut rng::master(1), 12, 4, 3, 0, ScheduleMode::Train, 1).unwrap();
        assert!(d.iter().all(|&l| l == 0));
    }

    #[test]
    fn infeasible_schedule() {
        assert!(matches!(
            sample_schedule(&mut rng::master(1), 12, 10, 5, 3, ScheduleMode::Train, 1),
            Err(Error::Infeasible(_))
        ));
        assert!(sample_schedule(&mut rng::master(1), 30, 10, 3, 2, ScheduleMode::TestUnseen, 1).is_err());
    }

    fn small(sigma: f64) -> SimConfig {
        SimConfig {
            n: 40,
            sigma_noise: sigma,
            seed: 8,
            ..SimConfig::default()
        }
    }

    #[test]
    fn noiseless_is_exact_fixed_point() {
        let (ds, gt) = generate_dataset(&small(0.0)).unwrap();
        for (u, truth) in ds.units.iter().zip(&gt.units) {
            assert_eq!(u.x[0], gt.initial_state.eval(&u.z));
            for t in 1..=u.horizon() {
                let phi = basis_eval(&gt.basis, &u.x[..t], &u.z).unwrap();
                let psi = psi_aggregate(&gt.effects, &u.d, t).unwrap();
                let mean = conditional_mean(&phi, &truth.beta, &psi).unwrap();
                assert_eq!(u.x[t], mean);
            }
        }
    }

    #[test]
    fn seeded_and_disjoint() {
        let a = generate_dataset(&small(1.0)).unwrap();
        let b = generate_dataset(&small(1.0)).unwrap();
        assert_eq!(a, b);
        let mut cfg = small(1.0);
        cfg.first_unit = 40;
        let c = generate_dataset(&cfg).unwrap();
        assert_eq!(c.1.effects, a.1.effects);
        assert_ne!(c.0.units[0].x, a.0.units[0].x);
        assert_eq!(c.0.units[0].unit_id, "u40");
    }

    #[test]
    fn default_config_mirrors_paper_scale() {
        let cfg = SimConfig::default();
        assert_eq!((cfg.r, cfg.t, cfg.t0, cfg.k, cfg.z_dim, cfg.levels_per_unit), (5, 20, 10, 5, 5, 3));
        assert_eq!(cfg.n, 50_000);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_json_defaults() {
        let cfg: SimConfig = serde_json::from_str("{\"N\": 10, \"schedule_mode\": \"test_unseen\"}").unwrap();
        assert_eq!(cfg.n, 10);
        assert_eq!(cfg.schedule_mode, ScheduleMode::TestUnseen);
        assert_eq!(cfg.total_steps(), 25);
        assert!(serde_json::from_str::<SimConfig>("{\"bogus\": 1}").is_err());
    }
}
