//! Effect embeddings ψ for each intervention level and their composition over
//! an action sequence.
//!
//! A non-default level `d` applied at `t'` contributes the factor
//! `ψ_l(d, t', t)` to every later time `t ≥ t'`; the aggregate at `t` is the
//! elementwise product over all actions up to and including `t`. Level 0 is the
//! default action and always contributes ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sigmoid;

/// Spacing parameter `k_d` of the decaying family.
pub const UNBOUNDED_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum EffectFamily {
    /// `ψ_l(lag) = σ(w1_l)^lag · w2_l + w3_l`; `w1` is unconstrained.
    #[serde(rename = "unbounded")]
    Unbounded {
        w1: Vec<f64>,
        w2: Vec<f64>,
        w3: Vec<f64>,
    },
    /// `ψ_l(lag) = w[l][min(lag, k−1)]`.
    #[serde(rename = "bounded")]
    Bounded { k: usize, w: Vec<Vec<f64>> },
}

/// Family selector without parameters, used when a level still has to be
/// learned or identified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum LevelShape {
    #[serde(rename = "unbounded")]
    Unbounded,
    #[serde(rename = "bounded")]
    Bounded { k: usize },
}

impl LevelShape {
    /// Minimum number of default steps following an application is `k_d − 1`.
    pub fn k_d(&self) -> usize {
        match *self {
            LevelShape::Unbounded => UNBOUNDED_K,
            LevelShape::Bounded { k } => k,
        }
    }
}

impl EffectFamily {
    pub fn shape(&self) -> LevelShape {
        match self {
            EffectFamily::Unbounded { .. } => LevelShape::Unbounded,
            EffectFamily::Bounded { k, .. } => LevelShape::Bounded { k: *k },
        }
    }

    fn n_params(&self) -> usize {
        match self {
            EffectFamily::Unbounded { w1, .. } => 3 * w1.len(),
            EffectFamily::Bounded { w, k } => w.len() * k,
        }
    }

    #[inline]
    pub(crate) fn value(&self, l: usize, lag: usize) -> f64 {
        match self {
            EffectFamily::Unbounded { w1, w2, w3 } => {
                sigmoid(w1[l]).powi(lag as i32) * w2[l] + w3[l]
            }
            EffectFamily::Bounded { k, w } => w[l][lag.min(k - 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectParams {
    pub r: usize,
    pub levels: BTreeMap<usize, EffectFamily>,
}

impl EffectParams {
    pub fn new(r: usize) -> Self {
        EffectParams {
            r,
            levels: BTreeMap::new(),
        }
    }

    pub fn with_level(mut self, level: usize, family: EffectFamily) -> Self {
        self.levels.insert(level, family);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r;
        if self.levels.contains_key(&0) {
            return Err(Error::Config("level 0 cannot carry effect parameters".into()));
        }
        for (&d, fam) in &self.levels {
            let ok = match fam {
                EffectFamily::Unbounded { w1, w2, w3 } => {
                    w1.len() == r && w2.len() == r && w3.len() == r
                }
                EffectFamily::Bounded { k, w } => {
                    *k >= 1 && w.len() == r && w.iter().all(|row| row.len() == *k)
                }
            };
            if !ok {
                return Err(Error::Shape(format!("level {d} parameters do not match r = {r}")));
            }
        }
        let mut flat = Vec::new();
        self.write_flat(&mut flat);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("effect parameters".into()));
        }
        Ok(())
    }

    pub fn family(&self, level: usize) -> Result<&EffectFamily> {
        self.levels.get(&level).ok_or(Error::UnknownLevel { level })
    }

    /// Multiplies `out` elementwise by `ψ(level, lag)`.
    #[inline]
    pub fn apply_factor(&self, level: usize, lag: usize, out: &mut [f64]) -> Result<()> {
        if level == 0 {
            return Ok(());
        }
        let fam = self.family(level)?;
        for (l, o) in out.iter_mut().enumerate() {
            *o *= fam.value(l, lag);
        }
        Ok(())
    }

    pub fn factor(&self, level: usize, lag: usize) -> Result<Vec<f64>> {
        let mut out = vec![1.0; self.r];
        self.apply_factor(level, lag, &mut out)?;
        Ok(out)
    }

    pub fn n_params(&self) -> usize {
        self.levels.values().map(EffectFamily::n_params).sum()
    }

    /// Flat layout: levels ascending; unbounded as `w1 ‖ w2 ‖ w3`, bounded as
    /// `w[l][τ]` row-major.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for fam in self.levels.values() {
            match fam {
                EffectFamily::Unbounded { w1, w2, w3 } => {
                    out.extend_from_slice(w1);
                    out.extend_from_slice(w2);
                    out.extend_from_slice(w3);
                }
                EffectFamily::Bounded { w, .. } => {
                    for row in w {
                        out.extend_from_slice(row);
                    }
                }
            }
        }
    }

    /// Inverse of [`write_flat`](Self::write_flat); returns values consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for fam in self.levels.values_mut() {
            match fam {
                EffectFamily::Unbounded { w1, w2, w3 } => {
                    take(w1);
                    take(w2);
                    take(w3);
                }
                EffectFamily::Bounded { w, .. } => {
                    for row in w.iter_mut() {
                        take(row);
                    }
                }
            }
        }
        pos
    }

    /// Offset of each level's block in the flat layout.
    pub fn offsets(&self) -> BTreeMap<usize, usize> {
        let mut off = 0;
        self.levels
            .iter()
            .map(|(&d, fam)| {
                let o = off;
                off += fam.n_params();
                (d, o)
            })
            .collect()
    }

    /// Adds `coeff_l · ∂ψ_l(level, lag)/∂θ` into `grad` (flat effect layout,
    /// level block starting at `offset`).
    pub(crate) fn accumulate_factor_grad(
        &self,
        level: usize,
        lag: usize,
        coeff: &[f64],
        offset: usize,
        grad: &mut [f64],
    ) -> Result<()> {
        let r = self.r;
        match self.family(level)? {
            EffectFamily::Unbounded { w1, w2, .. } => {
                for l in 0..r {
                    let s = sigmoid(w1[l]);
                    let sp = s.powi(lag as i32);
                    grad[offset + l] += coeff[l] * w2[l] * lag as f64 * sp * (1.0 - s);
                    grad[offset + r + l] += coeff[l] * sp;
                    grad[offset + 2 * r + l] += coeff[l];
                }
            }
            EffectFamily::Bounded { k, .. } => {
                let tau = lag.min(k - 1);
                for l in 0..r {
                    grad[offset + l * k + tau] += coeff[l];
                }
            }
        }
        Ok(())
    }
}

/// `ψ(d, t_apply, t_now)`.
pub fn psi_single(ep: &EffectParams, d: usize, t_apply: usize, t_now: usize) -> Result<Vec<f64>> {
    if t_now < t_apply {
        return Err(Error::FutureIntervention { t_apply, t_now });
    }
    ep.factor(d, t_now - t_apply)
}

/// `ψ^t = ∏_{t'=1..t} ψ(d^{t'}, t', t)`; `d_seq[i]` is the level at time `i+1`.
pub fn psi_aggregate(ep: &EffectParams, d_seq: &[usize], t_now: usize) -> Result<Vec<f64>> {
    if d_seq.len() < t_now {
        return Err(Error::Shape(format!(
            "action sequence has {} entries, need {t_now}",
            d_seq.len()
        )));
    }
    let mut out = vec![1.0; ep.r];
    for (i, &level) in d_seq[..t_now].iter().enumerate() {
        ep.apply_factor(level, t_now - (i + 1), &mut out)?;
    }
    Ok(out)
}

/// Latent trajectory `η^t = β ⊙ ψ^t` for `t = 1..=len(d_seq)`.
pub fn warp_trajectory(beta: &[f64], ep: &EffectParams, d_seq: &[usize]) -> Result<Vec<Vec<f64>>> {
    if beta.len() != ep.r {
        return Err(Error::Shape(format!("beta has {} entries, r = {}", beta.len(), ep.r)));
    }
    (1..=d_seq.len())
        .map(|t| {
            let mut eta = psi_aggregate(ep, d_seq, t)?;
            for (e, b) in eta.iter_mut().zip(beta) {
                *e *= b;
            }
            Ok(eta)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unb(w1: f64, w2: f64, w3: f64) -> EffectFamily {
        EffectFamily::Unbounded {
            w1: vec![w1],
            w2: vec![w2],
            w3: vec![w3],
        }
    }

    #[test]
    fn default_level_is_ones() {
        let ep = EffectParams::new(3);
        for lag in 0..5 {
            assert_eq!(psi_single(&ep, 0, 2, 2 + lag).unwrap(), vec![1.0; 3]);
        }
    }

    #[test]
    fn half_decay() {
        let ep = EffectParams::new(1).with_level(1, unb(0.0, 1.0, 0.0));
        assert_eq!(psi_single(&ep, 1, 3, 4).unwrap(), vec![0.5]);
        assert_eq!(psi_single(&ep, 1, 3, 5).unwrap(), vec![0.25]);
        // lag 0 carries the instantaneous effect w2 + w3
        assert_eq!(psi_single(&ep, 1, 3, 3).unwrap(), vec![1.0]);
    }

    #[test]
    fn sixty_percent_decay() {
        let ep = EffectParams::new(1).with_level(1, unb(0.405465, 2.0, 1.0));
        let expect = [2.2, 1.72, 1.432];
        for (lag, e) in (1..=3).zip(expect) {
            let v = psi_single(&ep, 1, 1, 1 + lag).unwrap()[0];
            // σ(0.405465) = 0.6 to ~1e-7
            assert!((v - e).abs() < 1e-6, "lag {lag}: {v} vs {e}");
        }
    }

    #[test]
    fn future_intervention_rejected() {
        let ep = EffectParams::new(1).with_level(1, unb(0.0, 1.0, 0.0));
        assert!(matches!(
            psi_single(&ep, 1, 5, 4),
            Err(Error::FutureIntervention { .. })
        ));
        assert!(matches!(psi_single(&ep, 2, 1, 4), Err(Error::UnknownLevel { level: 2 })));
    }

    #[test]
    fn bounded_clamps() {
        let fam = EffectFamily::Bounded {
            k: 3,
            w: vec![vec![2.0, 3.0, 4.0], vec![-1.0, -2.0, -3.0]],
        };
        let ep = EffectParams::new(2).with_level(1, fam);
        assert_eq!(psi_single(&ep, 1, 2, 2).unwrap(), vec![2.0, -1.0]);
        assert_eq!(psi_single(&ep, 1, 2, 4).unwrap(), vec![4.0, -3.0]);
        for lag in 2..10 {
            assert_eq!(psi_single(&ep, 1, 2, 2 + lag).unwrap(), vec![4.0, -3.0]);
        }
    }

    fn two_level() -> EffectParams {
        EffectParams::new(2)
            .with_level(
                1,
                EffectFamily::Unbounded {
                    w1: vec![0.3, -1.0],
                    w2: vec![1.5, -0.5],
                    w3: vec![2.0, 0.7],
                },
            )
            .with_level(
                2,
                EffectFamily::Bounded {
                    k: 2,
                    w: vec![vec![0.5, 0.9], vec![1.1, -2.0]],
                },
            )
    }

    #[test]
    fn aggregate_cases() {
        let ep = two_level();
        assert_eq!(psi_aggregate(&ep, &[0, 0, 0, 0], 4).unwrap(), vec![1.0, 1.0]);
        let seq = [0, 0, 1, 0, 0];
        assert_eq!(
            psi_aggregate(&ep, &seq, 5).unwrap(),
            psi_single(&ep, 1, 3, 5).unwrap()
        );
        let seq = [0, 1, 0, 2, 0];
        let a = psi_single(&ep, 1, 2, 5).unwrap();
        let b = psi_single(&ep, 2, 4, 5).unwrap();
        let agg = psi_aggregate(&ep, &seq, 5).unwrap();
        for l in 0..2 {
            assert_eq!(agg[l], a[l] * b[l]);
        }
        // t_now before the second action only sees the first
        assert_eq!(psi_aggregate(&ep, &seq, 3).unwrap(), psi_single(&ep, 1, 2, 3).unwrap());
    }

    #[test]
    fn warp_all_default_is_beta() {
        let ep = two_level();
        let beta = [0.3, -1.2];
        for eta in warp_trajectory(&beta, &ep, &[0; 6]).unwrap() {
            assert_eq!(eta, beta.to_vec());
        }
    }

    #[test]
    fn warp_single_action_at_one() {
        let ep = two_level();
        let traj = warp_trajectory(&[1.0, 1.0], &ep, &[1, 0, 0, 0]).unwrap();
        for (i, eta) in traj.iter().enumerate() {
            assert_eq!(*eta, psi_single(&ep, 1, 1, i + 1).unwrap());
        }
    }

    #[test]
    fn flat_roundtrip_and_offsets() {
        let ep = two_level();
        let mut flat = Vec::new();
        ep.write_flat(&mut flat);
        assert_eq!(flat.len(), ep.n_params());
        assert_eq!(ep.n_params(), 6 + 4);
        let mut back = ep.clone();
        for v in back.levels.values_mut() {
            if let EffectFamily::Unbounded { w1, .. } = v {
                w1[0] = 99.0;
            }
        }
        assert_eq!(back.read_flat(&flat), flat.len());
        assert_eq!(back, ep);
        let off = ep.offsets();
        assert_eq!(off[&1], 0);
        assert_eq!(off[&2], 6);
    }

    #[test]
    fn json_schema() {
        let ep = two_level();
        let s = serde_json::to_string(&ep).unwrap();
        assert!(s.starts_with("{\"r\":2,\"levels\":{\"1\":{\"family\":\"unbounded\",\"w1\""));
        assert!(s.contains("\"2\":{\"family\":\"bounded\",\"k\":2,\"w\":[[0.5,0.9],[1.1,-2.0]]}"));
        let back: EffectParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ep);
    }

    fn arb_level() -> impl Strategy<Value = (f64, f64, f64)> {
        (-3.0..3.0f64, -2.0..2.0f64, -2.0..2.0f64)
    }

    proptest! {
        #[test]
        fn unbounded_limit_is_w3((w1, w2, w3) in arb_level(), lag in 0usize..60) {
            let ep = EffectParams::new(1).with_level(1, unb(w1, w2, w3));
            let v = psi_single(&ep, 1, 1, 1 + lag).unwrap()[0];
            let bound = sigmoid(w1).powi(lag as i32) * w2.abs();
            prop_assert!((v - w3).abs() <= bound + 1e-12);
        }

        #[test]
        fn aggregate_matches_product_definition(
            seq in proptest::collection::vec(0usize..3, 1..12),
            t_frac in 0.0..1.0f64,
        ) {
            // keep levels unique per sequence
            let mut seen = [false; 3];
            let seq: Vec<usize> = seq.into_iter().map(|l| {
                if l != 0 && !seen[l] { seen[l] = true; l } else { 0 }
            }).collect();
            let ep = two_level();
            let t_now = 1 + ((seq.len() - 1) as f64 * t_frac) as usize;
            let agg = psi_aggregate(&ep, &seq, t_now).unwrap();
            let mut brute = vec![1.0; 2];
            for tp in 1..=t_now {
                let f = psi_single(&ep, seq[tp - 1], tp, t_now).unwrap();
                for l in 0..2 { brute[l] *= f[l]; }
            }
            prop_assert_eq!(agg, brute);
        }

        #[test]
        fn warp_is_beta_times_aggregate(
            b0 in -3.0..3.0f64, b1 in -3.0..3.0f64,
            p1 in 0usize..8, p2 in 0usize..8,
        ) {
            let mut seq = vec![0usize; 8];
            seq[p1] = 1;
            if p2 != p1 { seq[p2] = 2; }
            let ep = two_level();
            let traj = warp_trajectory(&[b0, b1], &ep, &seq).unwrap();
            for (i, eta) in traj.iter().enumerate() {
                let agg = psi_aggregate(&ep, &seq, i + 1).unwrap();
                prop_assert_eq!(eta[0], b0 * agg[0]);
                prop_assert_eq!(eta[1], b1 * agg[1]);
            }
        }
    }
}
