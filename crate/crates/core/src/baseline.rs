//! Black-box recurrent regressor: a gated recurrent cell over
//! `[x^{t−1}, onehot(d^t), z]` with a linear head predicting `x^t`, trained on
//! one-step squared error and rolled out autoregressively.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UnitRecord};
use crate::error::{Error, Result};
use crate::gru::{GruCell, GruStep};
use crate::optim::Adam;
use crate::rng;

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden: 32,
            lr: 0.005,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            init_scale: 0.2,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden, epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        Ok(())
    }
}

/// Affine standardization fitted on the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    fn fit(v: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = v.collect();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        Scaler { mean, std }
    }

    fn fwd(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    fn inv(&self, y: f64) -> f64 {
        self.mean + self.std * y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Number of levels including the default.
    pub k: usize,
    pub z_dim: usize,
    pub cell: GruCell,
    pub w_out: Vec<f64>,
    pub b_out: f64,
    pub x_scale: Scaler,
    pub z_scale: Vec<Scaler>,
    pub config: BaselineConfig,
}

impl BaselineParams {
    pub fn input_dim(&self) -> usize {
        1 + self.k + self.z_dim
    }

    pub fn n_params(&self) -> usize {
        self.cell.n_params() + self.w_out.len() + 1
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.cell.write_flat(out);
        out.extend_from_slice(&self.w_out);
        out.push(self.b_out);
    }

    pub fn read_flat(&mut self, src: &[f64]) {
        let n = self.cell.read_flat(src);
        let h = self.w_out.len();
        self.w_out.copy_from_slice(&src[n..n + h]);
        self.b_out = src[n + h];
    }

    fn input(&self, x_prev: f64, level: usize, z: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.push(self.x_scale.fwd(x_prev));
        buf.extend((0..self.k).map(|j| if j == level { 1.0 } else { 0.0 }));
        buf.extend(z.iter().zip(&self.z_scale).map(|(v, s)| s.fwd(*v)));
    }

    fn head(&self, h: &[f64]) -> f64 {
        self.b_out + h.iter().zip(&self.w_out).map(|(a, b)| a * b).sum::<f64>()
    }

    fn check_unit(&self, unit: &UnitRecord) -> Result<()> {
        if unit.z.len() != self.z_dim {
            return Err(Error::Shape(format!(
                "unit {} has z of length {}, expected {}",
                unit.unit_id,
                unit.z.len(),
                self.z_dim
            )));
        }
        self.check_levels(&unit.d)
    }

    fn check_levels(&self, d: &[usize]) -> Result<()> {
        match d.iter().find(|&&l| l >= self.k) {
            Some(&level) => Err(Error::UnknownLevel { level }),
            None => Ok(()),
        }
    }
}

pub fn baseline_init(ds: &Dataset, cfg: &BaselineConfig) -> BaselineParams {
    let k = ds.meta.k;
    let z_dim = ds.meta.z_dim;
    let mut g = rng::substream(cfg.seed, "baseline-init");
    let cell = GruCell::random(1 + k + z_dim, cfg.hidden, cfg.init_scale, &mut g);
    let w_out = (0..cfg.hidden)
        .map(|_| g.random_range(-cfg.init_scale..=cfg.init_scale))
        .collect();
    BaselineParams {
        k,
        z_dim,
        cell,
        w_out,
        b_out: 0.0,
        x_scale: Scaler::fit(ds.units.iter().flat_map(|u| u.x.iter().copied())),
        z_scale: (0..z_dim)
            .map(|j| Scaler::fit(ds.units.iter().map(|u| u.z[j])))
            .collect(),
        config: cfg.clone(),
    }
}

/// Sum of squared standardized one-step errors of one unit and its gradient.
fn unit_loss_grad(bp: &BaselineParams, unit: &UnitRecord, want_grad: bool) -> (f64, Vec<f64>) {
    let t_len = unit.horizon();
    let hdim = bp.cell.hidden_dim;
    let mut h = vec![0.0; hdim];
    let mut buf = Vec::with_capacity(bp.input_dim());
    let mut tape: Vec<GruStep> = Vec::with_capacity(if want_grad { t_len } else { 0 });
    let mut resid = Vec::with_capacity(t_len);
    let mut loss = 0.0;
    for t in 1..=t_len {
        bp.input(unit.x[t - 1], unit.level_at(t), &unit.z, &mut buf);
        let step = bp.cell.step_cached(&buf, &h);
        let e = bp.head(&step.h) - bp.x_scale.fwd(unit.x[t]);
        loss += e * e;
        resid.push(e);
        h.clone_from(&step.h);
        if want_grad {
            tape.push(step);
        }
    }
    if !want_grad {
        return (loss, Vec::new());
    }
    let mut gcell = bp.cell.zeros_like();
    let mut gw = vec![0.0; hdim];
    let mut gb = 0.0;
    let mut dh = vec![0.0; hdim];
    for (step, &e) in tape.iter().zip(&resid).rev() {
        let de = 2.0 * e;
        gb += de;
        for i in 0..hdim {
            gw[i] += de * step.h[i];
            dh[i] += de * bp.w_out[i];
        }
        dh = bp.cell.backward_step(step, &dh, &mut gcell, None);
    }
    let mut flat = Vec::with_capacity(bp.n_params());
    gcell.write_flat(&mut flat);
    flat.extend_from_slice(&gw);
    flat.push(gb);
    (loss, flat)
}

/// Squared-error loss over `idx` and its gradient, reduced in a fixed order.
pub fn baseline_loss_grad(bp: &BaselineParams, ds: &Dataset, idx: &[usize]) -> (f64, Vec<f64>) {
    let n = bp.n_params();
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut f = 0.0;
            let mut g = vec![0.0; n];
            for &i in chunk {
                let (fi, gi) = unit_loss_grad(bp, &ds.units[i], true);
                f += fi;
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
            }
            (f, g)
        })
        .collect();
    let mut f = 0.0;
    let mut g = vec![0.0; n];
    for (pf, pg) in parts {
        f += pf;
        g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
    }
    (f, g)
}

pub fn baseline_loss(bp: &BaselineParams, ds: &Dataset, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| unit_loss_grad(bp, &ds.units[i], false).0).sum()
}

/// Minibatch Adam on standardized one-step squared error.
pub fn baseline_fit(ds: &Dataset, cfg: &BaselineConfig) -> Result<BaselineParams> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidDataset("cannot fit an empty dataset".into()));
    }
    let mut bp = baseline_init(ds, cfg);
    for u in &ds.units {
        bp.check_unit(u)?;
    }
    let mut theta = Vec::with_capacity(bp.n_params());
    bp.write_flat(&mut theta);
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut shuffle = rng::substream(cfg.seed, "baseline-batches");
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let rows: usize = batch.iter().map(|&i| ds.units[i].horizon()).sum::<usize>().max(1);
            let (f, g) = baseline_loss_grad(&bp, ds, batch);
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("baseline loss {f}"),
                });
            }
            let g: Vec<f64> = g.iter().map(|v| v / rows as f64).collect();
            adam.step(&mut theta, &g);
            bp.read_flat(&theta);
        }
    }
    Ok(bp)
}

/// Autoregressive forecast of `x^{T+1..T+Δ}` after the history `x[0..=T]`,
/// `d[0..T]`, using `future_d` as the next `Δ` actions.
pub fn baseline_predict(
    bp: &BaselineParams,
    x_hist: &[f64],
    d_hist: &[usize],
    z: &[f64],
    future_d: &[usize],
) -> Result<Vec<f64>> {
    if future_d.is_empty() {
        return Err(Error::Config("prediction needs Δ ≥ 1".into()));
    }
    if x_hist.len() != d_hist.len() + 1 {
        return Err(Error::Shape(format!(
            "history has {} states for {} actions",
            x_hist.len(),
            d_hist.len()
        )));
    }
    if z.len() != bp.z_dim {
        return Err(Error::Shape(format!("z of length {}, expected {}", z.len(), bp.z_dim)));
    }
    bp.check_levels(d_hist)?;
    bp.check_levels(future_d)?;
    let mut h = vec![0.0; bp.cell.hidden_dim];
    let mut buf = Vec::with_capacity(bp.input_dim());
    for (t, &level) in d_hist.iter().enumerate() {
        bp.input(x_hist[t], level, z, &mut buf);
        h = bp.cell.step(&buf, &h);
    }
    let mut prev = x_hist[d_hist.len()];
    let mut out = Vec::with_capacity(future_d.len());
    for &level in future_d {
        bp.input(prev, level, z, &mut buf);
        h = bp.cell.step(&buf, &h);
        prev = bp.x_scale.inv(bp.head(&h));
        out.push(prev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::optim::max_relative_error;
    use crate::sim::{generate_dataset, SimConfig};

    fn small(n: usize) -> Dataset {
        generate_dataset(&SimConfig {
            r: 2,
            t: 8,
            t0: 3,
            k: 3,
            levels_per_unit: 1,
            n,
            z_dim: 2,
            hidden: 4,
            ..SimConfig::default()
        })
        .unwrap()
        .0
    }

    fn cfg(hidden: usize) -> BaselineConfig {
        BaselineConfig {
            hidden,
            epochs: 3,
            batch_size: 4,
            seed: 2,
            ..BaselineConfig::default()
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = small(3);
        let bp = baseline_init(&ds, &BaselineConfig { init_scale: 0.6, ..cfg(5) });
        let idx = [0, 1, 2];
        let (_, g) = baseline_loss_grad(&bp, &ds, &idx);
        let mut theta = Vec::new();
        bp.write_flat(&mut theta);
        let f = |th: &[f64]| {
            let mut b = bp.clone();
            b.read_flat(th);
            baseline_loss(&b, &ds, &idx)
        };
        let err = max_relative_error(f, &g, &theta, 1e-5);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn input_width() {
        let ds = small(2);
        let bp = baseline_init(&ds, &cfg(3));
        assert_eq!(bp.input_dim(), 1 + 3 + 2);
        assert_eq!(bp.cell.input_dim, bp.input_dim());
    }

    #[test]
    fn zero_lr_and_reproducible() {
        let ds = small(10);
        let frozen = baseline_fit(&ds, &BaselineConfig { lr: 0.0, ..cfg(4) }).unwrap();
        assert_eq!(frozen, baseline_init(&ds, &BaselineConfig { lr: 0.0, ..cfg(4) }));
        assert_eq!(baseline_fit(&ds, &cfg(4)).unwrap(), baseline_fit(&ds, &cfg(4)).unwrap());
    }

    #[test]
    fn memorizes_constant_series() {
        let unit = UnitRecord {
            unit_id: "c".into(),
            z: vec![0.5],
            x: vec![3.0; 11],
            d: vec![0; 10],
        };
        let meta = DatasetMeta {
            k: 2,
            t: 10,
            t0: 10,
            z_dim: 1,
            r_hint: None,
        };
        let ds = Dataset::new(meta, vec![unit.clone()]).unwrap();
        let bp = baseline_fit(
            &ds,
            &BaselineConfig {
                hidden: 4,
                epochs: 1500,
                lr: 0.01,
                ..BaselineConfig::default()
            },
        )
        .unwrap();
        let mse = baseline_loss(&bp, &ds, &[0]) * bp.x_scale.std.powi(2) / 10.0;
        assert!(mse <= 1e-4, "{mse}");
    }

    #[test]
    fn rollout_matches_hand_unroll() {
        let ds = small(2);
        let bp = baseline_init(&ds, &BaselineConfig { init_scale: 0.5, ..cfg(4) });
        let u = &ds.units[0];
        let (x, d) = (&u.x[..=4], &u.d[..4]);
        let out = baseline_predict(&bp, x, d, &u.z, &[1, 0]).unwrap();

        let mut h = vec![0.0; 4];
        let mut buf = Vec::new();
        for t in 0..4 {
            bp.input(x[t], d[t], &u.z, &mut buf);
            h = bp.cell.step(&buf, &h);
        }
        bp.input(x[4], 1, &u.z, &mut buf);
        h = bp.cell.step(&buf, &h);
        let y1 = bp.x_scale.inv(bp.head(&h));
        bp.input(y1, 0, &u.z, &mut buf);
        h = bp.cell.step(&buf, &h);
        let y2 = bp.x_scale.inv(bp.head(&h));
        assert_eq!(out, vec![y1, y2]);

        let one = baseline_predict(&bp, x, d, &u.z, &[1]).unwrap();
        assert_eq!(one, vec![y1]);
        assert_eq!(out, baseline_predict(&bp, x, d, &u.z, &[1, 0]).unwrap());
    }

    #[test]
    fn invalid_inputs() {
        let ds = small(2);
        let bp = baseline_init(&ds, &cfg(3));
        let u = &ds.units[0];
        assert!(matches!(
            baseline_predict(&bp, &u.x[..=2], &u.d[..2], &u.z, &[3]),
            Err(Error::UnknownLevel { level: 3 })
        ));
        assert!(baseline_predict(&bp, &u.x[..=2], &u.d[..2], &u.z, &[]).is_err());
        assert!(baseline_predict(&bp, &u.x[..2], &u.d[..2], &u.z, &[0]).is_err());
    }
}
