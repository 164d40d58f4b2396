//! Basis map `φ^t = head(GRU(x^{0..t−1}, z))`.
//!
//! Step `s` of the recurrence consumes `[x^s · input_scale, z]`, so `φ^t` only
//! ever sees the history strictly before `t`. With `bounded` set the head output
//! is squashed by `y ↦ 2σ(y) − 1` into `(−1, 1)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{GruCell, GruStep};
use crate::linalg::{sigmoid, Mat};
use crate::rng;

/// Half-width of the uniform initialization range.
pub const INIT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisParams {
    pub z_dim: usize,
    pub hidden: usize,
    pub r: usize,
    pub bounded: bool,
    /// Multiplies `x` before it enters the recurrence. Not trained.
    #[serde(default = "one")]
    pub input_scale: f64,
    pub cell: GruCell,
    /// `hidden × r`
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

/// Cached forward pass for [`basis_backward`].
#[derive(Debug, Clone)]
pub struct BasisTape {
    steps: Vec<GruStep>,
    outputs: Vec<Vec<f64>>,
}

impl BasisTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl BasisParams {
    pub fn zeros(z_dim: usize, hidden: usize, r: usize, bounded: bool) -> Self {
        BasisParams {
            z_dim,
            hidden,
            r,
            bounded,
            input_scale: 1.0,
            cell: GruCell::zeros(1 + z_dim, hidden),
            head_w: Mat::zeros(hidden, r),
            head_b: vec![0.0; r],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.z_dim, self.hidden, self.r, self.bounded);
        z.input_scale = self.input_scale;
        z
    }

    pub fn n_params(&self) -> usize {
        self.cell.n_params() + self.hidden * self.r + self.r
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.cell.write_flat(out);
        out.extend_from_slice(&self.head_w.data);
        out.extend_from_slice(&self.head_b);
    }

    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut pos = self.cell.read_flat(src);
        let n = self.head_w.data.len();
        self.head_w.data.copy_from_slice(&src[pos..pos + n]);
        pos += n;
        self.head_b.copy_from_slice(&src[pos..pos + self.r]);
        pos + self.r
    }

    pub fn is_finite(&self) -> bool {
        self.cell.is_finite() && self.head_w.is_finite() && self.head_b.iter().all(|v| v.is_finite())
    }

    fn input(&self, x: f64, z: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.push(x * self.input_scale);
        buf.extend_from_slice(z);
    }

    fn head(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.head_b.clone();
        self.head_w.tr_mul_vec_acc(h, &mut out);
        if self.bounded {
            out.iter_mut().for_each(|v| *v = 2.0 * sigmoid(*v) - 1.0);
        }
        out
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.z_dim {
            return Err(Error::Shape(format!(
                "covariates have {} entries, basis expects {}",
                z.len(),
                self.z_dim
            )));
        }
        Ok(())
    }

    /// Streaming evaluator for rollouts: feed `x^s` one at a time.
    pub fn runner<'a>(&'a self, z: &'a [f64]) -> Result<BasisRunner<'a>> {
        self.check_z(z)?;
        Ok(BasisRunner {
            bp: self,
            z,
            h: vec![0.0; self.hidden],
            buf: Vec::with_capacity(1 + self.z_dim),
        })
    }
}

/// Recurrent state of the basis over a growing history.
#[derive(Debug, Clone)]
pub struct BasisRunner<'a> {
    bp: &'a BasisParams,
    z: &'a [f64],
    h: Vec<f64>,
    buf: Vec<f64>,
}

impl BasisRunner<'_> {
    /// Consumes the next history value and returns the basis for the step after it.
    pub fn advance(&mut self, x: f64) -> Vec<f64> {
        self.bp.input(x, self.z, &mut self.buf);
        self.h = self.bp.cell.step(&self.buf, &self.h);
        self.bp.head(&self.h)
    }
}

pub fn basis_init_random(seed: u64, z_dim: usize, hidden: usize, r: usize, bounded: bool) -> BasisParams {
    let mut rng = rng::substream(seed, "basis");
    let mut bp = BasisParams::zeros(z_dim, hidden, r, bounded);
    bp.cell = GruCell::random(1 + z_dim, hidden, INIT_SCALE, &mut rng);
    bp.head_w
        .data
        .iter_mut()
        .chain(bp.head_b.iter_mut())
        .for_each(|v| *v = rng.random_range(-INIT_SCALE..INIT_SCALE));
    bp
}

/// `φ^t` from `x_hist = x^{0..t−1}`.
pub fn basis_eval(bp: &BasisParams, x_hist: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if x_hist.is_empty() {
        return Err(Error::Shape("basis needs at least the initial state x^0".into()));
    }
    let mut run = bp.runner(z)?;
    let mut out = Vec::new();
    for &x in x_hist {
        out = run.advance(x);
    }
    Ok(out)
}

/// Rows `φ^1..φ^T` for a series `x^{0..T}`.
pub fn basis_eval_series(bp: &BasisParams, x: &[f64], z: &[f64]) -> Result<Vec<Vec<f64>>> {
    let t = x.len().saturating_sub(1);
    let mut run = bp.runner(z)?;
    Ok(x[..t].iter().map(|&v| run.advance(v)).collect())
}

/// Rows `φ^1..φ^rows` with a tape for [`basis_backward`].
pub fn basis_forward_taped(
    bp: &BasisParams,
    x: &[f64],
    z: &[f64],
    rows: usize,
) -> Result<(Vec<Vec<f64>>, BasisTape)> {
    bp.check_z(z)?;
    if rows > x.len() {
        return Err(Error::Shape(format!("{rows} basis rows need {rows} history values")));
    }
    let mut h = vec![0.0; bp.hidden];
    let mut buf = Vec::with_capacity(1 + bp.z_dim);
    let mut steps = Vec::with_capacity(rows);
    let mut outputs = Vec::with_capacity(rows);
    for &xv in &x[..rows] {
        bp.input(xv, z, &mut buf);
        let step = bp.cell.step_cached(&buf, &h);
        h.clone_from(&step.h);
        outputs.push(bp.head(&h));
        steps.push(step);
    }
    let tape = BasisTape {
        steps,
        outputs: outputs.clone(),
    };
    Ok((outputs, tape))
}

/// Gradient of a scalar loss w.r.t. all basis parameters, given
/// `upstream[t] = ∂loss/∂φ^{t+1}`.
pub fn basis_backward(bp: &BasisParams, tape: &BasisTape, upstream: &[Vec<f64>]) -> Result<BasisParams> {
    if upstream.len() != tape.len() {
        return Err(Error::Shape(format!(
            "tape has {} steps, upstream has {}",
            tape.len(),
            upstream.len()
        )));
    }
    let mut grad = bp.zeros_like();
    let mut carry = vec![0.0; bp.hidden];
    for t in (0..tape.len()).rev() {
        let up = &upstream[t];
        if up.len() != bp.r {
            return Err(Error::Shape(format!("upstream row {t} has {} entries", up.len())));
        }
        let da: Vec<f64> = if bp.bounded {
            up.iter()
                .zip(&tape.outputs[t])
                .map(|(g, phi)| g * 0.5 * (1.0 - phi * phi))
                .collect()
        } else {
            up.clone()
        };
        let step = &tape.steps[t];
        grad.head_w.add_outer(&step.h, &da);
        for (b, d) in grad.head_b.iter_mut().zip(&da) {
            *b += d;
        }
        let mut dh = carry;
        bp.head_w.mul_vec_acc(&da, &mut dh);
        carry = bp.cell.backward_step(step, &dh, &mut grad.cell, None);
    }
    Ok(grad)
}
