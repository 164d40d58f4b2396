//! Gated recurrent cell with hand-written reverse mode, shared by the basis map
//! and the black-box baseline.
//!
//! ```text
//! u  = σ(W_u x + U_u h + b_u)
//! g  = σ(W_g x + U_g h + b_g)
//! c  = tanh(W_c x + U_c (g ⊙ h) + b_c)
//! h' = (1 − u) ⊙ h + u ⊙ c
//! ```

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::linalg::{sigmoid, Mat};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: Mat,
    pub w_reset: Mat,
    pub w_cand: Mat,
    pub u_update: Mat,
    pub u_reset: Mat,
    pub u_cand: Mat,
    pub b_update: Vec<f64>,
    pub b_reset: Vec<f64>,
    pub b_cand: Vec<f64>,
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub input: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    pub cand: Vec<f64>,
    pub h: Vec<f64>,
}

impl GruCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let wi = || Mat::zeros(hidden_dim, input_dim);
        let wh = || Mat::zeros(hidden_dim, hidden_dim);
        GruCell {
            input_dim,
            hidden_dim,
            w_update: wi(),
            w_reset: wi(),
            w_cand: wi(),
            u_update: wh(),
            u_reset: wh(),
            u_cand: wh(),
            b_update: vec![0.0; hidden_dim],
            b_reset: vec![0.0; hidden_dim],
            b_cand: vec![0.0; hidden_dim],
        }
    }

    /// Every weight drawn iid from `U(−scale, scale)`.
    pub fn random(input_dim: usize, hidden_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut cell = Self::zeros(input_dim, hidden_dim);
        cell.for_each_mut(|v| *v = rng.random_range(-scale..scale));
        cell
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim)
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for m in [
            &mut self.w_update,
            &mut self.w_reset,
            &mut self.w_cand,
            &mut self.u_update,
            &mut self.u_reset,
            &mut self.u_cand,
        ] {
            m.data.iter_mut().for_each(&mut f);
        }
        for b in [&mut self.b_update, &mut self.b_reset, &mut self.b_cand] {
            b.iter_mut().for_each(&mut f);
        }
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden_dim;
        3 * h * self.input_dim + 3 * h * h + 3 * h
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for m in [
            &self.w_update,
            &self.w_reset,
            &self.w_cand,
            &self.u_update,
            &self.u_reset,
            &self.u_cand,
        ] {
            out.extend_from_slice(&m.data);
        }
        for b in [&self.b_update, &self.b_reset, &self.b_cand] {
            out.extend_from_slice(b);
        }
    }

    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        self.for_each_mut(|v| {
            *v = src[pos];
            pos += 1;
        });
        pos
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        let mut probe = self.clone();
        probe.for_each_mut(|v| ok &= v.is_finite());
        ok
    }

    /// Advances one step; returns the new hidden state.
    pub fn step(&self, input: &[f64], h: &[f64]) -> Vec<f64> {
        self.step_cached(input, h).h
    }

    pub fn step_cached(&self, input: &[f64], h_prev: &[f64]) -> GruStep {
        let n = self.hidden_dim;
        let mut update = self.b_update.clone();
        self.w_update.mul_vec_acc(input, &mut update);
        self.u_update.mul_vec_acc(h_prev, &mut update);
        update.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut reset = self.b_reset.clone();
        self.w_reset.mul_vec_acc(input, &mut reset);
        self.u_reset.mul_vec_acc(h_prev, &mut reset);
        reset.iter_mut().for_each(|v| *v = sigmoid(*v));

        let gated: Vec<f64> = reset.iter().zip(h_prev).map(|(g, h)| g * h).collect();
        let mut cand = self.b_cand.clone();
        self.w_cand.mul_vec_acc(input, &mut cand);
        self.u_cand.mul_vec_acc(&gated, &mut cand);
        cand.iter_mut().for_each(|v| *v = v.tanh());

        let h = (0..n)
            .map(|i| (1.0 - update[i]) * h_prev[i] + update[i] * cand[i])
            .collect();
        GruStep {
            input: input.to_vec(),
            h_prev: h_prev.to_vec(),
            update,
            reset,
            cand,
            h,
        }
    }

    /// Backpropagates `dh` (gradient w.r.t. `step.h`) through one step,
    /// accumulating parameter gradients into `grad`. Returns the gradient
    /// w.r.t. `h_prev`; the input gradient is added to `d_input` when given.
    pub fn backward_step(
        &self,
        step: &GruStep,
        dh: &[f64],
        grad: &mut GruCell,
        d_input: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let n = self.hidden_dim;
        let mut dh_prev = vec![0.0; n];
        let mut da_u = vec![0.0; n];
        let mut da_c = vec![0.0; n];
        for i in 0..n {
            let u = step.update[i];
            let c = step.cand[i];
            dh_prev[i] = dh[i] * (1.0 - u);
            da_u[i] = dh[i] * (c - step.h_prev[i]) * u * (1.0 - u);
            da_c[i] = dh[i] * u * (1.0 - c * c);
        }

        let gated: Vec<f64> = step.reset.iter().zip(&step.h_prev).map(|(g, h)| g * h).collect();
        grad.w_cand.add_outer(&da_c, &step.input);
        grad.u_cand.add_outer(&da_c, &gated);
        add_assign(&mut grad.b_cand, &da_c);
        let mut d_gated = vec![0.0; n];
        self.u_cand.tr_mul_vec_acc(&da_c, &mut d_gated);

        let mut da_g = vec![0.0; n];
        for i in 0..n {
            let g = step.reset[i];
            dh_prev[i] += d_gated[i] * g;
            da_g[i] = d_gated[i] * step.h_prev[i] * g * (1.0 - g);
        }
        grad.w_reset.add_outer(&da_g, &step.input);
        grad.u_reset.add_outer(&da_g, &step.h_prev);
        add_assign(&mut grad.b_reset, &da_g);
        self.u_reset.tr_mul_vec_acc(&da_g, &mut dh_prev);

        grad.w_update.add_outer(&da_u, &step.input);
        grad.u_update.add_outer(&da_u, &step.h_prev);
        add_assign(&mut grad.b_update, &da_u);
        self.u_update.tr_mul_vec_acc(&da_u, &mut dh_prev);

        if let Some(dx) = d_input {
            self.w_update.tr_mul_vec_acc(&da_u, dx);
            self.w_reset.tr_mul_vec_acc(&da_g, dx);
            self.w_cand.tr_mul_vec_acc(&da_c, dx);
        }
        dh_prev
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
