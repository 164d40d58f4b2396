//! Adaptive-moment optimizer over flat parameter vectors, and a central
//! finite-difference gradient checker.

/// Bias-corrected first/second moment update (minimization).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Max over coordinates of `|analytic − fd| / max(|fd|, 1e-8)` with central
/// differences of width `step`.
pub fn max_relative_error(f: impl Fn(&[f64]) -> f64, analytic: &[f64], at: &[f64], step: f64) -> f64 {
    let mut x = at.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let dn = f(&x);
        x[i] = orig;
        let fd = (up - dn) / (2.0 * step);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1e-8));
    }
    worst
}
