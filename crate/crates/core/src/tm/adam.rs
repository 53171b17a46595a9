use std::f64::consts::PI;

/// Adam with bias correction. Moment buffers are kept per parameter slot
/// so one optimizer can drive tensors of different sizes.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Registers a parameter slot of `len` entries and returns its id.
    pub fn add_slot(&mut self, len: usize) -> usize {
        self.m.push(vec![0.0; len]);
        self.v.push(vec![0.0; len]);
        self.m.len() - 1
    }

    /// Starts a new optimizer step; all `update` calls until the next
    /// `begin_step` share its bias correction.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        assert!(self.t > 0, "begin_step before update");
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(m.len(), params.len());
        assert_eq!(grads.len(), params.len());
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Cosine annealing from `lr` at step 0 to `eta_min` at `total` steps.
pub fn cosine_lr(lr: f64, eta_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = step.min(total) as f64 / total as f64;
    eta_min + 0.5 * (lr - eta_min) * (1.0 + (PI * frac).cos())
}
