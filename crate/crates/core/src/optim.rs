//! Dense-parameter optimizer and learning-rate schedule for the
//! desk-scale trainable models.

/// Adaptive-moment optimizer with decoupled weight decay over a flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self::with_weight_decay(num_params, 0.0)
    }

    pub fn with_weight_decay(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One update step: `params -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * params)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Linear learning-rate decay: `base * (1 - step / total_steps)` for the
/// 0-based `step`. The first step runs at the full base rate and the final
/// step at `base / total_steps`.
pub fn linear_decay_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_descends_a_quadratic() {
        // f(x) = (x - 3)^2, grad = 2(x - 3)
        let mut params = vec![0.0];
        let mut opt = AdamW::new(1);
        for _ in 0..500 {
            let grads = vec![2.0 * (params[0] - 3.0)];
            opt.step(&mut params, &grads, 0.05);
        }
        assert!((params[0] - 3.0).abs() < 1e-2, "got {}", params[0]);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut params = vec![1.0];
        let mut opt = AdamW::with_weight_decay(1, 0.1);
        opt.step(&mut params, &[0.0], 0.01);
        assert!(params[0] < 1.0);
    }

    #[test]
    fn linear_decay_formula() {
        let base = 1e-5;
        let total = 20;
        for s in 0..total {
            let want = base * (1.0 - s as f64 / total as f64);
            assert!((linear_decay_lr(base, s, total) - want).abs() < 1e-18);
        }
        assert_eq!(linear_decay_lr(base, 0, total), base);
        // Final step is base/total, approximately zero relative to base.
        assert!((linear_decay_lr(base, total - 1, total) - base / total as f64).abs() < 1e-18);
    }
}
