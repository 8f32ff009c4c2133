//! Adam with bias correction over f32-stored grid parameters; moments and
//! update arithmetic are f64.

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One update. Batches with non-finite gradients are rejected (moments
    /// and parameters untouched) and `false` is returned.
    pub fn step(&mut self, params: &mut [f32], grads: &[f64], lr: f64) -> bool {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("rejecting optimizer step: non-finite gradients");
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let next = params[i] as f64 - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            debug_assert!(next.is_finite());
            params[i] = next as f32;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut adam = AdamState::new(3);
        let mut params = vec![1.0f32, -2.0, 0.5];
        let before = params.clone();
        adam.step(&mut params, &[0.0, 0.0, 0.0], 1e-2);
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let mut adam = AdamState::new(1);
        let mut params = vec![0.0f32];
        let lr = 1e-2;
        let mut prev = params[0] as f64;
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam.step(&mut params, &[3.7], lr);
            last_step = (params[0] as f64 - prev).abs();
            prev = params[0] as f64;
        }
        assert!(
            (last_step - lr).abs() < 0.05 * lr,
            "step {last_step} vs lr {lr}"
        );
    }

    #[test]
    fn nan_gradients_reject_batch() {
        let mut adam = AdamState::new(2);
        let mut params = vec![1.0f32, 2.0];
        let before = params.clone();
        let ok = adam.step(&mut params, &[1.0, f64::NAN], 1e-2);
        assert!(!ok);
        assert_eq!(params, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut adam = AdamState::new(2);
            let mut params = vec![0.3f32, -0.7];
            for k in 0..50 {
                let g = [(k as f64 * 0.1).sin(), (k as f64 * 0.07).cos()];
                adam.step(&mut params, &g, 5e-4);
            }
            params
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
