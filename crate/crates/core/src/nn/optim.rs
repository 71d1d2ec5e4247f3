use serde::{Deserialize, Serialize};

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            step: 0,
            first: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            second: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

impl AdamW {
    /// Applies one update to every parameter tensor in place.
    pub fn step(&self, state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.first.len());
        state.step += 1;
        let bc1 = 1.0 - self.beta1.powf(state.step as f64);
        let bc2 = 1.0 - self.beta2.powf(state.step as f64);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut state.first[i];
            let v = &mut state.second[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] = p[j] * decay - lr * update;
            }
        }
    }
}

/// Cosine annealing from `base` at step 0 to `floor` at `total_steps - 1`.
pub fn cosine_lr(base: f64, floor: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let progress = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let opt = AdamW::default();
        let mut state = AdamState::new([3]);
        let mut p = vec![0.3, -1.2, 7.0];
        let before = p.clone();
        opt.step(&mut state, &mut [&mut p], &[&[1.0, -2.0, 0.5]], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut state = AdamState::new([2]);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut state, &mut [&mut p], &[&[2.0, -0.5]], 1e-3);
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 1e-6, 0, 100), 1e-4);
        assert!((cosine_lr(1e-4, 1e-6, 99, 100) - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(1e-4, 0.0, 50, 101);
        assert!((mid - 5e-5).abs() < 1e-15);
    }
}
