use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::param::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub m: Array2<f32>,
    pub v: Array2<f32>,
}

/// Adaptive moment estimation with bias correction.
///
/// A parameter whose gradient has always been exactly zero is left exactly
/// unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, MomentState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter and clears its gradient.
    pub fn step(&mut self, params: Vec<(String, &mut Param)>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params {
            let st = self.moments.entry(name).or_insert_with(|| MomentState {
                m: Array2::zeros(p.value.raw_dim()),
                v: Array2::zeros(p.value.raw_dim()),
            });
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(&mut st.m)
                .and(&mut st.v)
                .for_each(|w, g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * *g;
                    *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                    *g = 0.0;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new(array![[1.0f32, -1.0, 0.5]]);
        p.grad = array![[2.0, -3.0, 0.0]];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(vec![("p".into(), &mut p)]);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] + 0.9).abs() < 1e-6);
        assert_eq!(p.value[[0, 2]], 0.5);
        assert!(p.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new(array![[3.0f32]]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            p.grad = p.value.mapv(|w| 2.0 * (w - 1.0));
            adam.step(vec![("p".into(), &mut p)]);
        }
        assert!((p.value[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
