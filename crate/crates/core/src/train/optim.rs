use super::config::OptimizerConfig;
use crate::model::ParamSet;

/// Adam with linear learning-rate warmup.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate used for update number `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.cfg.warmup == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (t as f64 / self.cfg.warmup as f64).min(1.0)
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> f64 {
        self.t += 1;
        let lr = self.lr_at(self.t);
        let OptimizerConfig { beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in params.values_mut(i).iter_mut().zip(g).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        lr
    }
}

/// Global L2 norm of all gradient arrays.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm` (0 = no-op).
/// Returns the norm before clipping.
pub fn clip_grads(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
