//! Adam with bias correction and linear learning-rate warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the rate ramps linearly from lr/warmup to lr.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 100,
        }
    }
}

/// Optimizer state: first/second moment buffers aligned with the model's
/// parameter list.
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Self {
        Adam {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            cfg,
        }
    }

    /// Learning rate at a zero-based step index, constant after warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 || step + 1 >= self.cfg.warmup_steps {
            self.cfg.lr
        } else {
            self.cfg.lr * (step + 1) as f64 / self.cfg.warmup_steps as f64
        }
    }

    /// One update over all parameter buffers. A `None` gradient is treated
    /// as zero (the parameter was unused this step, e.g. an expert that
    /// received no tokens) so every buffer advances deterministically.
    pub fn step(
        &mut self,
        params: &mut [Vec<f64>],
        grads: &[Option<Vec<f64>>],
        step: u64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} params / {} grads for {} state buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let lr = self.lr_at(step);
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g_zero;
            let g: &[f64] = match &grads[i] {
                Some(g) => {
                    if g.len() != p.len() {
                        return Err(Error::contract(format!(
                            "adam: grad {} has {} elems for {} params",
                            i,
                            g.len(),
                            p.len()
                        )));
                    }
                    g
                }
                None => {
                    g_zero = vec![0.0; p.len()];
                    &g_zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let adam = Adam::new(AdamConfig::default(), &[]);
        assert!((adam.lr_at(0) - 1e-5).abs() < 1e-15);
        assert!((adam.lr_at(49) - 5e-4).abs() < 1e-12);
        assert_eq!(adam.lr_at(99), 1e-3);
        assert_eq!(adam.lr_at(5000), 1e-3);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &[2]);
        let mut params = vec![vec![3.0, -2.0]];
        for step in 0..400 {
            let g: Vec<f64> = params[0].iter().map(|&x| 2.0 * x).collect();
            adam.step(&mut params, &[Some(g)], step).unwrap();
        }
        assert!(params[0].iter().all(|&x| x.abs() < 1e-3));
    }
}
