//! Expert-wise bias state for loss-free balancing and the auxiliary
//! balance loss. The bias is mutated only at batch boundaries from the
//! load observed on the batch just trained, so routing inside a step never
//! sees load information from that same step.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::routing::{BiasForm, RoutingAssignment};

/// Bias correction rule applied per expert at each batch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// b += u * sign(mean_load - load), with sign(0) = 0.
    Sign,
    /// b += u * (mean_load - load).
    Proportional,
}

/// Per-expert bias vector plus its update configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBiasState {
    bias: Vec<f64>,
    rule: UpdateRule,
    form: BiasForm,
    update_rate: f64,
}

impl ExpertBiasState {
    /// Additive biases start at 0, multiplicative at 1 (a no-op in both
    /// cases until the first update).
    pub fn new(experts: usize, rule: UpdateRule, form: BiasForm, update_rate: f64) -> Result<Self> {
        if experts == 0 {
            return Err(Error::contract("bias state: need at least one expert"));
        }
        if update_rate < 0.0 || !update_rate.is_finite() {
            return Err(Error::contract(format!(
                "bias state: update rate {update_rate} must be finite and >= 0"
            )));
        }
        let init = match form {
            BiasForm::Additive => 0.0,
            BiasForm::Multiplicative => 1.0,
        };
        Ok(ExpertBiasState {
            bias: vec![init; experts],
            rule,
            form,
            update_rate,
        })
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn form(&self) -> BiasForm {
        self.form
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn update_rate(&self) -> f64 {
        self.update_rate
    }

    pub fn min(&self) -> f64 {
        self.bias.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Restores a bias vector from a checkpoint.
    pub fn set_bias(&mut self, bias: Vec<f64>) -> Result<()> {
        if bias.len() != self.bias.len() {
            return Err(Error::contract(format!(
                "bias state: restore length {} != {}",
                bias.len(),
                self.bias.len()
            )));
        }
        self.bias = bias;
        Ok(())
    }

    /// One batch-boundary update from observed per-expert token counts:
    /// the violation error e_i = mean(c) - c_i feeds the configured rule,
    /// so heavy experts are depressed and light experts elevated.
    pub fn update(&mut self, loads: &[u64]) -> Result<()> {
        if loads.len() != self.bias.len() {
            return Err(Error::contract(format!(
                "bias update: {} loads for {} experts",
                loads.len(),
                self.bias.len()
            )));
        }
        let mean = loads.iter().sum::<u64>() as f64 / loads.len() as f64;
        for (b, &c) in self.bias.iter_mut().zip(loads.iter()) {
            let err = mean - c as f64;
            let delta = match self.rule {
                // f64::signum(0.0) is 1.0, so spell the three-way sign out.
                UpdateRule::Sign => {
                    if err > 0.0 {
                        self.update_rate
                    } else if err < 0.0 {
                        -self.update_rate
                    } else {
                        0.0
                    }
                }
                UpdateRule::Proportional => self.update_rate * err,
            };
            *b += delta;
        }
        Ok(())
    }
}

/// Auxiliary balance loss configuration; alpha = 0 disables it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxLossConfig {
    pub alpha: f64,
}

/// alpha * sum_i f_i P_i over the assignment's tokens, where
/// f_i = (N / (K T)) * count_i and P_i = mean_t s_{i,t}. The count factor
/// f is treated as a constant, so gradients reach the scores only through
/// P. Returns a scalar on the scores' tape.
pub fn aux_loss(
    scores: &Tensor,
    assignment: &RoutingAssignment,
    cfg: &AuxLossConfig,
) -> Result<Tensor> {
    let t = assignment.tokens();
    let n = assignment.experts();
    if t == 0 {
        return Err(Error::contract("aux loss: zero tokens"));
    }
    if scores.shape() != [t, n] {
        return Err(Error::dim(format!(
            "aux loss: scores {:?} vs assignment {t}x{n}",
            scores.shape()
        )));
    }
    let k = assignment.k().max(1);
    let scale = n as f64 / (k as f64 * t as f64);
    let f: Vec<f64> = assignment
        .loads()
        .iter()
        .map(|&c| scale * c as f64)
        .collect();
    let tape = scores.tape();
    let f_const = tape.leaf(&[n], f, false)?;
    // alpha * sum_i f_i P_i = (alpha / T) * sum_{t,i} f_i s_{i,t}
    Ok(scores.mul(&f_const)?.sum().scale(cfg.alpha / t as f64))
}
