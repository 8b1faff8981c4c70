//! Toy decoder-only MoE language model: shared + routed experts behind a
//! top-K (or Expert Choice) router, trained with next-token prediction.
//! The first block keeps a dense FFN; every later block is an MoE layer.
//!
//! One step works on a batch of equal-length sequences. Attention runs per
//! sequence; MoE routing is batch-synchronous so strategies that look
//! across tokens (Expert Choice chunks, load counting) see the whole step's
//! token stream at once.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::balancer::{ExpertBiasState, UpdateRule};
use crate::error::{Error, Result};
use crate::metrics::{layer_average, maxvio_of_counts};
use crate::routing::{
    compute_scores, expert_choice_select, topk_select_biased, BiasForm, ExpertChoiceConfig,
    GateKind, RoutingAssignment, RoutingScores,
};

/// Load-balancing strategy driving the router during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BalanceStrategy {
    /// Plain top-K on raw scores; no balance control.
    Vanilla,
    /// Vanilla routing plus the auxiliary balance loss.
    AuxLoss { alpha: f64 },
    /// Bias-adjusted top-K with batch-boundary bias updates.
    LossFree {
        rule: UpdateRule,
        form: BiasForm,
        update_rate: f64,
    },
    /// Expert Choice: experts pick tokens, chunk by chunk.
    ExpertChoice { chunk_size: usize, shuffle: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    /// Dense FFN width of the first block.
    pub d_ff: usize,
    /// Routed expert count N_r.
    pub n_routed: usize,
    /// Activated routed experts per token.
    pub k: usize,
    /// Always-active shared experts N_s.
    pub n_shared: usize,
    pub d_expert: usize,
    pub gate: GateKind,
    pub balancing: BalanceStrategy,
    /// Renormalize selected gate weights to sum to one before mixing.
    /// Off by default: the router mixes with raw scores.
    pub normalize_topk: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: the smallest shape that exercises the shared +
    /// routed structure and runs gradient checks in seconds.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 1,
            seq_len: 128,
            d_ff: 128,
            n_routed: 8,
            k: 2,
            n_shared: 1,
            d_expert: 32,
            gate: GateKind::Sigmoid,
            balancing: BalanceStrategy::Vanilla,
            normalize_topk: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 11,
            d_model: 6,
            n_layers: 2,
            n_heads: 1,
            seq_len: 8,
            d_ff: 8,
            n_routed: 4,
            k: 2,
            n_shared: 1,
            d_expert: 4,
            ..Default::default()
        }
    }

    /// Wide 64-expert preset mirroring the reference architecture family
    /// (64 routed / 6 active / 2 shared, 8 heads, 9 MoE blocks). A config
    /// shape only; far beyond what desk training exercises.
    pub fn wide64() -> Self {
        ModelConfig {
            vocab_size: 32064,
            d_model: 1024,
            n_layers: 10,
            n_heads: 8,
            seq_len: 2048,
            d_ff: 4096,
            n_routed: 64,
            k: 6,
            n_shared: 2,
            d_expert: 768,
            ..Default::default()
        }
    }

    /// Expert granularity d_ff / d_expert.
    pub fn granularity(&self) -> f64 {
        self.d_ff as f64 / self.d_expert as f64
    }

    /// MoE block count (every block after the first dense one).
    pub fn n_moe_layers(&self) -> usize {
        self.n_layers.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.seq_len < 2 || self.n_layers == 0 {
            return Err(Error::config("model: zero-sized core dimension".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model: n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_routed == 0 || self.k == 0 || self.k > self.n_routed {
            return Err(Error::config(format!(
                "model: need 0 < K <= N_r, got K={} N_r={}",
                self.k, self.n_routed
            )));
        }
        if let BalanceStrategy::ExpertChoice { chunk_size, .. } = self.balancing {
            if chunk_size == 0 {
                return Err(Error::config("model: expert choice chunk_size must be > 0".into()));
            }
            if chunk_size.min(self.seq_len) * self.k / self.n_routed == 0 {
                return Err(Error::config(format!(
                    "model: expert choice capacity floor({} * {} / {}) is zero",
                    chunk_size.min(self.seq_len),
                    self.k,
                    self.n_routed
                )));
            }
        }
        if let BalanceStrategy::AuxLoss { alpha } = self.balancing {
            if alpha < 0.0 || !alpha.is_finite() {
                return Err(Error::config(format!("model: alpha {alpha} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One named parameter buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, name-indexed parameter store.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }
}

/// Parameters bound onto a tape for one forward pass; indices match the
/// owning [`ParamSet`].
pub struct BoundParams {
    tensors: Vec<Tensor>,
}

impl BoundParams {
    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }
}

/// Metrics row produced by one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub lm_loss: f64,
    pub aux_loss: f64,
    /// Layer-averaged batch MaxVio over this step's MoE assignments.
    pub maxvio_batch: f64,
    pub per_layer_maxvio: Vec<f64>,
    pub bias_min: f64,
    pub bias_max: f64,
    pub wall_ms: f64,
}

/// Everything a forward pass produces besides the scalar loss.
pub struct ForwardOutput {
    pub loss: Tensor,
    pub lm_loss: f64,
    pub aux_loss: f64,
    /// One assignment per MoE block over the flattened batch (sequence-major
    /// token order).
    pub assignments: Vec<RoutingAssignment>,
    pub bound: BoundParams,
}

/// Evaluation summary over a token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub maxvio_global: f64,
    pub per_layer_maxvio: Vec<f64>,
    pub tokens_scored: u64,
}

/// The trainable model: config + parameters + per-MoE-block bias state.
/// Bias states exist for every strategy (vanilla and aux-loss simply never
/// update them), so all token-choice strategies route through one code path.
pub struct MoeLm {
    pub cfg: ModelConfig,
    params: ParamSet,
    bias_states: Vec<ExpertBiasState>,
}

fn expert_ffn(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    x.matmul(w1)?.silu()?.matmul(w2)
}

impl MoeLm {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.006).expect("valid sigma");
        let mut params = ParamSet::default();
        let mut init = |params: &mut ParamSet, name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.push(name, shape, data);
        };

        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        init(&mut params, "tok_embed", vec![cfg.vocab_size, d]);
        init(&mut params, "pos_embed", vec![cfg.seq_len, d]);
        for b in 0..cfg.n_layers {
            params.push(&format!("b{b}.ln1.g"), vec![d], vec![1.0; d]);
            params.push(&format!("b{b}.ln1.b"), vec![d], vec![0.0; d]);
            for h in 0..cfg.n_heads {
                init(&mut params, &format!("b{b}.attn.h{h}.wq"), vec![d, dh]);
                init(&mut params, &format!("b{b}.attn.h{h}.wk"), vec![d, dh]);
                init(&mut params, &format!("b{b}.attn.h{h}.wv"), vec![d, dh]);
                init(&mut params, &format!("b{b}.attn.h{h}.wo"), vec![dh, d]);
            }
            if b == 0 {
                init(&mut params, "b0.ffn.w1", vec![d, cfg.d_ff]);
                init(&mut params, "b0.ffn.w2", vec![cfg.d_ff, d]);
            } else {
                init(&mut params, &format!("b{b}.moe.centroids"), vec![d, cfg.n_routed]);
                for e in 0..cfg.n_routed {
                    init(&mut params, &format!("b{b}.moe.e{e}.w1"), vec![d, cfg.d_expert]);
                    init(&mut params, &format!("b{b}.moe.e{e}.w2"), vec![cfg.d_expert, d]);
                }
                for s in 0..cfg.n_shared {
                    init(&mut params, &format!("b{b}.moe.s{s}.w1"), vec![d, cfg.d_expert]);
                    init(&mut params, &format!("b{b}.moe.s{s}.w2"), vec![cfg.d_expert, d]);
                }
            }
        }
        params.push("ln_f.g", vec![d], vec![1.0; d]);
        params.push("ln_f.b", vec![d], vec![0.0; d]);
        init(&mut params, "head", vec![d, cfg.vocab_size]);

        let bias_states = Self::fresh_bias_states(&cfg)?;
        Ok(MoeLm {
            cfg,
            params,
            bias_states,
        })
    }

    fn fresh_bias_states(cfg: &ModelConfig) -> Result<Vec<ExpertBiasState>> {
        let (rule, form, u) = match cfg.balancing {
            BalanceStrategy::LossFree {
                rule,
                form,
                update_rate,
            } => (rule, form, update_rate),
            _ => (UpdateRule::Sign, BiasForm::Additive, 0.0),
        };
        (0..cfg.n_moe_layers())
            .map(|_| ExpertBiasState::new(cfg.n_routed, rule, form, u))
            .collect()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bias_states(&self) -> &[ExpertBiasState] {
        &self.bias_states
    }

    pub fn bias_states_mut(&mut self) -> &mut [ExpertBiasState] {
        &mut self.bias_states
    }

    pub(crate) fn restore_bias(&mut self, moe_idx: usize, bias: Vec<f64>) -> Result<()> {
        self.bias_states[moe_idx].set_bias(bias)
    }

    /// Binds every parameter as a leaf on `tape`.
    fn bind(&self, tape: &Tape, requires_grad: bool) -> Result<BoundParams> {
        let tensors = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.shape, p.data.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { tensors })
    }

    fn bound_by_name<'a>(&self, bound: &'a BoundParams, name: &str) -> &'a Tensor {
        let id = *self
            .params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        bound.tensor(id)
    }

    fn attention(&self, bound: &BoundParams, block: usize, x: &Tensor) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let g = self.bound_by_name(bound, &format!("b{block}.ln1.g"));
        let b = self.bound_by_name(bound, &format!("b{block}.ln1.b"));
        let ln = x.layer_norm(g, b, 1e-5)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut acc: Option<Tensor> = None;
        for h in 0..self.cfg.n_heads {
            let wq = self.bound_by_name(bound, &format!("b{block}.attn.h{h}.wq"));
            let wk = self.bound_by_name(bound, &format!("b{block}.attn.h{h}.wk"));
            let wv = self.bound_by_name(bound, &format!("b{block}.attn.h{h}.wv"));
            let wo = self.bound_by_name(bound, &format!("b{block}.attn.h{h}.wo"));
            let q = ln.matmul(wq)?;
            let k = ln.matmul(wk)?;
            let v = ln.matmul(wv)?;
            let scores = q.matmul(&k.transpose()?)?.scale(scale);
            let attn = scores.causal_softmax()?;
            let ctx = attn.matmul(&v)?;
            let out = ctx.matmul(wo)?;
            acc = Some(match acc {
                Some(a) => a.add(&out)?,
                None => out,
            });
        }
        x.add(&acc.expect("n_heads >= 1"))
    }

    fn moe_layer_bound(&self, bound: &BoundParams, block: usize) -> MoeLayerBound {
        MoeLayerBound {
            centroids: self
                .bound_by_name(bound, &format!("b{block}.moe.centroids"))
                .clone(),
            routed: (0..self.cfg.n_routed)
                .map(|e| {
                    (
                        self.bound_by_name(bound, &format!("b{block}.moe.e{e}.w1")).clone(),
                        self.bound_by_name(bound, &format!("b{block}.moe.e{e}.w2")).clone(),
                    )
                })
                .collect(),
            shared: (0..self.cfg.n_shared)
                .map(|s| {
                    (
                        self.bound_by_name(bound, &format!("b{block}.moe.s{s}.w1")).clone(),
                        self.bound_by_name(bound, &format!("b{block}.moe.s{s}.w2")).clone(),
                    )
                })
                .collect(),
        }
    }

    /// Routes a whole step's score snapshot under the configured strategy.
    fn select(
        &self,
        moe_idx: usize,
        snapshot: &RoutingScores,
        step_seed: u64,
    ) -> Result<RoutingAssignment> {
        match self.cfg.balancing {
            BalanceStrategy::Vanilla | BalanceStrategy::AuxLoss { .. } | BalanceStrategy::LossFree { .. } => {
                let state = &self.bias_states[moe_idx];
                topk_select_biased(snapshot, state.bias(), state.form(), self.cfg.k)
            }
            BalanceStrategy::ExpertChoice { chunk_size, shuffle } => {
                let cfg = ExpertChoiceConfig {
                    chunk_size,
                    shuffle,
                    shuffle_seed: step_seed ^ (moe_idx as u64).wrapping_mul(0x9E3779B97F4A7C15),
                };
                expert_choice_select(snapshot, &cfg, self.cfg.k)
            }
        }
    }

    /// Full forward pass over equal-length sequences (each `seq_len + 1`
    /// tokens at most: inputs plus shifted targets). When
    /// `pinned_assignments` is given, routing selection is skipped and the
    /// provided per-MoE-block assignments are used; gradient checks rely on
    /// this to hold the non-differentiable selection fixed.
    pub fn forward(
        &self,
        tape: &Tape,
        batch: &[Vec<u32>],
        requires_grad: bool,
        step_seed: u64,
        pinned_assignments: Option<&[RoutingAssignment]>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::contract("forward: empty batch".into()));
        }
        let len = batch[0].len();
        if len < 2 {
            return Err(Error::contract("forward: sequences need >= 2 tokens".into()));
        }
        if batch.iter().any(|s| s.len() != len) {
            return Err(Error::contract("forward: ragged batch".into()));
        }
        let t = len - 1;
        if t > self.cfg.seq_len {
            return Err(Error::contract(format!(
                "forward: sequence length {t} exceeds seq_len {}",
                self.cfg.seq_len
            )));
        }
        let b = batch.len();
        let t_total = b * t;
        let bound = self.bind(tape, requires_grad)?;
        let tok = self.bound_by_name(&bound, "tok_embed");
        let pos = self.bound_by_name(&bound, "pos_embed");
        let positions: Vec<usize> = (0..t).collect();

        let mut states: Vec<Tensor> = Vec::with_capacity(b);
        for seq in batch {
            let emb = tok.embedding_lookup(&seq[..t].to_vec())?;
            let pe = pos.gather_rows(&positions)?;
            states.push(emb.add(&pe)?);
        }

        let mut assignments = Vec::with_capacity(self.cfg.n_moe_layers());
        let mut aux_terms: Vec<Tensor> = Vec::new();
        for block in 0..self.cfg.n_layers {
            for s in 0..b {
                states[s] = self.attention(&bound, block, &states[s])?;
            }
            if block == 0 {
                let w1 = self.bound_by_name(&bound, "b0.ffn.w1");
                let w2 = self.bound_by_name(&bound, "b0.ffn.w2");
                for s in 0..b {
                    let y = expert_ffn(&states[s], w1, w2)?;
                    states[s] = states[s].add(&y)?;
                }
                continue;
            }
            let moe_idx = block - 1;
            let layer = self.moe_layer_bound(&bound, block);
            let score_ts: Vec<Tensor> = states
                .iter()
                .map(|u| compute_scores(u, &layer.centroids, self.cfg.gate))
                .collect::<Result<_>>()?;
            // Batch-level score matrix, still differentiable into each
            // per-sequence score tensor.
            let mut concat: Option<Tensor> = None;
            for (s, st) in score_ts.iter().enumerate() {
                let rows: Vec<usize> = (s * t..(s + 1) * t).collect();
                let spread = st.scatter_rows(&rows, t_total)?;
                concat = Some(match concat {
                    Some(c) => c.add(&spread)?,
                    None => spread,
                });
            }
            let concat = concat.expect("non-empty batch");
            let snapshot = RoutingScores::from_tensor(&concat, self.cfg.gate)?;
            let assignment = match pinned_assignments {
                Some(pins) => {
                    let a = pins.get(moe_idx).ok_or_else(|| {
                        Error::contract("forward: missing pinned assignment".into())
                    })?;
                    if a.tokens() != t_total || a.experts() != self.cfg.n_routed {
                        return Err(Error::contract("forward: pinned assignment shape".into()));
                    }
                    a.clone()
                }
                None => self.select(moe_idx, &snapshot, step_seed)?,
            };
            if let BalanceStrategy::AuxLoss { alpha } = self.cfg.balancing {
                aux_terms.push(crate::balancer::aux_loss(
                    &concat,
                    &assignment,
                    &crate::balancer::AuxLossConfig { alpha },
                )?);
            }
            for s in 0..b {
                let local = assignment.slice_tokens(s * t, t);
                states[s] = moe_mix(
                    &states[s],
                    &score_ts[s],
                    &local,
                    &layer,
                    self.cfg.normalize_topk,
                )?;
            }
            assignments.push(assignment);
        }

        let g = self.bound_by_name(&bound, "ln_f.g");
        let bb = self.bound_by_name(&bound, "ln_f.b");
        let head = self.bound_by_name(&bound, "head");
        let mut lm: Option<Tensor> = None;
        for (s, seq) in batch.iter().enumerate() {
            let x = states[s].layer_norm(g, bb, 1e-5)?;
            let logits = x.matmul(head)?;
            let ce = logits.cross_entropy(&seq[1..].to_vec())?;
            lm = Some(match lm {
                Some(acc) => acc.add(&ce)?,
                None => ce,
            });
        }
        let lm = lm.expect("non-empty batch").scale(1.0 / b as f64);
        let lm_loss = lm.value()?;
        let mut loss = lm;
        let mut aux_loss = 0.0;
        for term in aux_terms {
            aux_loss += term.value()?;
            loss = loss.add(&term)?;
        }
        Ok(ForwardOutput {
            loss,
            lm_loss,
            aux_loss,
            assignments,
            bound,
        })
    }

    /// Total loss as a plain number; used by finite-difference probes.
    pub fn loss_on(
        &self,
        batch: &[Vec<u32>],
        step_seed: u64,
        pinned: Option<&[RoutingAssignment]>,
    ) -> Result<f64> {
        let tape = Tape::new();
        let out = self.forward(&tape, batch, false, step_seed, pinned)?;
        out.loss.value()
    }

    /// One optimizer step. For loss-free balancing the per-expert biases are
    /// updated strictly after the optimizer step from the loads just
    /// observed, so they only influence the next step's routing.
    pub fn train_step(
        &mut self,
        batch: &[Vec<u32>],
        opt: &mut Adam,
        step: u64,
    ) -> Result<TrainRecord> {
        let t0 = std::time::Instant::now();
        let tape = Tape::new();
        let step_seed = self.cfg.seed ^ step.wrapping_mul(0x2545F4914F6CDD1D);
        let out = self.forward(&tape, batch, true, step_seed, None)?;
        if !out.lm_loss.is_finite() || !out.aux_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "train step {step}: lm={} aux={}",
                out.lm_loss, out.aux_loss
            )));
        }
        out.loss.backward()?;
        let grads: Vec<Option<Vec<f64>>> = (0..self.params.len())
            .map(|i| out.bound.tensor(i).grad())
            .collect();
        let mut bufs: Vec<Vec<f64>> = self.params.params.iter().map(|p| p.data.clone()).collect();
        opt.step(&mut bufs, &grads, step)?;
        for (p, b) in self.params.params.iter_mut().zip(bufs) {
            p.data = b;
        }

        if matches!(self.cfg.balancing, BalanceStrategy::LossFree { .. }) {
            for (state, assignment) in self.bias_states.iter_mut().zip(&out.assignments) {
                state.update(&assignment.loads())?;
            }
        }

        let per_layer: Vec<f64> = out
            .assignments
            .iter()
            .map(|a| maxvio_of_counts(&a.loads()))
            .collect::<Result<_>>()?;
        let maxvio_batch = layer_average(&per_layer)?;
        let (bias_min, bias_max) = self
            .bias_states
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.min()), hi.max(s.max()))
            });
        Ok(TrainRecord {
            step,
            lm_loss: out.lm_loss,
            aux_loss: out.aux_loss,
            maxvio_batch,
            per_layer_maxvio: per_layer,
            bias_min,
            bias_max,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Per-sample (per-sequence) per-expert loads for each MoE layer of one
    /// already-computed step, for computation-batch analysis.
    pub fn per_sample_loads(assignment: &RoutingAssignment, samples: usize) -> Vec<Vec<u64>> {
        let t = assignment.tokens() / samples;
        (0..samples)
            .map(|s| assignment.slice_tokens(s * t, t).loads())
            .collect()
    }

    /// Perplexity and global MaxVio over a validation stream. The stream is
    /// cut into non-overlapping windows of `seq_len + 1` tokens; loads
    /// accumulate over the whole pass before MaxVio is taken per layer.
    pub fn evaluate(&self, validation: &[u32], batch_size: usize) -> Result<EvalReport> {
        let t = self.cfg.seq_len;
        if validation.len() < t + 1 {
            return Err(Error::contract(format!(
                "evaluate: need at least {} tokens, got {}",
                t + 1,
                validation.len()
            )));
        }
        if batch_size == 0 {
            return Err(Error::contract("evaluate: batch_size must be > 0".into()));
        }
        let sequences: Vec<Vec<u32>> = (0..)
            .map(|i| i * t)
            .take_while(|&start| start + t + 1 <= validation.len())
            .map(|start| validation[start..start + t + 1].to_vec())
            .collect();
        let mut total_nll = 0.0;
        let mut total_preds = 0u64;
        let mut loads: Vec<Vec<u64>> = vec![vec![0; self.cfg.n_routed]; self.cfg.n_moe_layers()];
        for chunk in sequences.chunks(batch_size) {
            let tape = Tape::new();
            let out = self.forward(&tape, chunk, false, self.cfg.seed, None)?;
            total_nll += out.lm_loss * (chunk.len() * t) as f64;
            total_preds += (chunk.len() * t) as u64;
            for (acc, a) in loads.iter_mut().zip(&out.assignments) {
                for (c, l) in acc.iter_mut().zip(a.loads()) {
                    *c += l;
                }
            }
        }
        let per_layer: Vec<f64> = loads
            .iter()
            .map(|c| maxvio_of_counts(c))
            .collect::<Result<_>>()?;
        let maxvio_global = if per_layer.is_empty() {
            0.0
        } else {
            layer_average(&per_layer)?
        };
        Ok(EvalReport {
            perplexity: (total_nll / total_preds as f64).exp(),
            maxvio_global,
            per_layer_maxvio: per_layer,
            tokens_scored: total_preds,
        })
    }

    /// Logits for a single raw sequence plus the routing trace per MoE
    /// block; used by causality probes.
    pub fn logits_for(&self, tokens: &[u32]) -> Result<(Vec<f64>, Vec<RoutingAssignment>)> {
        if tokens.is_empty() || tokens.len() > self.cfg.seq_len {
            return Err(Error::contract(format!(
                "logits_for: length {} outside 1..={}",
                tokens.len(),
                self.cfg.seq_len
            )));
        }
        self.logits_direct(tokens)
    }

    fn logits_direct(&self, tokens: &[u32]) -> Result<(Vec<f64>, Vec<RoutingAssignment>)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let t = tokens.len();
        let tok = self.bound_by_name(&bound, "tok_embed");
        let pos = self.bound_by_name(&bound, "pos_embed");
        let positions: Vec<usize> = (0..t).collect();
        let mut x = tok
            .embedding_lookup(tokens)?
            .add(&pos.gather_rows(&positions)?)?;
        let mut assignments = Vec::new();
        for block in 0..self.cfg.n_layers {
            x = self.attention(&bound, block, &x)?;
            if block == 0 {
                let w1 = self.bound_by_name(&bound, "b0.ffn.w1");
                let w2 = self.bound_by_name(&bound, "b0.ffn.w2");
                let y = expert_ffn(&x, w1, w2)?;
                x = x.add(&y)?;
                continue;
            }
            let moe_idx = block - 1;
            let layer = self.moe_layer_bound(&bound, block);
            let scores_t = compute_scores(&x, &layer.centroids, self.cfg.gate)?;
            let snapshot = RoutingScores::from_tensor(&scores_t, self.cfg.gate)?;
            let assignment = self.select(moe_idx, &snapshot, self.cfg.seed)?;
            x = moe_mix(&x, &scores_t, &assignment, &layer, self.cfg.normalize_topk)?;
            assignments.push(assignment);
        }
        let g = self.bound_by_name(&bound, "ln_f.g");
        let b = self.bound_by_name(&bound, "ln_f.b");
        let head = self.bound_by_name(&bound, "head");
        let logits = x.layer_norm(g, b, 1e-5)?.matmul(head)?;
        Ok((logits.data(), assignments))
    }
}

/// Bound tensors of one MoE layer.
pub struct MoeLayerBound {
    pub centroids: Tensor,
    pub routed: Vec<(Tensor, Tensor)>,
    pub shared: Vec<(Tensor, Tensor)>,
}

/// The MoE layer map: h = u + sum_shared FFN_s(u) + sum_selected g * FFN_i(u),
/// with the residual included. Scores are computed on `u`, selection comes
/// from `selector`, and gate weights flow gradients only through the scores.
pub fn moe_layer_forward(
    u: &Tensor,
    layer: &MoeLayerBound,
    gate: GateKind,
    normalize_topk: bool,
    selector: impl FnOnce(&RoutingScores) -> Result<RoutingAssignment>,
) -> Result<(Tensor, RoutingAssignment)> {
    let scores_t = compute_scores(u, &layer.centroids, gate)?;
    let snapshot = RoutingScores::from_tensor(&scores_t, gate)?;
    let assignment = selector(&snapshot)?;
    let out = moe_mix(u, &scores_t, &assignment, layer, normalize_topk)?;
    Ok((out, assignment))
}

/// Mixes shared and routed expert outputs into the residual stream for one
/// token block whose assignment is already decided.
fn moe_mix(
    u: &Tensor,
    scores_t: &Tensor,
    assignment: &RoutingAssignment,
    layer: &MoeLayerBound,
    normalize_topk: bool,
) -> Result<Tensor> {
    let t = assignment.tokens();
    let n = assignment.experts();
    if u.shape()[0] != t {
        return Err(Error::dim(format!(
            "moe mix: {} tokens vs assignment {t}",
            u.shape()[0]
        )));
    }
    let gate_src = if normalize_topk {
        // Renormalize selected scores to sum to one per token. The epsilon
        // keeps tokens with no selected expert (EC leftovers) at zero.
        let tape = scores_t.tape();
        let mut mask = vec![0.0; t * n];
        for tok in 0..t {
            for &e in assignment.selected(tok) {
                mask[tok * n + e] = 1.0;
            }
        }
        let mask = tape.leaf(&[t, n], mask, false)?;
        let masked = scores_t.mul(&mask)?;
        let ones = tape.leaf(&[n, 1], vec![1.0; n], false)?;
        let row_sums = masked.matmul(&ones)?;
        let sums_vec = row_sums.gather_elems(&(0..t).collect::<Vec<_>>())?;
        let eps = tape.leaf(&[t], vec![1e-30; t], false)?;
        masked.div_rows(&sums_vec.add(&eps)?)?
    } else {
        scores_t.clone()
    };

    let mut acc: Option<Tensor> = None;
    for (w1, w2) in &layer.shared {
        let y = expert_ffn(u, w1, w2)?;
        acc = Some(match acc {
            Some(a) => a.add(&y)?,
            None => y,
        });
    }
    for (e, (w1, w2)) in layer.routed.iter().enumerate() {
        let rows = assignment.tokens_for_expert(e);
        if rows.is_empty() {
            continue;
        }
        let sub = u.gather_rows(&rows)?;
        let y = expert_ffn(&sub, w1, w2)?;
        let flat: Vec<usize> = rows.iter().map(|&r| r * n + e).collect();
        let gates = gate_src.gather_elems(&flat)?;
        let y = y.scale_rows(&gates)?;
        let spread = y.scatter_rows(&rows, t)?;
        acc = Some(match acc {
            Some(a) => a.add(&spread)?,
            None => spread,
        });
    }
    match acc {
        Some(a) => u.add(&a),
        None => Ok(u.clone()),
    }
}
