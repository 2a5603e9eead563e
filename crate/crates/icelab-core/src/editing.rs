//! Knowledge-editing losses and the iterative edit loop.
//!
//! Notation: `q` is the query, `x*` the new target answer, `c` a
//! context statement of the new fact, and `x_c` a sampled completion.
//! All sequences handed to this module are raw text tokens; the begin
//! marker is prepended here, in exactly one place.
//!
//! The losses:
//!
//! * fine-tuning loss      `L_ft  = -log p(x* | q)` — the KL divergence
//!   from a one-hot target distribution to the model;
//! * self-sampling form    `L_ft* = KL( δ_{x*} ⊗ p(x_c | [q, x*]) || p(x | q) )`,
//!   which collapses to `L_ft` exactly because the appended completion
//!   factor is shared — [`ft_sampling_loss_exact`] evaluates the full
//!   enumeration sum so the collapse can be checked numerically;
//! * consistency loss      `KL( p_target(x_c | [c, q, x*]) || p_live(x_c | [q, x*]) )`,
//!   estimated by sampling completions from a detached target model
//!   ([`sampled_consistency_loss`]) or enumerated exactly
//!   ([`completion_kl_exact`]);
//! * combined objective    `L = L_ft + λ · L_consistency`, whose exact
//!   combined-sequence form [`combined_kl_exact`] satisfies
//!   `combined = L_ft + completion KL` identically;
//! * consistency gap       `KL( p(x | [c, q]) || p(x | q) )`, the
//!   quantity an edit is meant to drive to zero ([`consistency_gap`]).
//!
//! [`ice_edit`] runs the loop: sample completions from the moving
//! (detached) target conditioned on `[c, q, x*]`, take a clipped
//! gradient step on the combined loss, project back onto the weight
//! ball, and stop on convergence or the step budget.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, BOS};
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::model::{
    bind_params, sample_completion, seq_log_prob_node, sequence_log_prob, write_grads,
    ModelConfig, ParamBindings,
};
use crate::params::{clip_gradients, ParamSet};

/// Enumeration guard: exact sums refuse to expand more than this many
/// sequences.
pub const ENUM_LIMIT: usize = 4096;

/// Editing method variants. The 2x2 sampling ablation (moving vs
/// frozen target, with vs without context) plus the two pure
/// fine-tuning baselines:
///
/// * `Ft` — gradient descent on `L_ft` alone, never clamped;
/// * `FtClamped` — `Ft` plus the weight-ball projection;
/// * `FtSampling` — completions from the frozen original model without
///   context (the static/no-context cell);
/// * `IceDynamic` — completions from the current model with context
///   (the full method);
/// * `IceStatic` — completions from the frozen original model with
///   context;
/// * `IceNoContext` — completions from the current model without
///   context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ft,
    FtClamped,
    FtSampling,
    IceDynamic,
    IceStatic,
    IceNoContext,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ft => "ft",
            Variant::FtClamped => "ft_clamped",
            Variant::FtSampling => "ft_sampling",
            Variant::IceDynamic => "ice_dynamic",
            Variant::IceStatic => "ice_static",
            Variant::IceNoContext => "ice_no_context",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ft" => Variant::Ft,
            "ft_clamped" => Variant::FtClamped,
            "ft_sampling" => Variant::FtSampling,
            "ice_dynamic" => Variant::IceDynamic,
            "ice_static" => Variant::IceStatic,
            "ice_no_context" => Variant::IceNoContext,
            _ => return None,
        })
    }

    pub fn all() -> [Variant; 6] {
        [
            Variant::Ft,
            Variant::FtClamped,
            Variant::FtSampling,
            Variant::IceDynamic,
            Variant::IceStatic,
            Variant::IceNoContext,
        ]
    }

    /// Does the loss include a sampled-completion term?
    pub fn uses_sampling(&self) -> bool {
        !matches!(self, Variant::Ft | Variant::FtClamped)
    }

    /// Are completions conditioned on a context statement?
    pub fn uses_context(&self) -> bool {
        matches!(self, Variant::IceDynamic | Variant::IceStatic)
    }

    /// Does the sampling target track the live model (vs the frozen
    /// original)?
    pub fn dynamic_target(&self) -> bool {
        matches!(self, Variant::IceDynamic | Variant::IceNoContext)
    }

    /// Every variant except plain `Ft` projects onto the weight ball.
    pub fn clamps(&self) -> bool {
        !matches!(self, Variant::Ft)
    }
}

/// Hyperparameters of one edit. Defaults follow the reference recipe:
/// λ = 1, η = 7e-4, a full 25-step budget (early stops disabled),
/// 5 samples of length 3 at temperature 100, weight ball ±0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Elementwise gradient clip bound ε_g.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Radius ε_θ of the infinity-norm ball around the pre-edit
    /// weights; applied by every variant except `ft`.
    #[serde(default = "default_weight_clamp")]
    pub weight_clamp: f64,
    /// Completions sampled per step (K).
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_sample_len")]
    pub sample_len: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Relative combined-loss improvement below which a step counts as
    /// stalled (0 disables the stall detector).
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    /// Consecutive stalled steps before the loop stops.
    #[serde(default = "default_convergence_patience")]
    pub convergence_patience: usize,
    /// Magnitude convergence: stop once `-log p(x* | q)` falls below
    /// this value (0 disables the check and spends the whole budget).
    #[serde(default = "default_ft_stop")]
    pub ft_stop: f64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    7e-4
}
fn default_max_steps() -> usize {
    25
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_weight_clamp() -> f64 {
    0.05
}
fn default_samples() -> usize {
    5
}
fn default_sample_len() -> usize {
    3
}
fn default_temperature() -> f64 {
    100.0
}
fn default_variant() -> Variant {
    Variant::IceDynamic
}
fn default_convergence_tol() -> f64 {
    1e-4
}
fn default_convergence_patience() -> usize {
    3
}
fn default_ft_stop() -> f64 {
    0.05
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            lambda: default_lambda(),
            eta: default_eta(),
            max_steps: default_max_steps(),
            grad_clip: default_grad_clip(),
            weight_clamp: default_weight_clamp(),
            samples: default_samples(),
            sample_len: default_sample_len(),
            temperature: default_temperature(),
            variant: default_variant(),
            convergence_tol: default_convergence_tol(),
            convergence_patience: default_convergence_patience(),
            ft_stop: default_ft_stop(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<(), EditError> {
        let bad = |msg: String| Err(EditError::BadConfig(msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".to_string());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.weight_clamp > 0.0) {
            return bad(format!("weight_clamp must be positive, got {}", self.weight_clamp));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.variant.uses_sampling() && (self.samples == 0 || self.sample_len == 0) {
            return bad(format!(
                "variant {} samples completions but samples={} sample_len={}",
                self.variant.name(),
                self.samples,
                self.sample_len
            ));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad(format!("convergence_tol must be nonnegative, got {}", self.convergence_tol));
        }
        if self.convergence_patience == 0 {
            return bad("convergence_patience must be positive".to_string());
        }
        if !(self.ft_stop >= 0.0) {
            return bad(format!("ft_stop must be nonnegative, got {}", self.ft_stop));
        }
        Ok(())
    }
}

/// One edit request after tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTask {
    pub query: TokenSeq,
    pub target: TokenSeq,
    pub contexts: Vec<TokenSeq>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditError {
    BadConfig(String),
    /// The loss left the finite range.
    NonFiniteLoss { step: usize },
    /// An exact enumeration would exceed [`ENUM_LIMIT`] sequences.
    EnumerationTooLarge { sequences: usize },
}

impl core::fmt::Display for EditError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EditError::BadConfig(msg) => write!(f, "bad edit config: {msg}"),
            EditError::NonFiniteLoss { step } => {
                write!(f, "edit loss became non-finite at step {step}")
            }
            EditError::EnumerationTooLarge { sequences } => write!(
                f,
                "exact enumeration over {sequences} sequences exceeds the limit of {ENUM_LIMIT}"
            ),
        }
    }
}

/// Per-step measurements of an edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// `-log p(x* | q)` under the live model at the start of the step.
    pub ft_loss: f64,
    /// Mean `-log p(x_c | [q, x*])` of the step's sampled completions
    /// (zero for non-sampling variants).
    pub consistency_loss: f64,
    /// `ft_loss + lambda * consistency_loss` — the minimized objective.
    pub combined_loss: f64,
    /// Largest clipped-gradient entry applied this step.
    pub grad_inf_norm: f64,
    /// Largest parameter deviation from the pre-edit weights after the
    /// step (and after the ball projection, when active).
    pub delta_inf_norm: f64,
}

/// Result of one [`ice_edit`] run. The edited weights live in the
/// `ParamSet` passed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub converged: bool,
    pub steps_run: usize,
    pub trace: Vec<StepTrace>,
}

impl EditOutcome {
    pub fn final_combined_loss(&self) -> f64 {
        self.trace.last().map(|t| t.combined_loss).unwrap_or(f64::NAN)
    }
}

fn model_input(parts: &[&[usize]]) -> TokenSeq {
    let mut seq = Vec::with_capacity(1 + parts.iter().map(|p| p.len()).sum::<usize>());
    seq.push(BOS);
    for p in parts {
        seq.extend_from_slice(*p);
    }
    seq
}

// ── Losses ──────────────────────────────────────────────────────────────

/// `-log p(x* | q)`: the value of the plain fine-tuning loss.
pub fn ft_loss(cfg: &ModelConfig, params: &ParamSet, q: &[usize], x_star: &[usize]) -> f64 {
    -sequence_log_prob(cfg, params, &model_input(&[q]), x_star)
}

/// Differentiable combined step loss with *fixed* completions:
/// `-log p(x*|q) + lambda * mean_k( -log p(x_c^k | [q, x*]) )`.
/// Returns the graph, bindings, the loss node, and the two term values.
/// With `lambda = 1` this equals `mean_k -log p([x*, x_c^k] | q)`
/// exactly, by the chain rule.
pub fn combined_step_loss_graph(
    cfg: &ModelConfig,
    params: &ParamSet,
    editable: &BTreeSet<String>,
    q: &[usize],
    x_star: &[usize],
    completions: &[TokenSeq],
    lambda: f64,
) -> (Graph, ParamBindings, NodeId, f64, f64) {
    let mut g = Graph::new();
    let b = bind_params(&mut g, params, Some(editable));

    let bos_q = model_input(&[q]);
    let mut full = bos_q.clone();
    full.extend_from_slice(x_star);
    let lp_star = seq_log_prob_node(&mut g, &b, cfg, &full, bos_q.len());
    let ft = g.scale(lp_star, -1.0);
    let ft_value = g.scalar_value(ft);

    let (loss, cons_value) = if completions.is_empty() || lambda == 0.0 {
        (ft, 0.0)
    } else {
        let prefix = model_input(&[q, x_star]);
        let mut acc: Option<NodeId> = None;
        for xc in completions {
            let mut seq = prefix.clone();
            seq.extend_from_slice(xc);
            let lp = seq_log_prob_node(&mut g, &b, cfg, &seq, prefix.len());
            acc = Some(match acc {
                None => lp,
                Some(a) => g.add(a, lp),
            });
        }
        let total = acc.expect("at least one completion");
        let cons = g.scale(total, -1.0 / completions.len() as f64);
        let cons_value = g.scalar_value(cons);
        let weighted = g.scale(cons, lambda);
        (g.add(ft, weighted), cons_value)
    };
    (g, b, loss, ft_value, cons_value)
}

/// Differentiable completion term alone: `mean_k -log p(x_c^k | [q, x*])`
/// with the completions held fixed. With completions drawn once from
/// the frozen pre-edit model this is the static sample loss.
pub fn completion_nll_graph(
    cfg: &ModelConfig,
    params: &ParamSet,
    editable: &BTreeSet<String>,
    q: &[usize],
    x_star: &[usize],
    completions: &[TokenSeq],
) -> (Graph, ParamBindings, NodeId) {
    assert!(!completions.is_empty(), "completion loss needs at least one sample");
    let mut g = Graph::new();
    let b = bind_params(&mut g, params, Some(editable));
    let prefix = model_input(&[q, x_star]);
    let mut acc: Option<NodeId> = None;
    for xc in completions {
        let mut seq = prefix.clone();
        seq.extend_from_slice(xc);
        let lp = seq_log_prob_node(&mut g, &b, cfg, &seq, prefix.len());
        acc = Some(match acc {
            None => lp,
            Some(a) => g.add(a, lp),
        });
    }
    let total = acc.expect("nonempty");
    let loss = g.scale(total, -1.0 / completions.len() as f64);
    (g, b, loss)
}

/// Value-only twin of [`completion_nll_graph`].
pub fn completion_nll_value(
    cfg: &ModelConfig,
    params: &ParamSet,
    q: &[usize],
    x_star: &[usize],
    completions: &[TokenSeq],
) -> f64 {
    assert!(!completions.is_empty(), "completion loss needs at least one sample");
    let prefix = model_input(&[q, x_star]);
    completions
        .iter()
        .map(|xc| -sequence_log_prob(cfg, params, &prefix, xc))
        .sum::<f64>()
        / completions.len() as f64
}

/// Value-only twin of [`combined_step_loss_graph`], used by the
/// finite-difference oracle.
pub fn combined_step_loss_value(
    cfg: &ModelConfig,
    params: &ParamSet,
    q: &[usize],
    x_star: &[usize],
    completions: &[TokenSeq],
    lambda: f64,
) -> f64 {
    let ft = ft_loss(cfg, params, q, x_star);
    if completions.is_empty() || lambda == 0.0 {
        return ft;
    }
    let prefix = model_input(&[q, x_star]);
    let mean_nll = completions
        .iter()
        .map(|xc| -sequence_log_prob(cfg, params, &prefix, xc))
        .sum::<f64>()
        / completions.len() as f64;
    ft + lambda * mean_nll
}

/// Completions drawn from the sampling target for one edit step:
/// `x_c ~ p_target( · | [context?, q, x*])`, `k` sequences of length
/// `len` at the given temperature.
pub fn sample_step_completions(
    cfg: &ModelConfig,
    target_params: &ParamSet,
    context: Option<&[usize]>,
    q: &[usize],
    x_star: &[usize],
    k: usize,
    len: usize,
    temperature: f64,
    rng: &mut impl rand_core::RngCore,
) -> Vec<TokenSeq> {
    let prefix = match context {
        Some(c) => model_input(&[c, q, x_star]),
        None => model_input(&[q, x_star]),
    };
    (0..k).map(|_| sample_completion(cfg, target_params, &prefix, len, temperature, rng)).collect()
}

/// Monte Carlo estimate of the consistency term: completions from the
/// (detached) target model, scored as mean `-log p_live(x_c | [q, x*])`.
/// Returns the estimate together with the completions that produced it.
pub fn sampled_consistency_loss(
    cfg: &ModelConfig,
    target_params: &ParamSet,
    live_params: &ParamSet,
    context: Option<&[usize]>,
    q: &[usize],
    x_star: &[usize],
    k: usize,
    len: usize,
    temperature: f64,
    rng: &mut impl rand_core::RngCore,
) -> (f64, Vec<TokenSeq>) {
    let completions =
        sample_step_completions(cfg, target_params, context, q, x_star, k, len, temperature, rng);
    let prefix = model_input(&[q, x_star]);
    let value = completions
        .iter()
        .map(|xc| -sequence_log_prob(cfg, live_params, &prefix, xc))
        .sum::<f64>()
        / completions.len().max(1) as f64;
    (value, completions)
}

// ── Exact enumeration oracles ───────────────────────────────────────────

fn enum_count(vocab: usize, horizon: usize) -> Result<usize, EditError> {
    let mut n: usize = 1;
    for _ in 0..horizon {
        n = n.checked_mul(vocab).unwrap_or(usize::MAX);
        if n > ENUM_LIMIT {
            return Err(EditError::EnumerationTooLarge { sequences: n });
        }
    }
    Ok(n)
}

/// All `vocab^len` sequences in lexicographic order.
pub fn all_seqs(vocab: usize, len: usize) -> Vec<TokenSeq> {
    let mut out = vec![TokenSeq::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * vocab);
        for s in &out {
            for t in 0..vocab {
                let mut s2 = s.clone();
                s2.push(t);
                next.push(s2);
            }
        }
        out = next;
    }
    out
}

/// Log-probabilities of every length-`horizon` continuation of
/// `prefix`, in the order of [`all_seqs`]. Shares forwards across the
/// prefix tree, so it costs `O(vocab^(horizon-1))` forwards instead of
/// `O(vocab^horizon)`.
pub fn enum_log_probs(
    cfg: &ModelConfig,
    params: &ParamSet,
    prefix: &[usize],
    horizon: usize,
) -> Result<Vec<f64>, EditError> {
    enum_log_probs_at(cfg, params, prefix, horizon, 1.0)
}

/// Like [`enum_log_probs`], but under the temperature-scaled sampling
/// distribution softmax(logits/temperature) at each step — the
/// distribution completions are actually drawn from.
pub fn enum_log_probs_at(
    cfg: &ModelConfig,
    params: &ParamSet,
    prefix: &[usize],
    horizon: usize,
    temperature: f64,
) -> Result<Vec<f64>, EditError> {
    assert!(temperature > 0.0, "temperature must be positive, got {temperature}");
    let n = enum_count(cfg.vocab_size, horizon)?;
    let mut out = Vec::with_capacity(n);
    let mut stack_prefix = prefix.to_vec();
    fn descend(
        cfg: &ModelConfig,
        params: &ParamSet,
        temperature: f64,
        seq: &mut TokenSeq,
        acc: f64,
        depth: usize,
        out: &mut Vec<f64>,
    ) {
        if depth == 0 {
            out.push(acc);
            return;
        }
        let logits = crate::model::next_token_logits(cfg, params, seq);
        let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
        let lse = crate::math::log_sum_exp(&scaled);
        for t in 0..cfg.vocab_size {
            seq.push(t);
            descend(cfg, params, temperature, seq, acc + scaled[t] - lse, depth - 1, out);
            seq.pop();
        }
    }
    descend(cfg, params, temperature, &mut stack_prefix, 0.0, horizon, &mut out);
    Ok(out)
}

/// Exact expectation of the per-step combined loss at fixed parameters:
/// `L_FT(live)` plus `lambda` times the expected completion NLL under
/// the target model's temperature-scaled sampling distribution,
/// enumerated over every completion of the given horizon. This is the
/// quantity the sampled per-step loss estimates with K draws, so it
/// measures an edit's equilibrium loss without sampling noise.
#[allow(clippy::too_many_arguments)]
pub fn expected_combined_loss(
    cfg: &ModelConfig,
    live: &ParamSet,
    target: &ParamSet,
    context: Option<&[usize]>,
    q: &[usize],
    x_star: &[usize],
    horizon: usize,
    temperature: f64,
    lambda: f64,
) -> Result<f64, EditError> {
    let target_prefix = match context {
        Some(c) => model_input(&[c, q, x_star]),
        None => model_input(&[q, x_star]),
    };
    let live_prefix = model_input(&[q, x_star]);
    let lp_target = enum_log_probs_at(cfg, target, &target_prefix, horizon, temperature)?;
    let lp_live = enum_log_probs(cfg, live, &live_prefix, horizon)?;
    let expected_nll: f64 =
        lp_target.iter().zip(&lp_live).map(|(&lt, &ll)| math::exp(lt) * -ll).sum();
    Ok(ft_loss(cfg, live, q, x_star) + lambda * expected_nll)
}

/// Exact evaluation of the self-sampling fine-tuning objective
/// `KL( δ_{x*}(x_{1:m}) ⊗ p(x_c | [q, x*]) || p(x | q) )` by full
/// enumeration of the completion space. Collapses to `-log p(x* | q)`
/// analytically; evaluating the sum the long way is the point.
pub fn ft_sampling_loss_exact(
    cfg: &ModelConfig,
    params: &ParamSet,
    q: &[usize],
    x_star: &[usize],
    horizon: usize,
) -> Result<f64, EditError> {
    let target_prefix = model_input(&[q, x_star]);
    let w = enum_log_probs(cfg, params, &target_prefix, horizon)?;
    let bos_q = model_input(&[q]);
    let seqs = all_seqs(cfg.vocab_size, horizon);
    let mut total = 0.0;
    for (i, xc) in seqs.iter().enumerate() {
        let weight = math::exp(w[i]);
        if weight == 0.0 {
            continue;
        }
        // Model side: the whole combined sequence [x*, x_c] given q,
        // scored in one independent forward pass.
        let mut combined = x_star.to_vec();
        combined.extend_from_slice(xc);
        let lp_model = sequence_log_prob(cfg, params, &bos_q, &combined);
        total += weight * (w[i] - lp_model);
    }
    Ok(total)
}

/// Exact combined-sequence objective with a separate target model:
/// `KL( δ_{x*} ⊗ p_target(x_c | [c?, q, x*]) || p_live(x | q) )`,
/// enumerated over all completions of the given horizon.
pub fn combined_kl_exact(
    cfg: &ModelConfig,
    target_params: &ParamSet,
    live_params: &ParamSet,
    context: Option<&[usize]>,
    q: &[usize],
    x_star: &[usize],
    horizon: usize,
) -> Result<f64, EditError> {
    let target_prefix = match context {
        Some(c) => model_input(&[c, q, x_star]),
        None => model_input(&[q, x_star]),
    };
    let w = enum_log_probs(cfg, target_params, &target_prefix, horizon)?;
    let bos_q = model_input(&[q]);
    let seqs = all_seqs(cfg.vocab_size, horizon);
    let mut total = 0.0;
    for (i, xc) in seqs.iter().enumerate() {
        let weight = math::exp(w[i]);
        if weight == 0.0 {
            continue;
        }
        let mut combined = x_star.to_vec();
        combined.extend_from_slice(xc);
        let lp_live = sequence_log_prob(cfg, live_params, &bos_q, &combined);
        total += weight * (w[i] - lp_live);
    }
    Ok(total)
}

/// Exact completion-space KL between the target and live models:
/// `KL( p_target(x_c | [c?, q, x*]) || p_live(x_c | [q, x*]) )`.
pub fn completion_kl_exact(
    cfg: &ModelConfig,
    target_params: &ParamSet,
    live_params: &ParamSet,
    context: Option<&[usize]>,
    q: &[usize],
    x_star: &[usize],
    horizon: usize,
) -> Result<f64, EditError> {
    let target_prefix = match context {
        Some(c) => model_input(&[c, q, x_star]),
        None => model_input(&[q, x_star]),
    };
    let w = enum_log_probs(cfg, target_params, &target_prefix, horizon)?;
    let live_prefix = model_input(&[q, x_star]);
    let seqs = all_seqs(cfg.vocab_size, horizon);
    let mut total = 0.0;
    for (i, xc) in seqs.iter().enumerate() {
        let weight = math::exp(w[i]);
        if weight == 0.0 {
            continue;
        }
        let lp_live = sequence_log_prob(cfg, live_params, &live_prefix, xc);
        total += weight * (w[i] - lp_live);
    }
    Ok(total)
}

/// Exact consistency gap `KL( p(x | [c, q]) || p(x | q) )` over all
/// length-`probe_len` continuations. Errors when the enumeration would
/// exceed [`ENUM_LIMIT`] sequences — use [`consistency_gap_mc`] then.
pub fn consistency_gap(
    cfg: &ModelConfig,
    params: &ParamSet,
    context: &[usize],
    q: &[usize],
    probe_len: usize,
) -> Result<f64, EditError> {
    let with_ctx = model_input(&[context, q]);
    let plain = model_input(&[q]);
    let w = enum_log_probs(cfg, params, &with_ctx, probe_len)?;
    let m = enum_log_probs(cfg, params, &plain, probe_len)?;
    let mut total = 0.0;
    for i in 0..w.len() {
        let weight = math::exp(w[i]);
        if weight > 0.0 {
            total += weight * (w[i] - m[i]);
        }
    }
    Ok(total)
}

/// Monte Carlo consistency gap for spaces too large to enumerate:
/// samples `x ~ p(x | [c, q])` and averages the log-ratio. Returns the
/// estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

pub fn consistency_gap_mc(
    cfg: &ModelConfig,
    params: &ParamSet,
    context: &[usize],
    q: &[usize],
    probe_len: usize,
    n_samples: usize,
    rng: &mut impl rand_core::RngCore,
) -> GapEstimate {
    assert!(n_samples >= 2, "need at least two samples for a standard error");
    let with_ctx = model_input(&[context, q]);
    let plain = model_input(&[q]);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let x = sample_completion(cfg, params, &with_ctx, probe_len, 1.0, rng);
        let lp_ctx = sequence_log_prob(cfg, params, &with_ctx, &x);
        let lp_plain = sequence_log_prob(cfg, params, &plain, &x);
        let r = lp_ctx - lp_plain;
        sum += r;
        sumsq += r * r;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    GapEstimate { mean, std_err: math::sqrt(var / n), samples: n_samples }
}

// ── The edit loop ───────────────────────────────────────────────────────

/// Run one edit in place on `params`.
///
/// Each step: pick the round-robin context (context variants), sample
/// `K` completions of length `sample_len` from the detached target
/// model — the live weights for dynamic variants, the frozen pre-edit
/// weights for static ones — then backpropagate the combined loss,
/// clip the gradient elementwise to ±`grad_clip`, take a gradient
/// step of size `eta` on the editable parameters, and (for clamping
/// variants) project back onto the ±`weight_clamp` ball around the
/// pre-edit weights. Stops early once the editing loss falls below
/// `ft_stop`, or when the relative combined-loss improvement stays
/// below `convergence_tol` for `convergence_patience` consecutive
/// steps.
///
/// Sampling uses a per-step stream of the seeded generator, so a rerun
/// with the same seed reproduces the trace bit for bit, and static and
/// dynamic variants draw identical samples at step 0 (where their
/// targets coincide).
pub fn ice_edit(
    cfg: &ModelConfig,
    params: &mut ParamSet,
    task: &EditTask,
    ecfg: &EditConfig,
    seed: u64,
) -> Result<EditOutcome, EditError> {
    ice_edit_anchored(cfg, params, task, ecfg, seed, None)
}

/// [`ice_edit`] with an explicit clamp anchor. Sequential suites pass
/// the original pretrained weights so the evolving model stays inside
/// one ball around the deployed base instead of drifting one ball
/// radius per edit; `None` anchors at the weights the edit starts
/// from, which is the single-edit behavior.
pub fn ice_edit_anchored(
    cfg: &ModelConfig,
    params: &mut ParamSet,
    task: &EditTask,
    ecfg: &EditConfig,
    seed: u64,
    anchor: Option<&ParamSet>,
) -> Result<EditOutcome, EditError> {
    ecfg.validate()?;
    cfg.validate().map_err(|e| EditError::BadConfig(format!("{e}")))?;
    if task.query.is_empty() || task.target.is_empty() {
        return Err(EditError::BadConfig("edit task needs a nonempty query and target".to_string()));
    }
    if ecfg.variant.uses_context() && task.contexts.is_empty() {
        return Err(EditError::BadConfig(format!(
            "variant {} conditions on context but the record has none",
            ecfg.variant.name()
        )));
    }
    // Window check for the longest sampling prefix used by this edit.
    if ecfg.variant.uses_sampling() {
        let ctx_max = if ecfg.variant.uses_context() {
            task.contexts.iter().map(|c| c.len()).max().unwrap_or(0)
        } else {
            0
        };
        let need = 1 + ctx_max + task.query.len() + task.target.len() + ecfg.sample_len;
        if need > cfg.context_window {
            return Err(EditError::BadConfig(format!(
                "sampling needs {need} tokens but the context window is {}",
                cfg.context_window
            )));
        }
    }

    let editable = cfg.editable_set();
    for name in &editable {
        if !params.contains(name) {
            return Err(EditError::BadConfig(format!("editable parameter {name:?} not found")));
        }
    }
    let origin = anchor.unwrap_or(params).snapshot();
    let frozen = if ecfg.variant.uses_sampling() && !ecfg.variant.dynamic_target() {
        Some(params.clone())
    } else {
        None
    };

    let mut trace = Vec::with_capacity(ecfg.max_steps);
    let mut stalled = 0usize;
    let mut converged = false;
    let mut prev_combined: Option<f64> = None;

    for step in 0..ecfg.max_steps {
        let completions = if ecfg.variant.uses_sampling() {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(step as u64 + 1);
            let context = if ecfg.variant.uses_context() {
                Some(task.contexts[step % task.contexts.len()].as_slice())
            } else {
                None
            };
            let target_params: &ParamSet = match &frozen {
                Some(f) => f,
                None => params,
            };
            sample_step_completions(
                cfg,
                target_params,
                context,
                &task.query,
                &task.target,
                ecfg.samples,
                ecfg.sample_len,
                ecfg.temperature,
                &mut rng,
            )
        } else {
            Vec::new()
        };

        let (g, b, loss, ft_value, cons_value) = combined_step_loss_graph(
            cfg,
            params,
            &editable,
            &task.query,
            &task.target,
            &completions,
            ecfg.lambda,
        );
        let mut g = g;
        let combined = g.scalar_value(loss);
        if !combined.is_finite() {
            return Err(EditError::NonFiniteLoss { step });
        }

        params.zero_grads();
        let pass = g.backward(loss);
        write_grads(&g, &pass, &b, params);
        clip_gradients(params, ecfg.grad_clip);
        let grad_inf_norm = params.grad_inf_norm(Some(&editable));
        if !grad_inf_norm.is_finite() {
            return Err(EditError::NonFiniteLoss { step });
        }
        params.sgd_step(ecfg.eta, &editable);
        if ecfg.variant.clamps() {
            params.clamp_to_ball(&origin, ecfg.weight_clamp, &editable);
        }
        let delta_inf_norm = params.delta_inf_norm(&origin);

        trace.push(StepTrace {
            step,
            ft_loss: ft_value,
            consistency_loss: cons_value,
            combined_loss: combined,
            grad_inf_norm,
            delta_inf_norm,
        });

        // Convergence: the editing loss has become small, or the
        // combined loss has stopped improving.
        if ecfg.ft_stop > 0.0
            && ft_loss(cfg, params, &task.query, &task.target) < ecfg.ft_stop
        {
            converged = true;
        }
        if let Some(prev) = prev_combined {
            let rel = (prev - combined) / prev.abs().max(1e-12);
            if rel < ecfg.convergence_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
            if stalled >= ecfg.convergence_patience {
                converged = true;
            }
        }
        prev_combined = Some(combined);
        if converged {
            break;
        }
    }
    params.zero_grads();
    let steps_run = trace.len();
    Ok(EditOutcome { converged, steps_run, trace })
}

/// `p(x* | q)` under the model — the quantity an edit drives toward 1.
pub fn target_probability(cfg: &ModelConfig, params: &ParamSet, q: &[usize], x_star: &[usize]) -> f64 {
    math::exp(sequence_log_prob(cfg, params, &model_input(&[q]), x_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Architecture};
    use crate::params::finite_difference_gradient;

    fn bigram_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            context_window: 16,
            architecture: Architecture::BigramTable,
            embed_dim: 4,
            head_count: 1,
            editable_param_names: Vec::new(),
            seed,
        }
    }

    fn random_bigram(seed: u64) -> (ModelConfig, ParamSet) {
        let cfg = bigram_cfg(seed);
        let mut params = init_params(&cfg);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0xabcdef);
        let t = params.get_mut("table");
        for x in t.data.iter_mut() {
            *x = 1.5 * math::normal_f64(&mut rng);
        }
        (cfg, params)
    }

    #[test]
    fn observation_one_self_sampling_collapses_to_ft() {
        for seed in 0..6 {
            let (cfg, params) = random_bigram(seed);
            let q = vec![2usize, 3];
            let x_star = vec![4usize];
            let ft = ft_loss(&cfg, &params, &q, &x_star);
            for horizon in 1..=3 {
                let exact = ft_sampling_loss_exact(&cfg, &params, &q, &x_star, horizon).unwrap();
                assert!(
                    (exact - ft).abs() < 1e-8,
                    "seed {seed} horizon {horizon}: {exact} vs {ft}"
                );
            }
        }
    }

    #[test]
    fn combined_objective_splits_into_ft_plus_completion_kl() {
        for seed in 0..6 {
            let (cfg, live) = random_bigram(seed);
            let (_, target) = random_bigram(seed + 100);
            let q = vec![3usize];
            let x_star = vec![2usize, 5];
            let c = vec![4usize, 2];
            for horizon in 1..=2 {
                let combined =
                    combined_kl_exact(&cfg, &target, &live, Some(&c), &q, &x_star, horizon).unwrap();
                let ft = ft_loss(&cfg, &live, &q, &x_star);
                let comp =
                    completion_kl_exact(&cfg, &target, &live, Some(&c), &q, &x_star, horizon)
                        .unwrap();
                assert!(
                    (combined - (ft + comp)).abs() < 1e-8,
                    "seed {seed} horizon {horizon}: {combined} vs {} + {comp}",
                    ft
                );
            }
        }
    }

    #[test]
    fn one_hot_expectation_reduces_to_point_evaluation() {
        // Lemma: sum_x δ_y(x) f(x) = f(y), with f an arbitrary table.
        let vocab = 5usize;
        let len = 3usize;
        let seqs = all_seqs(vocab, len);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let f: Vec<f64> = (0..seqs.len()).map(|_| math::normal_f64(&mut rng)).collect();
        let y = vec![4usize, 0, 3];
        let mut expectation = 0.0;
        for (i, s) in seqs.iter().enumerate() {
            let indicator = if *s == y { 1.0 } else { 0.0 };
            expectation += indicator * f[i];
        }
        let iy = seqs.iter().position(|s| *s == y).unwrap();
        assert_eq!(expectation, f[iy]);
    }

    #[test]
    fn consistency_gap_is_zero_for_context_blind_models() {
        // A bigram model conditions only on the last token, and the
        // query ends identically with or without context, so the gap
        // must vanish.
        let (cfg, params) = random_bigram(3);
        let gap = consistency_gap(&cfg, &params, &[2, 4], &[3, 5], 2).unwrap();
        assert!(gap.abs() < 1e-12, "gap {gap}");
    }

    #[test]
    fn consistency_gap_guard_rejects_huge_enumerations() {
        let (cfg, params) = random_bigram(1);
        assert!(matches!(
            consistency_gap(&cfg, &params, &[2], &[3], 8),
            Err(EditError::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn mc_gap_agrees_with_exact_on_enumerable_case() {
        let cfg = ModelConfig {
            vocab_size: 6,
            context_window: 20,
            architecture: Architecture::Mlp,
            embed_dim: 6,
            head_count: 1,
            editable_param_names: Vec::new(),
            seed: 9,
        };
        let params = init_params(&cfg);
        let c = vec![2usize, 3];
        let q = vec![4usize];
        let exact = consistency_gap(&cfg, &params, &c, &q, 2).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let est = consistency_gap_mc(&cfg, &params, &c, &q, 2, 2000, &mut rng);
        assert!(
            (est.mean - exact).abs() < 4.0 * est.std_err + 1e-3,
            "exact {exact} vs mc {} ± {}",
            est.mean,
            est.std_err
        );
    }

    #[test]
    fn combined_loss_value_gradient_matches_finite_differences() {
        let (cfg, params) = random_bigram(12);
        let q = vec![2usize];
        let x_star = vec![3usize];
        let completions = vec![vec![1usize, 4], vec![5usize, 5]];
        let editable: BTreeSet<String> = params.names().map(String::from).collect();
        let (g, b, loss, _, _) =
            combined_step_loss_graph(&cfg, &params, &editable, &q, &x_star, &completions, 1.0);
        let mut g = g;
        let pass = g.backward(loss);
        let mut auto = params.clone();
        auto.zero_grads();
        write_grads(&g, &pass, &b, &mut auto);
        let fd = finite_difference_gradient(&params, 1e-4, |p| {
            combined_step_loss_value(&cfg, p, &q, &x_star, &completions, 1.0)
        });
        let table = auto.get("table").grad.clone().unwrap();
        for (i, (&a, &f)) in table.iter().zip(&fd["table"]).enumerate() {
            let denom = f.abs().max(1e-6);
            assert!(
                ((a - f) / denom).abs() < 1e-4,
                "entry {i}: autodiff {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn combined_loss_at_unit_lambda_is_mean_combined_sequence_nll() {
        let (cfg, params) = random_bigram(8);
        let q = vec![5usize];
        let x_star = vec![2usize];
        let completions = vec![vec![0usize, 3], vec![4usize, 1]];
        let v = combined_step_loss_value(&cfg, &params, &q, &x_star, &completions, 1.0);
        let mut direct = 0.0;
        for xc in &completions {
            let mut full = x_star.clone();
            full.extend_from_slice(xc);
            direct -= sequence_log_prob(&cfg, &params, &[BOS, 5], &full);
        }
        direct /= completions.len() as f64;
        assert!((v - direct).abs() < 1e-12, "{v} vs {direct}");
    }

    #[test]
    fn edit_loop_raises_target_probability_and_traces_steps() {
        let (cfg, mut params) = random_bigram(21);
        let task = EditTask {
            query: vec![2],
            target: vec![4],
            contexts: vec![vec![3, 4], vec![5, 4]],
        };
        let ecfg = EditConfig {
            eta: 0.5,
            grad_clip: 5.0,
            weight_clamp: 10.0,
            max_steps: 40,
            sample_len: 2,
            temperature: 1.0,
            ..EditConfig::default()
        };
        let before = target_probability(&cfg, &params, &task.query, &task.target);
        let outcome = ice_edit(&cfg, &mut params, &task, &ecfg, 7).unwrap();
        let after = target_probability(&cfg, &params, &task.query, &task.target);
        assert!(after > before.max(0.9), "p(x*|q) {before} -> {after}");
        assert_eq!(outcome.steps_run, outcome.trace.len());
        for (i, t) in outcome.trace.iter().enumerate() {
            assert_eq!(t.step, i);
            assert!(t.combined_loss.is_finite());
            assert!(t.grad_inf_norm <= ecfg.grad_clip + 1e-12);
        }
    }

    #[test]
    fn edits_are_reproducible_per_seed() {
        let (cfg, params0) = random_bigram(30);
        let task =
            EditTask { query: vec![3], target: vec![5], contexts: vec![vec![2, 5]] };
        let ecfg = EditConfig { eta: 0.3, weight_clamp: 1.0, ..EditConfig::default() };
        let mut p1 = params0.clone();
        let o1 = ice_edit(&cfg, &mut p1, &task, &ecfg, 99).unwrap();
        let mut p2 = params0.clone();
        let o2 = ice_edit(&cfg, &mut p2, &task, &ecfg, 99).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(p1.snapshot(), p2.snapshot());
        let mut p3 = params0.clone();
        let o3 = ice_edit(&cfg, &mut p3, &task, &ecfg, 100).unwrap();
        assert!(o3 != o1, "different seeds should sample differently");
    }

    #[test]
    fn static_and_dynamic_targets_coincide_at_step_zero() {
        let (cfg, params0) = random_bigram(14);
        let task =
            EditTask { query: vec![2], target: vec![3], contexts: vec![vec![4, 3]] };
        let base = EditConfig {
            eta: 0.2,
            max_steps: 1,
            weight_clamp: 1.0,
            temperature: 2.0,
            ..EditConfig::default()
        };
        let mut pd = params0.clone();
        let od = ice_edit(
            &cfg,
            &mut pd,
            &task,
            &EditConfig { variant: Variant::IceDynamic, ..base.clone() },
            5,
        )
        .unwrap();
        let mut ps = params0.clone();
        let os = ice_edit(
            &cfg,
            &mut ps,
            &task,
            &EditConfig { variant: Variant::IceStatic, ..base },
            5,
        )
        .unwrap();
        assert_eq!(od.trace[0], os.trace[0]);
        assert_eq!(pd.snapshot(), ps.snapshot());
    }

    #[test]
    fn clamped_variants_stay_inside_the_ball_every_step() {
        let (cfg, mut params) = random_bigram(44);
        let task =
            EditTask { query: vec![4], target: vec![2], contexts: vec![vec![3, 2]] };
        let ecfg = EditConfig {
            eta: 0.9,
            grad_clip: 50.0,
            weight_clamp: 5e-4,
            max_steps: 10,
            variant: Variant::FtClamped,
            ..EditConfig::default()
        };
        let outcome = ice_edit(&cfg, &mut params, &task, &ecfg, 3).unwrap();
        for t in &outcome.trace {
            assert!(t.delta_inf_norm <= 5e-4 + 1e-12, "step {} delta {}", t.step, t.delta_inf_norm);
        }
    }

    #[test]
    fn context_variant_requires_context() {
        let (cfg, mut params) = random_bigram(2);
        let task = EditTask { query: vec![2], target: vec![3], contexts: vec![] };
        let err = ice_edit(&cfg, &mut params, &task, &EditConfig::default(), 1).unwrap_err();
        assert!(matches!(err, EditError::BadConfig(_)));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut e = EditConfig::default();
        e.lambda = -1.0;
        assert!(e.validate().is_err());
        let mut e = EditConfig::default();
        e.temperature = 0.0;
        assert!(e.validate().is_err());
        let mut e = EditConfig::default();
        e.samples = 0;
        assert!(e.validate().is_err());
        let mut e = EditConfig::default();
        e.variant = Variant::Ft;
        e.samples = 0;
        assert!(e.validate().is_ok(), "non-sampling variants ignore sample counts");
    }
}
