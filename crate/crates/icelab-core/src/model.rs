//! Toy autoregressive language models over a shared forward interface.
//!
//! Three architectures cover the scales the editing experiments need:
//!
//! * `bigram_table` — a `[vocab, vocab]` logit table; next-token
//!   distribution depends only on the current token. Initialized to
//!   zeros, i.e. uniform rows. Small enough for exact enumeration.
//! * `mlp` — embeddings of the last [`MLP_WINDOW`] tokens (begin-padded)
//!   concatenated into a tanh MLP.
//! * `transformer_1block` — token + position embeddings, one pre-norm
//!   causal multi-head attention block, a tanh feed-forward block, and
//!   a final layer-norm projection to logits.
//!
//! All forwards run on the autodiff tape, so there is exactly one
//! implementation of the math for training, sampling, and evaluation.
//! A sequence of length `L` produces an `[L, vocab]` logit matrix whose
//! row `t` is the distribution for the token *after* position `t`.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::graph::{BackwardPass, Graph, NodeId};
use crate::math;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Window length of the MLP architecture.
pub const MLP_WINDOW: usize = 3;

/// Feed-forward hidden width as a multiple of the embedding dimension
/// (both for the MLP body and the transformer feed-forward block).
pub const FFW_MULT: usize = 4;

/// Fixed gain applied to transformer output logits. At desk scale the
/// parameter counts are tiny, so without a gain the small per-weight
/// updates the editing recipes prescribe could never move a logit gap
/// by the several nats an argmax flip needs; the gain enters both the
/// gradient and the sensitivity, restoring the leverage that sheer
/// parameter count provides at full scale.
pub const LOGIT_SCALE: f64 = 12.0;

/// Sampling temperatures below this threshold short-circuit to argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "bigram_table")]
    BigramTable,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "transformer_1block")]
    Transformer1Block,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::BigramTable => "bigram_table",
            Architecture::Mlp => "mlp",
            Architecture::Transformer1Block => "transformer_1block",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bigram_table" => Some(Architecture::BigramTable),
            "mlp" => Some(Architecture::Mlp),
            "transformer_1block" => Some(Architecture::Transformer1Block),
            _ => None,
        }
    }

    fn logit_scale(&self) -> f64 {
        match self {
            Architecture::Transformer1Block => LOGIT_SCALE,
            _ => 1.0,
        }
    }
}

/// Static description of a model: everything needed to rebuild its
/// parameter shapes and forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub head_count: usize,
    /// Parameters the edit loop is allowed to move. Empty means "use
    /// the architecture default" (see [`ModelConfig::editable_set`]).
    #[serde(default)]
    pub editable_param_names: Vec<String>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

/// Errors surfaced by model construction and training.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    BadConfig(String),
    /// Training loss left the finite range at the given step.
    NonFiniteLoss { step: usize },
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::NonFiniteLoss { step } => {
                write!(f, "training loss became non-finite at step {step}")
            }
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::BadConfig(msg));
        if self.vocab_size < 3 {
            return err(format!(
                "vocab_size {} leaves no room for words beyond the reserved tokens",
                self.vocab_size
            ));
        }
        if self.context_window < 2 {
            return err(format!("context_window {} is too short", self.context_window));
        }
        if self.embed_dim == 0 {
            return err("embed_dim must be positive".to_string());
        }
        if self.architecture == Architecture::Transformer1Block {
            if self.head_count == 0 {
                return err("head_count must be positive".to_string());
            }
            if self.embed_dim % self.head_count != 0 {
                return err(format!(
                    "embed_dim {} is not divisible by head_count {}",
                    self.embed_dim, self.head_count
                ));
            }
        }
        let known = param_shapes(self);
        for name in &self.editable_param_names {
            if !known.contains_key(name.as_str()) {
                return err(format!(
                    "editable parameter {name:?} does not exist in {}",
                    self.architecture.name()
                ));
            }
        }
        Ok(())
    }

    /// The parameters the edit loop moves: the explicit list when one
    /// was given, else the architecture default. The default is the
    /// late, knowledge-bearing band of the network — the feed-forward
    /// block plus the output projection — rather than the whole model.
    /// The output projection matters at this scale: with layer
    /// normalization in the path, logit sensitivity to the feed-forward
    /// weights is O(1) no matter how the output gain is set, and small
    /// learning rates would stall there; sensitivity to the projection
    /// itself scales with the output gain.
    pub fn editable_set(&self) -> BTreeSet<String> {
        if !self.editable_param_names.is_empty() {
            return self.editable_param_names.iter().cloned().collect();
        }
        let default: &[&str] = match self.architecture {
            Architecture::BigramTable => &["table"],
            Architecture::Mlp => &["ffw_b1", "ffw_b2", "ffw_w1", "ffw_w2"],
            Architecture::Transformer1Block => {
                &["ffw_b1", "ffw_b2", "ffw_w1", "ffw_w2", "out_proj"]
            }
        };
        default.iter().map(|s| s.to_string()).collect()
    }
}

/// Shapes of every parameter of a model, in name order.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<&'static str, [usize; 2]> {
    let v = cfg.vocab_size;
    let d = cfg.embed_dim;
    let h = FFW_MULT * d;
    let mut m = BTreeMap::new();
    match cfg.architecture {
        Architecture::BigramTable => {
            m.insert("table", [v, v]);
        }
        Architecture::Mlp => {
            m.insert("embed", [v, d]);
            m.insert("ffw_w1", [MLP_WINDOW * d, h]);
            m.insert("ffw_b1", [1, h]);
            m.insert("ffw_w2", [h, v]);
            m.insert("ffw_b2", [1, v]);
        }
        Architecture::Transformer1Block => {
            m.insert("tok_embed", [v, d]);
            m.insert("pos_embed", [cfg.context_window, d]);
            m.insert("attn_wq", [d, d]);
            m.insert("attn_wk", [d, d]);
            m.insert("attn_wv", [d, d]);
            m.insert("attn_wo", [d, d]);
            m.insert("ln1_gain", [1, d]);
            m.insert("ln1_bias", [1, d]);
            m.insert("ln2_gain", [1, d]);
            m.insert("ln2_bias", [1, d]);
            m.insert("lnf_gain", [1, d]);
            m.insert("lnf_bias", [1, d]);
            m.insert("ffw_w1", [d, h]);
            m.insert("ffw_b1", [1, h]);
            m.insert("ffw_w2", [h, d]);
            m.insert("ffw_b2", [1, d]);
            m.insert("out_proj", [d, v]);
        }
    }
    m
}

/// Initialize a parameter set for the given config. Deterministic in
/// `cfg.seed`. The bigram table starts at zero (uniform rows); matrix
/// weights elsewhere draw from centered normals scaled by fan-in.
pub fn init_params(cfg: &ModelConfig) -> ParamSet {
    cfg.validate().expect("init_params on invalid config");
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let d = cfg.embed_dim as f64;
    let mut params = ParamSet::new();
    let push = |params: &mut ParamSet, name: &str, shape: [usize; 2], sigma: f64, rng: &mut rand_chacha::ChaCha12Rng| {
        let data: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| if sigma == 0.0 { 0.0 } else { sigma * math::normal_f64(rng) })
            .collect();
        params.insert(name, Tensor::new(shape, data).with_grad());
    };
    let shapes = param_shapes(cfg);
    match cfg.architecture {
        Architecture::BigramTable => {
            push(&mut params, "table", shapes["table"], 0.0, &mut rng);
        }
        Architecture::Mlp => {
            push(&mut params, "embed", shapes["embed"], 0.1, &mut rng);
            push(&mut params, "ffw_w1", shapes["ffw_w1"], 1.0 / math::sqrt(MLP_WINDOW as f64 * d), &mut rng);
            push(&mut params, "ffw_b1", shapes["ffw_b1"], 0.0, &mut rng);
            push(&mut params, "ffw_w2", shapes["ffw_w2"], 1.0 / math::sqrt(FFW_MULT as f64 * d), &mut rng);
            push(&mut params, "ffw_b2", shapes["ffw_b2"], 0.0, &mut rng);
        }
        Architecture::Transformer1Block => {
            let s_attn = 1.0 / math::sqrt(d);
            push(&mut params, "tok_embed", shapes["tok_embed"], 0.1, &mut rng);
            push(&mut params, "pos_embed", shapes["pos_embed"], 0.05, &mut rng);
            push(&mut params, "attn_wq", shapes["attn_wq"], s_attn, &mut rng);
            push(&mut params, "attn_wk", shapes["attn_wk"], s_attn, &mut rng);
            push(&mut params, "attn_wv", shapes["attn_wv"], s_attn, &mut rng);
            push(&mut params, "attn_wo", shapes["attn_wo"], s_attn, &mut rng);
            for (gain, bias) in [("ln1_gain", "ln1_bias"), ("ln2_gain", "ln2_bias"), ("lnf_gain", "lnf_bias")] {
                params.insert(gain, Tensor::new([1, cfg.embed_dim], vec![1.0; cfg.embed_dim]).with_grad());
                push(&mut params, bias, [1, cfg.embed_dim], 0.0, &mut rng);
            }
            push(&mut params, "ffw_w1", shapes["ffw_w1"], s_attn, &mut rng);
            push(&mut params, "ffw_b1", shapes["ffw_b1"], 0.0, &mut rng);
            push(&mut params, "ffw_w2", shapes["ffw_w2"], 1.0 / math::sqrt(FFW_MULT as f64 * d), &mut rng);
            push(&mut params, "ffw_b2", shapes["ffw_b2"], 0.0, &mut rng);
            push(&mut params, "out_proj", shapes["out_proj"], 1.0 / (LOGIT_SCALE * math::sqrt(d)), &mut rng);
        }
    }
    params
}

/// Tape leaves for a parameter set, by name.
pub struct ParamBindings {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBindings {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

/// Register every parameter as a tape leaf. `editable` narrows which
/// leaves are differentiable; `None` makes all of them differentiable
/// (pretraining), `Some(set)` restricts gradients to the set (editing).
pub fn bind_params(g: &mut Graph, params: &ParamSet, editable: Option<&BTreeSet<String>>) -> ParamBindings {
    let mut ids = BTreeMap::new();
    for (name, t) in params.iter() {
        let rg = match editable {
            None => t.requires_grad,
            Some(set) => t.requires_grad && set.contains(name),
        };
        let id = g.leaf(t.shape, t.data.clone(), rg);
        ids.insert(name.to_string(), id);
    }
    ParamBindings { ids }
}

/// Bind with no differentiable leaves at all — cheapest option for
/// pure evaluation forwards (sampling, decoding, metrics).
pub fn bind_params_frozen(g: &mut Graph, params: &ParamSet) -> ParamBindings {
    let empty = BTreeSet::new();
    bind_params(g, params, Some(&empty))
}

/// Copy the gradients of a backward pass into the parameter set
/// (accumulating), for the leaves that were differentiable.
pub fn write_grads(g: &Graph, pass: &BackwardPass, binds: &ParamBindings, params: &mut ParamSet) {
    for (name, &id) in &binds.ids {
        if g.needs_grad(id) {
            if let Some(grad) = pass.grad_ref(id) {
                let grad = grad.to_vec();
                params.get_mut(name).accumulate_grad(&grad);
            }
        }
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) {
    assert!(!tokens.is_empty(), "model forward on an empty sequence");
    assert!(
        tokens.len() <= cfg.context_window,
        "sequence length {} exceeds context window {}",
        tokens.len(),
        cfg.context_window
    );
    for &t in tokens {
        assert!(t < cfg.vocab_size, "token {t} out of range for vocab {}", cfg.vocab_size);
    }
}

/// Forward pass: logits `[len(tokens), vocab]`, row `t` scoring the
/// token that follows position `t`.
pub fn forward_logits(g: &mut Graph, b: &ParamBindings, cfg: &ModelConfig, tokens: &[usize]) -> NodeId {
    check_tokens(cfg, tokens);
    let raw = match cfg.architecture {
        Architecture::BigramTable => g.embed_rows(b.id("table"), tokens),
        Architecture::Mlp => mlp_logits(g, b, tokens),
        Architecture::Transformer1Block => transformer_logits(g, b, cfg, tokens),
    };
    let scale = cfg.architecture.logit_scale();
    if scale == 1.0 {
        raw
    } else {
        g.scale(raw, scale)
    }
}

fn mlp_logits(g: &mut Graph, b: &ParamBindings, tokens: &[usize]) -> NodeId {
    // Window of the last MLP_WINDOW tokens, begin-padded with the first
    // token of the sequence (position 0 is always the begin marker in
    // harness-constructed inputs).
    let pad = tokens[0];
    let mut parts = Vec::with_capacity(MLP_WINDOW);
    for offset in (0..MLP_WINDOW).rev() {
        let idx: Vec<usize> =
            (0..tokens.len()).map(|t| if t >= offset { tokens[t - offset] } else { pad }).collect();
        parts.push(g.embed_rows(b.id("embed"), &idx));
    }
    let x = g.concat_cols(&parts);
    let h = g.matmul(x, b.id("ffw_w1"));
    let h = g.add_row(h, b.id("ffw_b1"));
    let h = g.tanh(h);
    let o = g.matmul(h, b.id("ffw_w2"));
    g.add_row(o, b.id("ffw_b2"))
}

fn transformer_logits(g: &mut Graph, b: &ParamBindings, cfg: &ModelConfig, tokens: &[usize]) -> NodeId {
    let len = tokens.len();
    let d = cfg.embed_dim;
    let heads = cfg.head_count;
    let dh = d / heads;

    let tok = g.embed_rows(b.id("tok_embed"), tokens);
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.embed_rows(b.id("pos_embed"), &positions);
    let x = g.add(tok, pos);

    // Pre-norm attention block.
    let a_in = affine_layer_norm(g, b, x, "ln1");
    let q = g.matmul(a_in, b.id("attn_wq"));
    let k = g.matmul(a_in, b.id("attn_wk"));
    let v = g.matmul(a_in, b.id("attn_wv"));

    let mask = causal_mask(g, len);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / math::sqrt(dh as f64));
        let scores = g.add(scores, mask);
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&head_outs);
    let attn_out = g.matmul(merged, b.id("attn_wo"));
    let x = g.add(x, attn_out);

    // Pre-norm feed-forward block.
    let f_in = affine_layer_norm(g, b, x, "ln2");
    let h1 = g.matmul(f_in, b.id("ffw_w1"));
    let h1 = g.add_row(h1, b.id("ffw_b1"));
    let h1 = g.tanh(h1);
    let h2 = g.matmul(h1, b.id("ffw_w2"));
    let h2 = g.add_row(h2, b.id("ffw_b2"));
    let x = g.add(x, h2);

    let o = affine_layer_norm(g, b, x, "lnf");
    g.matmul(o, b.id("out_proj"))
}

fn affine_layer_norm(g: &mut Graph, b: &ParamBindings, x: NodeId, prefix: &str) -> NodeId {
    let n = g.layer_norm_rows(x);
    let n = g.mul_row(n, b.id(&format!("{prefix}_gain")));
    g.add_row(n, b.id(&format!("{prefix}_bias")))
}

fn causal_mask(g: &mut Graph, len: usize) -> NodeId {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = -1e30;
        }
    }
    g.constant([len, len], m)
}

/// Differentiable log-probability of `full[cont_start..]` given
/// `full[..cont_start]`, as a `[1, 1]` node. `cont_start` must leave a
/// nonempty prefix and a nonempty continuation.
pub fn seq_log_prob_node(
    g: &mut Graph,
    b: &ParamBindings,
    cfg: &ModelConfig,
    full: &[usize],
    cont_start: usize,
) -> NodeId {
    assert!(cont_start >= 1, "continuation needs a nonempty prefix (prepend the begin token)");
    assert!(cont_start < full.len(), "empty continuation");
    let inputs = &full[..full.len() - 1];
    let logits = forward_logits(g, b, cfg, inputs);
    let logp = g.log_softmax_rows(logits);
    let next: Vec<usize> = full[1..].to_vec();
    let picked = g.pick_per_row(logp, &next);
    // Keep only the rows that score continuation tokens.
    let mask: Vec<f64> =
        (0..next.len()).map(|r| if r + 1 >= cont_start { 1.0 } else { 0.0 }).collect();
    let mask = g.constant([next.len(), 1], mask);
    let kept = g.mul(picked, mask);
    g.sum(kept)
}

/// Log-probabilities of the next token after `prefix`, computed without
/// building gradient structure.
pub fn next_token_log_probs(cfg: &ModelConfig, params: &ParamSet, prefix: &[usize]) -> Vec<f64> {
    let logits = next_token_logits(cfg, params, prefix);
    let lse = math::log_sum_exp(&logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Raw next-token logits after `prefix`.
pub fn next_token_logits(cfg: &ModelConfig, params: &ParamSet, prefix: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let b = bind_params_frozen(&mut g, params);
    let logits = forward_logits(&mut g, &b, cfg, prefix);
    let [rows, cols] = g.shape(logits);
    g.value(logits)[(rows - 1) * cols..].to_vec()
}

/// Log-probability of `cont` given `prefix` (no gradients).
pub fn sequence_log_prob(cfg: &ModelConfig, params: &ParamSet, prefix: &[usize], cont: &[usize]) -> f64 {
    assert!(!cont.is_empty(), "sequence_log_prob of an empty continuation");
    let mut full = prefix.to_vec();
    full.extend_from_slice(cont);
    let mut g = Graph::new();
    let b = bind_params_frozen(&mut g, params);
    let node = seq_log_prob_node(&mut g, &b, cfg, &full, prefix.len());
    g.scalar_value(node)
}

/// Sample `length` tokens autoregressively at the given temperature.
/// Temperatures below [`GREEDY_TEMPERATURE`] short-circuit to argmax
/// (ties break to the lowest index). Panics on non-positive temperature
/// or when the result would overflow the context window.
pub fn sample_completion(
    cfg: &ModelConfig,
    params: &ParamSet,
    prefix: &[usize],
    length: usize,
    temperature: f64,
    rng: &mut impl RngCore,
) -> Vec<usize> {
    assert!(temperature > 0.0, "sampling temperature must be positive, got {temperature}");
    assert!(
        prefix.len() + length <= cfg.context_window,
        "prefix {} + completion {} exceeds context window {}",
        prefix.len(),
        length,
        cfg.context_window
    );
    let mut seq = prefix.to_vec();
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let logits = next_token_logits(cfg, params, &seq);
        let tok = if temperature < GREEDY_TEMPERATURE {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
            let lse = math::log_sum_exp(&scaled);
            let u = math::uniform_f64(rng);
            let mut acc = 0.0;
            let mut chosen = scaled.len() - 1;
            for (i, &x) in scaled.iter().enumerate() {
                acc += math::exp(x - lse);
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        seq.push(tok);
        out.push(tok);
    }
    out
}

/// Greedy argmax decoding; stops before `max_len` if the end token is
/// produced (the end token is not included in the result) or when the
/// context window fills up. Ties break to the lowest token index.
pub fn greedy_decode(cfg: &ModelConfig, params: &ParamSet, prefix: &[usize], max_len: usize) -> Vec<usize> {
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    let room = cfg.context_window.saturating_sub(prefix.len());
    for _ in 0..max_len.min(room) {
        let logits = next_token_logits(cfg, params, &seq);
        let tok = argmax(&logits);
        if tok == EOS {
            break;
        }
        seq.push(tok);
        out.push(tok);
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Gradient-descent pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Training seed for batch shuffling (independent of init).
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 600, eta: 0.05, batch_size: 24, seed: 1 }
    }
}

/// Interval between corpus-NLL measurements during pretraining.
pub const PRETRAIN_LOG_EVERY: usize = 10;

/// Per-checkpoint record of the monitored corpus NLL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    /// `(step, mean corpus NLL per token)` every [`PRETRAIN_LOG_EVERY`]
    /// steps plus the initial and final values.
    pub nll: Vec<(usize, f64)>,
}

impl PretrainLog {
    pub fn initial_nll(&self) -> f64 {
        self.nll.first().expect("empty pretrain log").1
    }

    pub fn final_nll(&self) -> f64 {
        self.nll.last().expect("empty pretrain log").1
    }
}

/// Mean NLL per token of the model on a set of sequences (each sequence
/// scored from its second token on).
pub fn corpus_mean_nll(cfg: &ModelConfig, params: &ParamSet, sequences: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        assert!(seq.len() >= 2, "corpus sequence shorter than two tokens");
        total -= sequence_log_prob(cfg, params, &seq[..1], &seq[1..]);
        count += seq.len() - 1;
    }
    total / count as f64
}

/// Minibatch gradient-descent pretraining with cosine learning-rate
/// decay. The corpus NLL is measured every [`PRETRAIN_LOG_EVERY`] steps
/// on a fixed probe subset (the whole corpus when it is small); the
/// returned log carries those measurements. Non-finite losses abort.
pub fn pretrain(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    sequences: &[Vec<usize>],
    pcfg: &PretrainConfig,
) -> Result<PretrainLog, ModelError> {
    assert!(!sequences.is_empty(), "pretraining corpus is empty");
    assert!(pcfg.batch_size > 0, "batch_size must be positive");
    for seq in sequences {
        check_tokens(cfg, seq);
        assert!(seq.len() >= 2, "corpus sequence shorter than two tokens");
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(pcfg.seed);

    // Fixed probe subset for NLL monitoring.
    const PROBE_CAP: usize = 96;
    let probe: Vec<Vec<usize>> = if sequences.len() <= PROBE_CAP {
        sequences.to_vec()
    } else {
        let stride = sequences.len().div_ceil(PROBE_CAP);
        sequences.iter().step_by(stride).cloned().collect()
    };

    let mut log = PretrainLog { nll: vec![(0, corpus_mean_nll(cfg, params, &probe))] };
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle

    for step in 0..pcfg.steps {
        // Cosine decay from eta to eta / 10.
        let t = step as f64 / pcfg.steps.max(1) as f64;
        let eta = pcfg.eta * (0.55 + 0.45 * libm::cos(core::f64::consts::PI * t));

        let mut g = Graph::new();
        let b = bind_params(&mut g, params, None);
        let mut batch_nodes = Vec::with_capacity(pcfg.batch_size);
        let mut token_count = 0usize;
        for _ in 0..pcfg.batch_size.min(sequences.len()) {
            if cursor >= order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            let seq = &sequences[order[cursor]];
            cursor += 1;
            batch_nodes.push(seq_log_prob_node(&mut g, &b, cfg, seq, 1));
            token_count += seq.len() - 1;
        }
        let mut acc = batch_nodes[0];
        for &n in &batch_nodes[1..] {
            acc = g.add(acc, n);
        }
        let loss = g.scale(acc, -1.0 / token_count as f64);
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(ModelError::NonFiniteLoss { step });
        }
        params.zero_grads();
        let pass = g.backward(loss);
        write_grads(&g, &pass, &b, params);
        let all: BTreeSet<String> = params.names().map(String::from).collect();
        params.sgd_step(eta, &all);

        if (step + 1) % PRETRAIN_LOG_EVERY == 0 || step + 1 == pcfg.steps {
            let nll = corpus_mean_nll(cfg, params, &probe);
            if !nll.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            log.nll.push((step + 1, nll));
        }
    }
    params.zero_grads();
    Ok(log)
}

fn shuffle(xs: &mut [usize], rng: &mut impl RngCore) {
    for i in (1..xs.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(arch: Architecture) -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            context_window: 12,
            architecture: arch,
            embed_dim: 8,
            head_count: 2,
            editable_param_names: Vec::new(),
            seed: 5,
        }
    }

    fn all_archs() -> [Architecture; 3] {
        [Architecture::BigramTable, Architecture::Mlp, Architecture::Transformer1Block]
    }

    #[test]
    fn logits_rows_are_normalized_distributions() {
        for arch in all_archs() {
            let cfg = tiny_cfg(arch);
            let params = init_params(&cfg);
            let lp = next_token_log_probs(&cfg, &params, &[0, 2, 3]);
            let total: f64 = lp.iter().map(|&x| math::exp(x)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{arch:?} probs sum to {total}");
        }
    }

    #[test]
    fn zero_bigram_table_is_uniform() {
        let cfg = tiny_cfg(Architecture::BigramTable);
        let params = init_params(&cfg);
        let lp = next_token_log_probs(&cfg, &params, &[0]);
        for &x in &lp {
            assert!((x - math::ln(1.0 / 6.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_log_prob_is_sum_of_stepwise_terms() {
        for arch in all_archs() {
            let cfg = tiny_cfg(arch);
            let params = init_params(&cfg);
            let prefix = [0usize, 4];
            let cont = [2usize, 1, 3];
            let direct = sequence_log_prob(&cfg, &params, &prefix, &cont);
            let mut acc = 0.0;
            let mut run = prefix.to_vec();
            for &t in &cont {
                acc += next_token_log_probs(&cfg, &params, &run)[t];
                run.push(t);
            }
            assert!((direct - acc).abs() < 1e-10, "{arch:?}: {direct} vs {acc}");
        }
    }

    #[test]
    fn transformer_respects_causality() {
        // Changing a later token must not affect earlier rows.
        let cfg = tiny_cfg(Architecture::Transformer1Block);
        let params = init_params(&cfg);
        let mut g1 = Graph::new();
        let b1 = bind_params_frozen(&mut g1, &params);
        let l1 = forward_logits(&mut g1, &b1, &cfg, &[0, 2, 3, 4]);
        let mut g2 = Graph::new();
        let b2 = bind_params_frozen(&mut g2, &params);
        let l2 = forward_logits(&mut g2, &b2, &cfg, &[0, 2, 3, 5]);
        let v1 = g1.value(l1);
        let v2 = g2.value(l2);
        for r in 0..3 {
            for c in 0..cfg.vocab_size {
                assert_eq!(v1[r * cfg.vocab_size + c], v2[r * cfg.vocab_size + c], "row {r} changed");
            }
        }
        // The final row must differ (the changed token is visible there).
        let last: f64 = (0..cfg.vocab_size)
            .map(|c| (v1[3 * cfg.vocab_size + c] - v2[3 * cfg.vocab_size + c]).abs())
            .sum();
        assert!(last > 1e-9);
    }

    #[test]
    fn greedy_decode_breaks_ties_to_lowest_index() {
        let cfg = tiny_cfg(Architecture::BigramTable);
        let params = init_params(&cfg); // all-zero table: every row ties
        let out = greedy_decode(&cfg, &params, &[0], 4);
        // Uniform rows tie everywhere; the lowest index is 0, never EOS.
        assert_eq!(out, vec![0, 0, 0, 0]);
    }

    #[test]
    fn greedy_decode_stops_at_end_token() {
        let cfg = tiny_cfg(Architecture::BigramTable);
        let mut params = init_params(&cfg);
        // Force 0 -> 3 -> 1 (EOS).
        params.get_mut("table").set(0, 3, 10.0);
        params.get_mut("table").set(3, 1, 10.0);
        let out = greedy_decode(&cfg, &params, &[0], 8);
        assert_eq!(out, vec![3]);
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_respects_greedy_limit() {
        let cfg = tiny_cfg(Architecture::Mlp);
        let params = init_params(&cfg);
        let mut r1 = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let a = sample_completion(&cfg, &params, &[0, 2], 5, 1.0, &mut r1);
        let b = sample_completion(&cfg, &params, &[0, 2], 5, 1.0, &mut r2);
        assert_eq!(a, b);
        let mut r3 = rand_chacha::ChaCha12Rng::seed_from_u64(10);
        let g = sample_completion(&cfg, &params, &[0, 2], 5, 1e-9, &mut r3);
        let mut greedy = Vec::new();
        let mut run = vec![0, 2];
        for _ in 0..5 {
            let lp = next_token_log_probs(&cfg, &params, &run);
            let t = super::argmax(&lp);
            greedy.push(t);
            run.push(t);
        }
        assert_eq!(g, greedy);
    }

    #[test]
    fn sampling_respects_distribution_roughly() {
        let cfg = tiny_cfg(Architecture::BigramTable);
        let mut params = init_params(&cfg);
        params.get_mut("table").set(0, 2, 2.0); // tilt row 0 toward token 2
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let n = 4000;
        let mut hits = 0;
        for _ in 0..n {
            if sample_completion(&cfg, &params, &[0], 1, 1.0, &mut rng)[0] == 2 {
                hits += 1;
            }
        }
        let p = math::exp(next_token_log_probs(&cfg, &params, &[0])[2]);
        let freq = hits as f64 / n as f64;
        assert!((freq - p).abs() < 0.03, "freq {freq} vs p {p}");
    }

    #[test]
    fn pretrain_reduces_bigram_nll_from_uniform() {
        let cfg = tiny_cfg(Architecture::BigramTable);
        let mut params = init_params(&cfg);
        // Deterministic chains 0 -> 2 -> 3 -> 1 and 0 -> 4 -> 5 -> 1.
        let corpus = vec![vec![0, 2, 3, 1], vec![0, 4, 5, 1]];
        let pcfg = PretrainConfig { steps: 200, eta: 0.8, batch_size: 2, seed: 7 };
        let log = pretrain(&mut params, &cfg, &corpus, &pcfg).unwrap();
        // Uniform start: NLL = ln 6 exactly.
        assert!((log.initial_nll() - math::ln(6.0)).abs() < 1e-12);
        assert!(log.final_nll() < 0.75, "final NLL {}", log.final_nll());
        // The two chains share the first transition 0 -> {2,4}, so the
        // best achievable mean NLL is (ln 2) / 3 per token.
        assert!(log.final_nll() > math::ln(2.0) / 3.0 - 1e-6);
    }

    #[test]
    fn editable_set_defaults_per_architecture() {
        let cfg = tiny_cfg(Architecture::Transformer1Block);
        let set = cfg.editable_set();
        assert!(set.contains("ffw_w1") && set.contains("ffw_b2") && set.contains("out_proj"));
        assert!(!set.contains("attn_wq") && !set.contains("tok_embed"));
        let mut cfg2 = cfg;
        cfg2.editable_param_names = vec!["out_proj".to_string()];
        assert!(cfg2.editable_set().contains("out_proj"));
        assert_eq!(cfg2.editable_set().len(), 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg(Architecture::Transformer1Block);
        cfg.head_count = 5; // does not divide embed_dim = 8
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        let mut cfg2 = tiny_cfg(Architecture::Mlp);
        cfg2.editable_param_names = vec!["no_such".to_string()];
        assert!(cfg2.validate().is_err());
    }
}
