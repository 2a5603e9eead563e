//! Evaluation metrics for edited models.
//!
//! * **edit success** — greedy decoding of the query reproduces the new
//!   target exactly;
//! * **portability** — the same check on rephrased queries;
//! * **locality** — greedy output on untouched prompts is unchanged
//!   between the pre- and post-edit models;
//! * **fluency** — weighted bigram/trigram entropy of a generated
//!   continuation (0 for fully repetitive text, larger is more varied);
//! * **perplexity** — `exp` of the mean negative log-likelihood of a
//!   continuation under a reference model;
//! * **perplexity ratio** — generation perplexity normalized by the
//!   reference model's perplexity on the prompt.
//!
//! Perplexity scores the *edited* model's generations under the
//! *pre-edit* reference model: a healthy reference finds degenerate
//! post-edit text surprising, which is what the ratio is for.
//!
//! Rates are fractions in `[0, 1]` here; the summary scales them to
//! percentages.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedRecord, BOS, EOS};
use crate::math;
use crate::model::{greedy_decode, sequence_log_prob, ModelConfig};
use crate::params::ParamSet;

/// Weights and lengths used by [`evaluate_edit`]. Defaults: equal
/// bigram/trigram weights, 10-token generations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default = "default_half")]
    pub bigram_weight: f64,
    #[serde(default = "default_half")]
    pub trigram_weight: f64,
    /// Tokens of continuation generated for fluency and perplexity.
    #[serde(default = "default_decode_len")]
    pub decode_len: usize,
    /// Locality compares greedy answers over at most this many tokens.
    /// Deep rollouts diverge chaotically under any weight change, so
    /// the check watches the answer span, not the whole continuation.
    #[serde(default = "default_locality_span")]
    pub locality_span: usize,
}

fn default_half() -> f64 {
    0.5
}
fn default_decode_len() -> usize {
    10
}
fn default_locality_span() -> usize {
    2
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bigram_weight: default_half(),
            trigram_weight: default_half(),
            decode_len: default_decode_len(),
            locality_span: default_locality_span(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricError {
    /// Fluency needs at least three tokens (one trigram window).
    TooShort { len: usize },
    /// Perplexity of an empty continuation is undefined.
    EmptyContinuation,
}

impl core::fmt::Display for MetricError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricError::TooShort { len } => {
                write!(f, "fluency needs at least 3 tokens, got {len}")
            }
            MetricError::EmptyContinuation => {
                write!(f, "perplexity of an empty continuation is undefined")
            }
        }
    }
}

/// Entropy (nats) of the empirical distribution of `n`-grams in
/// `tokens`. Zero when every window is identical.
pub fn ngram_entropy(tokens: &[usize], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    assert!(tokens.len() >= n, "need at least one window");
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let total = (tokens.len() - n + 1) as f64;
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / total;
        h -= p * math::ln(p);
    }
    h.max(0.0)
}

/// Weighted n-gram entropy: `w2 * H(bigrams) + w3 * H(trigrams)`.
pub fn fluency(tokens: &[usize], cfg: &MetricsConfig) -> Result<f64, MetricError> {
    if tokens.len() < 3 {
        return Err(MetricError::TooShort { len: tokens.len() });
    }
    Ok(cfg.bigram_weight * ngram_entropy(tokens, 2) + cfg.trigram_weight * ngram_entropy(tokens, 3))
}

/// `exp` of the mean negative log-likelihood of `cont` after `prefix`
/// (the prefix must already carry its begin marker). Returns `+inf`
/// when the model assigns the continuation vanishing probability.
pub fn perplexity(cfg: &ModelConfig, params: &ParamSet, prefix: &[usize], cont: &[usize]) -> Result<f64, MetricError> {
    if cont.is_empty() {
        return Err(MetricError::EmptyContinuation);
    }
    let lp = sequence_log_prob(cfg, params, prefix, cont);
    Ok(math::exp(-lp / cont.len() as f64))
}

/// `PPL(generation | q ++ x*) / PPL(q ++ x* | BOS)`, both legs scored
/// under the same reference weights. A generation the reference finds
/// as natural as the prompt scores near 1; degenerate continuations
/// score well above it.
pub fn ppl_ratio(
    cfg: &ModelConfig,
    reference: &ParamSet,
    q: &[usize],
    x_star: &[usize],
    generation: &[usize],
) -> Result<f64, MetricError> {
    let numerator = perplexity(cfg, reference, &bos_input(&[q, x_star]), generation)?;
    let mut prompt = q.to_vec();
    prompt.extend_from_slice(x_star);
    let denominator = perplexity(cfg, reference, &[BOS], &prompt)?;
    Ok(numerator / denominator)
}

fn bos_input(parts: &[&[usize]]) -> Vec<usize> {
    let mut seq = Vec::with_capacity(1 + parts.iter().map(|p| p.len()).sum::<usize>());
    seq.push(BOS);
    for p in parts {
        seq.extend_from_slice(*p);
    }
    seq
}

/// Greedy decoding of `prompt` reproduces `target` exactly.
pub fn greedy_matches(cfg: &ModelConfig, params: &ParamSet, prompt: &[usize], target: &[usize]) -> bool {
    greedy_decode(cfg, params, &bos_input(&[prompt]), target.len()) == target
}

/// Per-record metric values. Rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditEvaluation {
    pub edit_success: bool,
    /// Fraction of portability probes answered with their target.
    pub portability: f64,
    /// Fraction of locality probes whose greedy output the edit left
    /// unchanged.
    pub locality: f64,
    /// Fluency of the post-edit generation `query ++ target ++ cont`;
    /// zero when the utterance is too short to window.
    pub fluency: f64,
    /// Perplexity of the generated continuation under the reference
    /// weights (end marker included, so the scored sequence is never
    /// empty).
    pub ppl: f64,
    /// `ppl` normalized by the reference's perplexity on
    /// `query ++ target`.
    pub ppl_r: f64,
}

/// Evaluate one edit. `pre_params` is the locality ground truth and
/// `reference` scores the perplexities; both are the original
/// pretrained weights in every suite (single-edit and continual), but
/// they answer different questions, so they stay separate arguments.
pub fn evaluate_edit(
    cfg: &ModelConfig,
    pre_params: &ParamSet,
    post_params: &ParamSet,
    reference: &ParamSet,
    rec: &TokenizedRecord,
    mcfg: &MetricsConfig,
) -> EditEvaluation {
    let edit_success = greedy_matches(cfg, post_params, &rec.query, &rec.new_target);

    let portability = if rec.portability.is_empty() {
        if edit_success {
            1.0
        } else {
            0.0
        }
    } else {
        let hits = rec
            .portability
            .iter()
            .filter(|(prompt, target)| greedy_matches(cfg, post_params, prompt, target))
            .count();
        hits as f64 / rec.portability.len() as f64
    };

    let locality = if rec.locality.is_empty() {
        1.0
    } else {
        let mut same = 0usize;
        for p in &rec.locality {
            let prompt = bos_input(&[p]);
            let before = greedy_decode(cfg, pre_params, &prompt, mcfg.decode_len);
            let after = greedy_decode(cfg, post_params, &prompt, mcfg.decode_len);
            let span = before.len().min(mcfg.locality_span.max(1));
            let hit = after.len() >= span
                && before[..span] == after[..span]
                && (span > 0 || after.is_empty());
            if hit {
                same += 1;
            }
        }
        same as f64 / rec.locality.len() as f64
    };

    let gen_prefix = bos_input(&[&rec.query, &rec.new_target]);
    let mut cont = greedy_decode(cfg, post_params, &gen_prefix, mcfg.decode_len);
    cont.push(EOS);

    let mut utterance = rec.query.clone();
    utterance.extend_from_slice(&rec.new_target);
    utterance.extend_from_slice(&cont);
    let fluency_value = fluency(&utterance, mcfg).unwrap_or(0.0);

    let ppl = perplexity(cfg, reference, &gen_prefix, &cont)
        .expect("continuation carries the end marker");
    let ppl_r = ppl_ratio(cfg, reference, &rec.query, &rec.new_target, &cont)
        .expect("query, target and continuation are nonempty");

    EditEvaluation { edit_success, portability, locality, fluency: fluency_value, ppl, ppl_r }
}

/// Aggregates over a batch of evaluations. Rates are percentages;
/// non-finite perplexities are excluded from the means and counted in
/// `non_finite_ppl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub records: usize,
    pub edit_succ_pct: f64,
    pub portability_pct: f64,
    pub locality_pct: f64,
    pub fluency_mean: f64,
    pub ppl_mean: f64,
    pub ppl_r_mean: f64,
    pub non_finite_ppl: usize,
}

impl MetricsSummary {
    pub fn from_evaluations(evals: &[EditEvaluation]) -> MetricsSummary {
        assert!(!evals.is_empty(), "cannot summarize zero records");
        let n = evals.len() as f64;
        let succ = evals.iter().filter(|e| e.edit_success).count() as f64 / n;
        let port = evals.iter().map(|e| e.portability).sum::<f64>() / n;
        let loc = evals.iter().map(|e| e.locality).sum::<f64>() / n;
        let flu = evals.iter().map(|e| e.fluency).sum::<f64>() / n;
        let finite: Vec<&EditEvaluation> =
            evals.iter().filter(|e| e.ppl.is_finite() && e.ppl_r.is_finite()).collect();
        let (ppl, ppl_r) = if finite.is_empty() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let m = finite.len() as f64;
            (
                finite.iter().map(|e| e.ppl).sum::<f64>() / m,
                finite.iter().map(|e| e.ppl_r).sum::<f64>() / m,
            )
        };
        MetricsSummary {
            records: evals.len(),
            edit_succ_pct: 100.0 * succ,
            portability_pct: 100.0 * port,
            locality_pct: 100.0 * loc,
            fluency_mean: flu,
            ppl_mean: ppl,
            ppl_r_mean: ppl_r,
            non_finite_ppl: evals.len() - finite.len(),
        }
    }
}
