//! Exact identities of the editing objectives, verified by full
//! enumeration on models small enough to sum over every sequence.

use std::collections::BTreeSet;
use std::time::Instant;

use rand_core::SeedableRng;

use icelab_core::corpus::BOS;
use icelab_core::editing::{
    all_seqs, combined_kl_exact, completion_kl_exact, consistency_gap, ft_loss,
    ft_sampling_loss_exact,
};
use icelab_core::math;
use icelab_core::model::{init_params, Architecture, ModelConfig};
use icelab_core::params::ParamSet;

fn config(arch: Architecture, vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_window: 16,
        architecture: arch,
        embed_dim: 6,
        head_count: 2,
        editable_param_names: Vec::new(),
        seed,
    }
}

/// Init a model and roughen every parameter so distributions are far
/// from uniform.
fn roughened(cfg: &ModelConfig, noise_seed: u64, scale: f64) -> ParamSet {
    let mut params = init_params(cfg);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(noise_seed);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let t = params.get_mut(&name);
        for x in t.data.iter_mut() {
            *x += scale * math::normal_f64(&mut rng);
        }
    }
    params
}

fn instance_archs() -> [Architecture; 3] {
    [Architecture::BigramTable, Architecture::Mlp, Architecture::Transformer1Block]
}

#[test]
fn self_sampling_loss_equals_ft_loss_on_thirty_instances() {
    // Observation: appending self-sampled continuations to the target
    // leaves the fine-tuning objective unchanged. Checked exactly by
    // enumerating every continuation on 30 instances.
    let start = Instant::now();
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (i, &arch) in instance_archs().iter().enumerate() {
        for seed in 0..10u64 {
            let vocab = 4 + ((seed as usize + i) % 3); // 4..=6
            let cfg = config(arch, vocab, seed);
            let params = roughened(&cfg, 1000 + seed * 7 + i as u64, 0.8);
            let q = vec![2usize, (seed as usize % (vocab - 2)) + 2];
            let x_star = vec![(seed as usize + 1) % (vocab - 2) + 2];
            let horizon = 1 + (seed as usize % 3); // 1..=3
            let ft = ft_loss(&cfg, &params, &q, &x_star);
            let exact = ft_sampling_loss_exact(&cfg, &params, &q, &x_star, horizon).unwrap();
            let diff = (exact - ft).abs();
            worst = worst.max(diff);
            assert!(
                diff < 1e-8,
                "{} seed {seed} horizon {horizon}: |{exact} - {ft}| = {diff:.3e}",
                cfg.architecture.name()
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 30);
    assert!(
        start.elapsed().as_secs_f64() < 10.0,
        "enumeration took {:.2}s",
        start.elapsed().as_secs_f64()
    );
    println!("observation-1 instances: 30, worst |L_ft* - L_ft| = {worst:.3e}");
}

#[test]
fn combined_sequence_objective_splits_into_ft_plus_completion_kl() {
    // With a detached target model distinct from the live one, the
    // exact combined-sequence KL equals the fine-tuning loss plus the
    // completion-space KL. Live and target differ in every instance.
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for (i, &arch) in instance_archs().iter().enumerate() {
        for seed in 0..4u64 {
            let cfg = config(arch, 5, seed);
            let live = roughened(&cfg, 40 + seed, 0.7);
            let target = roughened(&cfg, 400 + seed * 13 + i as u64, 0.9);
            let q = vec![3usize];
            let x_star = vec![2usize, 4];
            let context = vec![4usize, 2];
            for horizon in 1..=2usize {
                for ctx in [None, Some(context.as_slice())] {
                    let combined =
                        combined_kl_exact(&cfg, &target, &live, ctx, &q, &x_star, horizon)
                            .unwrap();
                    let ft = ft_loss(&cfg, &live, &q, &x_star);
                    let comp =
                        completion_kl_exact(&cfg, &target, &live, ctx, &q, &x_star, horizon)
                            .unwrap();
                    let diff = (combined - (ft + comp)).abs();
                    worst = worst.max(diff);
                    assert!(
                        diff < 1e-8,
                        "{} seed {seed} horizon {horizon} ctx {:?}: {combined} vs {ft} + {comp}",
                        cfg.architecture.name(),
                        ctx.is_some()
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked >= 24);
    assert!(
        start.elapsed().as_secs_f64() < 20.0,
        "identity check took {:.2}s",
        start.elapsed().as_secs_f64()
    );
    println!("combined-KL split instances: {checked}, worst gap = {worst:.3e}");
}

#[test]
fn delta_expectation_is_exact_point_evaluation() {
    // sum_x delta_y(x) f(x) = f(y) with no floating-point slack, for
    // every y in the space.
    let vocab = 4usize;
    let len = 3usize;
    let seqs = all_seqs(vocab, len);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
    let f: Vec<f64> = (0..seqs.len()).map(|_| math::normal_f64(&mut rng)).collect();
    for (iy, y) in seqs.iter().enumerate() {
        let mut expectation = 0.0;
        for (i, s) in seqs.iter().enumerate() {
            let indicator = if s == y { 1.0 } else { 0.0 };
            expectation += indicator * f[i];
        }
        assert_eq!(expectation, f[iy], "y = {y:?}");
    }
}

#[test]
fn context_moves_transformer_distributions_but_not_bigram_ones() {
    // The consistency gap is the KL between context-conditioned and
    // plain continuations: zero for a model that cannot see the
    // context, positive for one that attends to it.
    let bigram_cfg = config(Architecture::BigramTable, 5, 3);
    let bigram = roughened(&bigram_cfg, 5, 1.0);
    let gap = consistency_gap(&bigram_cfg, &bigram, &[2, 3], &[4, 2], 2).unwrap();
    assert!(gap.abs() < 1e-12, "bigram gap {gap}");

    let tr_cfg = config(Architecture::Transformer1Block, 5, 3);
    let tr = roughened(&tr_cfg, 6, 0.4);
    let gap = consistency_gap(&tr_cfg, &tr, &[2, 3], &[4, 2], 2).unwrap();
    assert!(gap > 1e-6, "transformer gap {gap} should be positive");
    assert!(gap.is_finite());
}

#[test]
fn enumerated_continuations_are_normalized() {
    // The enumeration oracle itself: total probability over all
    // continuations of any prefix is 1 for every architecture.
    for &arch in &instance_archs() {
        let cfg = config(arch, 5, 11);
        let params = roughened(&cfg, 21, 0.6);
        let prefix = vec![BOS, 2, 3];
        for horizon in 1..=3 {
            let lps = icelab_core::editing::enum_log_probs(&cfg, &params, &prefix, horizon)
                .unwrap();
            let total: f64 = lps.iter().map(|&lp| math::exp(lp)).sum();
            assert!(
                (total - 1.0).abs() < 1e-12,
                "{} horizon {horizon}: total {total}",
                cfg.architecture.name()
            );
        }
    }
}

#[test]
fn editable_sets_respect_explicit_names() {
    let mut cfg = config(Architecture::Transformer1Block, 5, 0);
    cfg.editable_param_names = vec!["ffw_w2".to_string()];
    let editable: BTreeSet<String> = cfg.editable_set();
    assert_eq!(editable.len(), 1);
    assert!(editable.contains("ffw_w2"));
}
