//! Exploratory: dynamic vs static equilibrium loss on enumerable toy
//! instances, measured exactly. Run with --ignored --nocapture.

use icelab_core::editing::{expected_combined_loss, ice_edit, EditConfig, EditTask, Variant};
use icelab_core::math;
use icelab_core::model::{init_params, Architecture, ModelConfig};
use icelab_core::params::ParamSet;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        architecture: Architecture::Transformer1Block,
        vocab_size: 6,
        context_window: 16,
        embed_dim: 6,
        head_count: 2,
        editable_param_names: Vec::new(),
        seed: 0,
    }
}

fn roughened(cfg: &ModelConfig, noise_seed: u64, out_scale: f64) -> ParamSet {
    let mut params = init_params(cfg);
    let mut rng = ChaCha12Rng::seed_from_u64(noise_seed);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let scale = if name == "out_proj" { out_scale } else { 0.3 };
        let t = params.get_mut(&name);
        for x in t.data.iter_mut() {
            *x += scale * math::normal_f64(&mut rng);
        }
    }
    params
}

#[test]
#[ignore]
fn dynamic_vs_static_exact_equilibrium() {
    let cfg = toy_cfg();
    let horizon = 3;
    let out_scale: f64 =
        std::env::var("DIAG_OUT_SCALE").map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let eta: f64 = std::env::var("DIAG_ETA").map(|s| s.parse().unwrap()).unwrap_or(7e-4);
    let seed_base: u64 = std::env::var("DIAG_SEED").map(|s| s.parse().unwrap()).unwrap_or(0);
    let mut dyn_wins = 0;
    for seed in seed_base..seed_base + 10 {
        let base = roughened(&cfg, 100 + seed, out_scale);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha12Rng, n: usize| -> Vec<usize> {
            (0..n).map(|_| (rng.next_u64() as usize) % cfg.vocab_size).collect()
        };
        let q = draw(&mut rng, 2);
        let x_star = draw(&mut rng, 1);
        let c = draw(&mut rng, 3);
        let task = EditTask { query: q.clone(), target: x_star.clone(), contexts: vec![c.clone()] };

        let mut ecfg = EditConfig::default();
        ecfg.temperature = 100.0;
        ecfg.sample_len = horizon;
        ecfg.max_steps = 25;
        ecfg.eta = eta;
        ecfg.weight_clamp = 1e9;
        ecfg.convergence_tol = 0.0;
        ecfg.convergence_patience = usize::MAX;
        ecfg.ft_stop = 0.0;

        let run = |variant: Variant| -> (f64, ParamSet) {
            let mut params = base.clone();
            let mut vcfg = ecfg.clone();
            vcfg.variant = variant;
            ice_edit(&cfg, &mut params, &task, &vcfg, seed).unwrap();
            (0.0, params)
        };
        let (_, dyn_params) = run(Variant::IceDynamic);
        let (_, sta_params) = run(Variant::IceStatic);

        let dyn_loss = expected_combined_loss(
            &cfg, &dyn_params, &dyn_params, Some(&c), &q, &x_star, horizon, 100.0, 1.0,
        )
        .unwrap();
        let sta_loss = expected_combined_loss(
            &cfg, &sta_params, &base, Some(&c), &q, &x_star, horizon, 100.0, 1.0,
        )
        .unwrap();
        let win = dyn_loss < sta_loss;
        dyn_wins += win as usize;
        println!(
            "seed {seed}: dyn {dyn_loss:.5} sta {sta_loss:.5} diff {:+.5} {}",
            sta_loss - dyn_loss,
            if win { "dyn" } else { "STA" }
        );
    }
    println!("dynamic wins {dyn_wins}/10");
}
