//! Exploratory diagnostics for tuning the desk-scale recipe. Ignored
//! by default; run with `cargo test -p icelab --test diag -- --ignored --nocapture`.

use std::path::Path;

use icelab::config::RunConfig;
use icelab::runner::build_pretrained;
use icelab_core::corpus::{tokenize_record, BOS};
use icelab_core::editing::{ice_edit, EditConfig, EditTask, Variant};
use icelab_core::model::next_token_log_probs;

#[test]
#[ignore]
fn margins_and_interference() {
    let mut run = RunConfig::default();
    if let Ok(steps) = std::env::var("DIAG_STEPS") {
        run.pretrain.steps = steps.parse().unwrap();
    }
    let model = build_pretrained(&run).unwrap();
    let cfg = &model.cfg;
    let vocab = &model.vocab;

    // Base-model margins on every edit query: log p of the trained
    // (old) object vs the runner-up.
    println!("== base margins on edit queries ==");
    let mut tokenized = Vec::new();
    for (i, rec) in model.world.dataset.records.iter().enumerate() {
        let tr = tokenize_record(vocab, rec, i).unwrap();
        let mut prompt = vec![BOS];
        prompt.extend_from_slice(&tr.query);
        let lp = next_token_log_probs(cfg, &model.params, &prompt);
        let mut idx: Vec<usize> = (0..lp.len()).collect();
        idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap());
        let old = tr.old_target[0];
        let new = tr.new_target[0];
        println!(
            "rec {i}: top {} ({:.3}) second {} ({:.3})  p(old {})={:.3}  p(new {})={:.3}",
            vocab.token(idx[0]),
            lp[idx[0]].exp(),
            vocab.token(idx[1]),
            lp[idx[1]].exp(),
            vocab.token(old),
            lp[old].exp(),
            vocab.token(new),
            lp[new].exp(),
        );
        tokenized.push(tr);
    }

    // Edit record 0 and watch the new-object logit on every other
    // record's query and on record 0's locality prompts.
    let tr = &tokenized[0];
    let new = tr.new_target[0];
    let mut before = Vec::new();
    let mut prompts = Vec::new();
    for (label, q) in std::iter::once(("edit query".to_string(), tr.query.clone()))
        .chain(tokenized.iter().enumerate().skip(1).map(|(j, t)| (format!("query {j}"), t.query.clone())))
        .chain(tr.locality.iter().enumerate().map(|(j, l)| (format!("locality {j}"), l.clone())))
    {
        let mut prompt = vec![BOS];
        prompt.extend_from_slice(&q);
        let lp = next_token_log_probs(cfg, &model.params, &prompt);
        let top = (0..lp.len()).max_by(|&a, &b| lp[a].partial_cmp(&lp[b]).unwrap()).unwrap();
        before.push((lp[new], lp[top], top));
        prompts.push((label, prompt));
    }

    let mut params = model.params.clone();
    let task = EditTask {
        query: tr.query.clone(),
        target: tr.new_target.clone(),
        contexts: tr.contexts.clone(),
    };
    let ecfg = EditConfig {
        weight_clamp: 0.05,
        temperature: 1.0,
        variant: Variant::IceDynamic,
        ..EditConfig::default()
    };
    let outcome = ice_edit(cfg, &mut params, &task, &ecfg, 0).unwrap();
    println!("\n== edit of record 0 ran {} steps ==", outcome.steps_run);
    for t in &outcome.trace {
        println!(
            "step {}: ft {:.4} cons {:.4} grad {:.3} delta {:.4}",
            t.step, t.ft_loss, t.consistency_loss, t.grad_inf_norm, t.delta_inf_norm
        );
    }

    println!("\n== spill of the new-object logit ==");
    for (k, (label, prompt)) in prompts.iter().enumerate() {
        let lp = next_token_log_probs(cfg, &params, prompt);
        let (nb, topb, top_tok) = before[k];
        let top_now = (0..lp.len()).max_by(|&a, &b| lp[a].partial_cmp(&lp[b]).unwrap()).unwrap();
        println!(
            "{label:<12} new-obj {:+.3} -> {:+.3} (boost {:+.3}); old-top {} margin was {:+.3}, argmax now {}",
            nb,
            lp[new],
            lp[new] - nb,
            model.vocab.token(top_tok),
            topb - nb,
            model.vocab.token(top_now),
        );
    }
    let _ = Path::new(".");
}

/// Where does the consistency gap live? Prints the top tokens of the
/// in-context and bare-query answer distributions before and after an
/// edit, per record. Needs a checkpoint at $DIAG_CKPT (dir with
/// checkpoint.bin + dataset.json).
#[test]
#[ignore]
fn gap_anatomy() {
    let dir = std::env::var("DIAG_CKPT").unwrap_or_else(|_| "/tmp/run2".into());
    let (cfg, vocab, base) = icelab::checkpoint::load(Path::new(&format!("{dir}/checkpoint.bin"))).unwrap();
    let records = icelab::records::load(Path::new(&format!("{dir}/dataset.json"))).unwrap();

    let top3 = |params: &icelab_core::params::ParamSet, toks: &[usize]| {
        let lp = next_token_log_probs(&cfg, params, toks);
        let mut idx: Vec<usize> = (0..lp.len()).collect();
        idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap());
        idx[..3]
            .iter()
            .map(|&t| format!("{}:{:.3}", vocab.token(t), lp[t].exp()))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut ecfg = EditConfig::default();
    ecfg.variant = Variant::IceDynamic;
    ecfg.weight_clamp = 0.05;
    ecfg.temperature = 100.0;
    ecfg.sample_len = 3;
    if let Ok(s) = std::env::var("DIAG_EDIT_STEPS") {
        ecfg.max_steps = s.parse().unwrap();
        ecfg.convergence_patience = usize::MAX;
        ecfg.ft_stop = 0.02;
    }
    if let Ok(t) = std::env::var("DIAG_TEMP") {
        ecfg.temperature = t.parse().unwrap();
    }

    for (i, rec) in records.iter().enumerate() {
        let tr = tokenize_record(&vocab, rec, i).unwrap();
        let mut params = base.clone();
        let task = EditTask {
            query: tr.query.clone(),
            target: tr.new_target.clone(),
            contexts: tr.contexts.clone(),
        };
        ice_edit(&cfg, &mut params, &task, &ecfg, 40 + i as u64).unwrap();

        let q: Vec<usize> = std::iter::once(BOS).chain(tr.query.iter().copied()).collect();
        println!("== rec {i} new={}", vocab.token(tr.new_target[0]));
        for (ci, c) in tr.contexts.iter().enumerate() {
            let cq: Vec<usize> = std::iter::once(BOS)
                .chain(c.iter().copied())
                .chain(tr.query.iter().copied())
                .collect();
            let g0 = icelab_core::editing::consistency_gap(&cfg, &base, c, &tr.query, 1).unwrap();
            let g1 = icelab_core::editing::consistency_gap(&cfg, &params, c, &tr.query, 1).unwrap();
            println!("  ctx{ci} pre  c-side [{}] kl {g0:.3}", top3(&base, &cq));
            println!("  ctx{ci} post c-side [{}] kl {g1:.3}", top3(&params, &cq));
        }
        println!("  pre  q-side [{}]", top3(&base, &q));
        println!("  post q-side [{}]", top3(&params, &q));
    }
}

/// Dynamic vs static terminal loss, measured exactly (horizon-1
/// enumeration) instead of through the K-sample estimate.
#[test]
#[ignore]
fn dynamic_vs_static_terminal_exact() {
    let dir = std::env::var("DIAG_CKPT").unwrap_or_else(|_| "/tmp/run7".into());
    let (cfg, vocab, base) = icelab::checkpoint::load(Path::new(&format!("{dir}/checkpoint.bin"))).unwrap();
    let records = icelab::records::load(Path::new(&format!("{dir}/dataset.json"))).unwrap();

    let mut ecfg = EditConfig::default();
    ecfg.weight_clamp = 0.05;
    ecfg.temperature = 100.0;
    ecfg.sample_len = std::env::var("DIAG_LEN").map(|s| s.parse().unwrap()).unwrap_or(3);
    ecfg.max_steps = std::env::var("DIAG_EDIT_STEPS").map(|s| s.parse().unwrap()).unwrap_or(25);
    ecfg.convergence_tol = 0.0;
    ecfg.convergence_patience = usize::MAX;
    ecfg.ft_stop = 0.0;

    let seed_base: u64 = std::env::var("DIAG_SEED").map(|s| s.parse().unwrap()).unwrap_or(0);
    if let Ok(l) = std::env::var("DIAG_LAMBDA") {
        ecfg.lambda = l.parse().unwrap();
    }
    let lambda = ecfg.lambda;
    let mut wins = 0;
    for (i, rec) in records.iter().enumerate() {
        let tr = tokenize_record(&vocab, rec, i).unwrap();
        let task = EditTask {
            query: tr.query.clone(),
            target: tr.new_target.clone(),
            contexts: tr.contexts.clone(),
        };
        let exact = |live: &icelab_core::params::ParamSet,
                     target: &icelab_core::params::ParamSet|
         -> f64 {
            tr.contexts
                .iter()
                .map(|c| {
                    icelab_core::editing::expected_combined_loss(
                        &cfg, live, target, Some(c), &tr.query, &tr.new_target, 1, 100.0, lambda,
                    )
                    .unwrap()
                })
                .sum::<f64>()
                / tr.contexts.len() as f64
        };
        let n_seeds: u64 = std::env::var("DIAG_NSEEDS").map(|s| s.parse().unwrap()).unwrap_or(1);
        let mut dyn_loss = 0.0;
        let mut sta_loss = 0.0;
        for s in 0..n_seeds {
            let seed = seed_base + i as u64 + 1000 * s;
            let mut dyn_params = base.clone();
            let mut vcfg = ecfg.clone();
            vcfg.variant = Variant::IceDynamic;
            ice_edit(&cfg, &mut dyn_params, &task, &vcfg, seed).unwrap();
            let mut sta_params = base.clone();
            vcfg.variant = Variant::IceStatic;
            ice_edit(&cfg, &mut sta_params, &task, &vcfg, seed).unwrap();
            dyn_loss += exact(&dyn_params, &dyn_params) / n_seeds as f64;
            sta_loss += exact(&sta_params, &base) / n_seeds as f64;
        }
        let win = dyn_loss < sta_loss;
        wins += win as usize;
        println!(
            "rec {i}: dyn {dyn_loss:.5} sta {sta_loss:.5} diff {:+.5} {}",
            sta_loss - dyn_loss,
            if win { "dyn" } else { "STA" }
        );
    }
    println!("dynamic wins {wins}/10");
}

/// What do the evaluated generations actually look like in continual
/// mode? Prints the post-edit continuation of [q, x*] for a few
/// records under each variant. Env: DIAG_CKPT, DIAG_VARIANT
/// (ice_dynamic | ft), DIAG_LAMBDA, DIAG_TEMP, DIAG_CLAMP.
#[test]
#[ignore]
fn continual_generation_texture() {
    let dir = std::env::var("DIAG_CKPT").unwrap_or_else(|_| "/tmp/run8".into());
    let (cfg, vocab, base) = icelab::checkpoint::load(Path::new(&format!("{dir}/checkpoint.bin"))).unwrap();
    let records = icelab::records::load(Path::new(&format!("{dir}/dataset.json"))).unwrap();

    let mut run = RunConfig::default();
    run.edit.variant = match std::env::var("DIAG_VARIANT").as_deref() {
        Ok("ft") => Variant::Ft,
        _ => Variant::IceDynamic,
    };
    run.edit.lambda = std::env::var("DIAG_LAMBDA").map(|v| v.parse().unwrap()).unwrap_or(0.25);
    run.edit.temperature = std::env::var("DIAG_TEMP").map(|v| v.parse().unwrap()).unwrap_or(1.0);
    run.edit.weight_clamp = std::env::var("DIAG_CLAMP").map(|v| v.parse().unwrap()).unwrap_or(0.05);
    run.edit.eta = 7e-4;
    run.edit.max_steps = 30;
    run.edit.sample_len = 3;
    run.edit.convergence_tol = 0.0;
    run.edit.convergence_patience = 100000;
    run.edit.ft_stop = 0.0;

    let (report, _, _) = icelab::runner::run_edits(&cfg, &vocab, &base, &records, &run, true).unwrap();

    let mut evolving = base.clone();
    for (i, rec) in records.iter().enumerate() {
        let tr = tokenize_record(&vocab, rec, i).unwrap();
        let task = EditTask {
            query: tr.query.clone(),
            target: tr.new_target.clone(),
            contexts: tr.contexts.clone(),
        };
        ice_edit(&cfg, &mut evolving, &task, &run.edit, run.seed + i as u64).unwrap();
        if [0usize, 10, 25, 49].contains(&i) {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&tr.query);
            prefix.extend_from_slice(&tr.new_target);
            let cont = icelab_core::model::greedy_decode(&cfg, &evolving, &prefix, 10);
            let text: Vec<&str> = cont.iter().map(|&t| vocab.token(t)).collect();
            let r = &report.records[i];
            println!(
                "rec {i:>2}  flu {:.3}  ppl {:.3}  ppl_r {:.3}  | {} {} -> {}",
                r.fluency,
                r.ppl,
                r.ppl_r,
                rec.prompt,
                rec.target_new,
                text.join(" ")
            );
        }
    }
    println!(
        "summary: flu {:.3} ppl {:.3} ppl_r {:.3}",
        report.summary.fluency_mean, report.summary.ppl_mean, report.summary.ppl_r_mean
    );
}
