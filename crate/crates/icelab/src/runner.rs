//! The commands: pretrain a base model on a synthetic world, apply
//! edit suites to it (one model per record or one evolving model),
//! sweep the sampling-variant grid, and merge result files.

use std::fs;
use std::path::{Path, PathBuf};

use icelab_core::corpus::{synth_world, tokenize_record, Provenance, TokenizedRecord, Vocab, World, BOS};
use icelab_core::editing::{
    consistency_gap, ice_edit, ice_edit_anchored, target_probability, EditTask, StepTrace, Variant,
};
use icelab_core::metrics::{evaluate_edit, MetricsSummary};
use icelab_core::model::{
    corpus_mean_nll, init_params, next_token_log_probs, pretrain, ModelConfig, PretrainLog,
};
use icelab_core::params::ParamSet;

use crate::config::RunConfig;
use crate::manifest::ManifestDraft;
use crate::report::{merge_table, read_report, write_csv, write_json, write_traces, RecordReport, RunReport};
use crate::{checkpoint, records, HarnessError, Result};

/// A pretrained base model together with the world it was trained on.
pub struct PretrainedModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub world: World,
    pub log: PretrainLog,
}

/// Generate the synthetic world and pretrain the base model on its
/// corpus. The model's vocabulary size is taken from the world, not
/// the config.
pub fn build_pretrained(run: &RunConfig) -> Result<PretrainedModel> {
    let world = synth_world(
        run.world.seed,
        run.world.entities,
        run.world.relations,
        run.world.edits,
    )?;
    let mut cfg = run.model.clone();
    cfg.vocab_size = world.dataset.vocab.len();
    cfg.validate()?;
    let mut params = init_params(&cfg);
    let log = pretrain(&mut params, &cfg, &world.corpus, &run.pretrain)?;
    let vocab = world.dataset.vocab.clone();
    Ok(PretrainedModel { cfg, vocab, params, world, log })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| HarnessError::io(&format!("creating {}", dir.display()), e))
}

/// `pretrain`: write `checkpoint.bin`, `dataset.json`, `corpus.txt`,
/// `pretrain_log.json`, and the manifest into `out`.
pub fn cmd_pretrain(run: &RunConfig, out: &Path) -> Result<PretrainedModel> {
    ensure_dir(out)?;
    let mut manifest = ManifestDraft::begin("pretrain", run);
    let model = build_pretrained(run)?;

    let ck = out.join("checkpoint.bin");
    checkpoint::save(&ck, &model.cfg, &model.vocab, &model.params)?;
    manifest.produced(&ck);

    let ds = out.join("dataset.json");
    records::save(&ds, &model.world.dataset.records)?;
    manifest.produced(&ds);
    manifest.dataset(model.world.dataset.provenance.clone());

    let corpus_path = out.join("corpus.txt");
    let mut corpus_text = model.world.corpus_text.join("\n");
    corpus_text.push('\n');
    fs::write(&corpus_path, corpus_text)
        .map_err(|e| HarnessError::io(&format!("writing {}", corpus_path.display()), e))?;
    manifest.produced(&corpus_path);

    let log_path = out.join("pretrain_log.json");
    write_json(&log_path, &model.log)?;
    manifest.produced(&log_path);

    manifest.finish(out)?;
    Ok(model)
}

/// Mean exact consistency gap of a record over its contexts, measured
/// on `params`.
pub fn record_gap(
    cfg: &ModelConfig,
    params: &ParamSet,
    rec: &TokenizedRecord,
    probe_len: usize,
) -> Result<f64> {
    if rec.contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ctx in &rec.contexts {
        total += consistency_gap(cfg, params, ctx, &rec.query, probe_len)
            .map_err(HarnessError::from)?;
    }
    Ok(total / rec.contexts.len() as f64)
}

/// Apply every record of the dataset. In single-edit mode each record
/// edits a fresh copy of the base weights; in continual mode one model
/// accumulates all edits in order, and the original base weights stay
/// the locality reference throughout. Consistency gaps are measured on
/// the weights each edit starts from and ends with.
pub fn run_edits(
    cfg: &ModelConfig,
    vocab: &Vocab,
    base_params: &ParamSet,
    dataset: &[icelab_core::corpus::EditRecord],
    run: &RunConfig,
    continual: bool,
) -> Result<(RunReport, Vec<(usize, Vec<StepTrace>)>, ParamSet)> {
    let mut evolving = base_params.clone();
    let mut reports = Vec::with_capacity(dataset.len());
    let mut traces = Vec::with_capacity(dataset.len());

    for (i, rec) in dataset.iter().enumerate() {
        let tr = tokenize_record(vocab, rec, i)?;
        let task = EditTask {
            query: tr.query.clone(),
            target: tr.new_target.clone(),
            contexts: tr.contexts.clone(),
        };
        let mut params = if continual { evolving.clone() } else { base_params.clone() };

        let pre_gap = record_gap(cfg, &params, &tr, run.probe_len)?;
        let p_before = target_probability(cfg, &params, &tr.query, &tr.new_target);

        let anchor = if continual { Some(base_params) } else { None };
        let outcome =
            ice_edit_anchored(cfg, &mut params, &task, &run.edit, run.seed + i as u64, anchor)?;

        let post_gap = record_gap(cfg, &params, &tr, run.probe_len)?;
        let p_after = target_probability(cfg, &params, &tr.query, &tr.new_target);
        let eval = evaluate_edit(cfg, base_params, &params, base_params, &tr, &run.metrics);

        let last = outcome.trace.last();
        reports.push(RecordReport {
            index: i,
            prompt: rec.prompt.clone(),
            target_new: rec.target_new.clone(),
            converged: outcome.converged,
            steps_run: outcome.steps_run,
            edit_succ: eval.edit_success,
            portability: eval.portability,
            locality: eval.locality,
            fluency: eval.fluency,
            ppl: eval.ppl,
            ppl_r: eval.ppl_r,
            pre_gap,
            post_gap,
            p_target_before: p_before,
            p_target_after: p_after,
            final_ft_loss: last.map(|t| t.ft_loss).unwrap_or(f64::NAN),
            final_combined_loss: last.map(|t| t.combined_loss).unwrap_or(f64::NAN),
        });
        traces.push((i, outcome.trace));
        if continual {
            evolving = params;
        }
    }

    let evals: Vec<_> = reports.iter().map(|r| r.evaluation()).collect();
    let report = RunReport {
        command: if continual { "continual".to_string() } else { "edit".to_string() },
        variant: run.edit.variant.name().to_string(),
        seed: run.seed,
        edit_config: run.edit.clone(),
        summary: MetricsSummary::from_evaluations(&evals),
        records: reports,
    };
    Ok((report, traces, evolving))
}

fn write_run_outputs(
    out: &Path,
    run: &RunConfig,
    provenance: Option<Provenance>,
    report: &RunReport,
    traces: &[(usize, Vec<StepTrace>)],
) -> Result<()> {
    ensure_dir(out)?;
    let mut manifest = ManifestDraft::begin(&report.command, run);
    if let Some(p) = provenance {
        manifest.dataset(p);
    }
    let rj = out.join("report.json");
    write_json(&rj, report)?;
    manifest.produced(&rj);
    let rc = out.join("report.csv");
    write_csv(&rc, &report.records)?;
    manifest.produced(&rc);
    let tj = out.join("trace.jsonl");
    write_traces(&tj, traces)?;
    manifest.produced(&tj);
    manifest.finish(out)
}

/// `edit` and `continual`: load checkpoint and dataset, run the suite,
/// write the report files.
pub fn cmd_edit_like(
    checkpoint_path: &Path,
    dataset_path: &Path,
    run: &RunConfig,
    out: &Path,
    continual: bool,
) -> Result<RunReport> {
    let (cfg, vocab, params) = checkpoint::load(checkpoint_path)?;
    let dataset = records::load(dataset_path)?;
    let (report, traces, _) = run_edits(&cfg, &vocab, &params, &dataset, run, continual)?;
    let provenance = Provenance::Loaded { path: dataset_path.display().to_string() };
    write_run_outputs(out, run, Some(provenance), &report, &traces)?;
    Ok(report)
}

/// Per-variant results of the sampling ablation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub dynamic_target: bool,
    pub uses_context: bool,
    pub summary: MetricsSummary,
    /// Mean combined loss per step, averaged over the records still
    /// running at that step.
    pub loss_curve: Vec<f64>,
}

/// Stepwise viewing window on one edit: top tokens of `p(x | q)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TopTokenTrace {
    pub variant: String,
    pub record: usize,
    /// `steps[s]` holds the top tokens after `s` optimization steps;
    /// `steps[0]` is the unedited model.
    pub steps: Vec<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub top_tokens: Vec<TopTokenTrace>,
}

fn top_tokens(cfg: &ModelConfig, vocab: &Vocab, params: &ParamSet, q: &[usize], k: usize) -> Vec<(String, f64)> {
    let mut prompt = Vec::with_capacity(q.len() + 1);
    prompt.push(BOS);
    prompt.extend_from_slice(q);
    let lp = next_token_log_probs(cfg, params, &prompt);
    let mut indexed: Vec<(usize, f64)> = lp.iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    indexed
        .into_iter()
        .take(k)
        .map(|(t, l)| (vocab.token(t).to_string(), l.exp()))
        .collect()
}

/// The 2x2 sampling grid (target moving vs frozen, context vs none):
/// run the full suite under each cell, and record a stepwise top-token
/// trace of the first record. Rerunning an edit with a smaller step
/// budget reproduces a prefix of the same trajectory (per-step sample
/// streams), which is how the stepwise snapshots are taken through the
/// public interface.
pub fn cmd_ablate(
    checkpoint_path: &Path,
    dataset_path: &Path,
    run: &RunConfig,
    out: &Path,
) -> Result<AblationReport> {
    let (cfg, vocab, base) = checkpoint::load(checkpoint_path)?;
    let dataset = records::load(dataset_path)?;
    ensure_dir(out)?;
    let mut manifest = ManifestDraft::begin("ablate", run);
    manifest.dataset(Provenance::Loaded { path: dataset_path.display().to_string() });

    let grid = [
        Variant::IceDynamic,
        Variant::IceStatic,
        Variant::IceNoContext,
        Variant::FtSampling,
    ];
    let mut cells = Vec::new();
    let mut top_traces = Vec::new();
    let mut merged = Vec::new();

    for variant in grid {
        let mut vrun = run.clone();
        vrun.edit.variant = variant;
        let (report, traces, _) = run_edits(&cfg, &vocab, &base, &dataset, &vrun, false)?;

        let max_len = traces.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut curve = Vec::with_capacity(max_len);
        for s in 0..max_len {
            let at: Vec<f64> = traces
                .iter()
                .filter_map(|(_, t)| t.get(s).map(|st| st.combined_loss))
                .collect();
            curve.push(at.iter().sum::<f64>() / at.len() as f64);
        }
        cells.push(AblationCell {
            variant: variant.name().to_string(),
            dynamic_target: variant.dynamic_target(),
            uses_context: variant.uses_context(),
            summary: report.summary,
            loss_curve: curve,
        });

        // Stepwise top-token trace of the first record.
        let tr = tokenize_record(&vocab, &dataset[0], 0)?;
        let task = EditTask {
            query: tr.query.clone(),
            target: tr.new_target.clone(),
            contexts: tr.contexts.clone(),
        };
        let full_steps = traces[0].1.len();
        let mut snapshots = vec![top_tokens(&cfg, &vocab, &base, &tr.query, 5)];
        for s in 1..=full_steps {
            let mut params = base.clone();
            let mut srun = vrun.clone();
            srun.edit.max_steps = s;
            srun.edit.convergence_patience = usize::MAX;
            ice_edit(&cfg, &mut params, &task, &srun.edit, vrun.seed)?;
            snapshots.push(top_tokens(&cfg, &vocab, &params, &tr.query, 5));
        }
        top_traces.push(TopTokenTrace {
            variant: variant.name().to_string(),
            record: 0,
            steps: snapshots,
        });
        merged.push(report);
    }

    let ablation = AblationReport { cells, top_tokens: top_traces };
    let aj = out.join("ablation.json");
    write_json(&aj, &ablation)?;
    manifest.produced(&aj);
    let table = out.join("ablation.csv");
    fs::write(&table, merge_table(&merged))
        .map_err(|e| HarnessError::io(&format!("writing {}", table.display()), e))?;
    manifest.produced(&table);
    manifest.finish(out)?;
    Ok(ablation)
}

/// `report`: merge run reports into one comparison table; returns the
/// table text.
pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if inputs.is_empty() {
        return Err(HarnessError::Usage("report needs at least one input file".to_string()));
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for path in inputs {
        reports.push(read_report(path)?);
    }
    let table = merge_table(&reports);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let path = dir.join("merged.csv");
        fs::write(&path, &table)
            .map_err(|e| HarnessError::io(&format!("writing {}", path.display()), e))?;
    }
    Ok(table)
}

/// Corpus-level NLL of a model, exposed for the CLI's pretrain summary.
pub fn model_corpus_nll(model: &PretrainedModel) -> f64 {
    corpus_mean_nll(&model.cfg, &model.params, &model.world.corpus)
}
