//! One function per pipeline stage. Each reads its inputs from the paths in
//! the config, writes its outputs atomically and returns the main document.

use minima_core::decomp::Family;
use minima_core::inference::flop_report;
use minima_core::model::{Calibration, ModelContainer};
use minima_core::pipeline::{compress_model, evaluate, heal, CompressedModel};
use minima_core::planner::allocate;
use minima_core::rng::{derive_seed, gaussian_matrix, seeded};
use minima_core::sensitivity::analyze;
use minima_core::specdec::{expected_tokens_per_round, generate};
use minima_core::synth::synthesize;

use crate::bench::{dense_benchmark, micro_benchmark};
use crate::config::{CalibrationSource, RunConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::formats::{calibration_from_container, read_compressed, read_model, write_compressed, write_model};
use crate::markov::{builtin_pair, read_markov};
use crate::report::{
    csv_path, plan_document, read_document, write_document, write_eval_csv, write_heal_csv, write_plan_csv,
    write_sensitivity_csv, write_specdec_csv, BenchDocument, BenchEntry, Document, EvalDocument, HealDocument,
    HealSummary, HealingCheck, PlanDocument, SensitivityDocument, SpecdecDocument, GENERATOR, SCHEMA_VERSION,
};

pub fn load_calibration(src: &CalibrationSource, model: &ModelContainer, seed: u64) -> Result<Calibration> {
    match src {
        CalibrationSource::Gaussian { samples } => Ok(Calibration::gaussian(model, *samples, seed)),
        CalibrationSource::File { path } => calibration_from_container(model, &Container::read(path)?),
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<ModelContainer> {
    let model = synthesize(&cfg.synth_config())?;
    write_model(&model, &cfg.paths.model)?;
    log::info!("wrote {} entries to {}", model.len(), cfg.paths.model.display());
    Ok(model)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<SensitivityDocument> {
    let model = read_model(&cfg.paths.model)?;
    let calib = load_calibration(&cfg.calibration, &model, cfg.seeds.calibration)?;
    let acfg = cfg.analyze_config();
    let report = analyze(&model, &calib, &acfg)?;
    log::info!("{} patches, {} probes", report.patches.len(), report.probes.len());
    let doc = SensitivityDocument {
        schema_version: SCHEMA_VERSION,
        document: SensitivityDocument::KIND.into(),
        generator: GENERATOR.into(),
        seeds: cfg.seeds.clone(),
        model: model.provenance().into(),
        config: acfg,
        report,
    };
    write_document(&doc, &cfg.paths.sensitivity)?;
    write_sensitivity_csv(&doc, &csv_path(&cfg.paths.sensitivity))?;
    Ok(doc)
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<PlanDocument> {
    let sens: SensitivityDocument = read_document(&cfg.paths.sensitivity)?;
    let plan = allocate(&sens.report.records, &sens.report.patches, cfg.target_ratio, &cfg.planner_config())?;
    let doc = plan_document(&cfg.seeds, plan);
    log::info!("plan ratio {:.4} ({} dense patches)", doc.achieved_ratio, doc.summary.dense_patches);
    write_document(&doc, &cfg.paths.plan)?;
    write_plan_csv(&doc.plan, &csv_path(&cfg.paths.plan))?;
    Ok(doc)
}

pub fn cmd_compress(cfg: &RunConfig) -> Result<CompressedModel> {
    let model = read_model(&cfg.paths.model)?;
    let plan: PlanDocument = read_document(&cfg.paths.plan)?;
    let cm = compress_model(&model, &plan.plan, cfg.hooi_iters)?;
    write_compressed(&cm, &cfg.paths.compressed)?;
    Ok(cm)
}

pub fn cmd_heal(cfg: &RunConfig) -> Result<(CompressedModel, HealDocument)> {
    let model = read_model(&cfg.paths.model)?;
    let cm = read_compressed(&cfg.paths.compressed)?;
    let calib = load_calibration(&cfg.calibration, &model, cfg.seeds.calibration)?;
    let healed = heal(&cm, &model, &calib, &cfg.heal)?;
    let log = healed.heal_log.clone().unwrap_or_default();
    let doc = HealDocument {
        schema_version: SCHEMA_VERSION,
        document: HealDocument::KIND.into(),
        generator: GENERATOR.into(),
        seeds: cfg.seeds.clone(),
        summary: HealSummary::of(&log.records),
        log,
    };
    log::info!(
        "healed {} patches, {} strictly improved, {} reverted entries",
        doc.summary.patches,
        doc.summary.strictly_improved,
        doc.log.reverted.len()
    );
    write_compressed(&healed, &cfg.paths.healed)?;
    write_document(&doc, &cfg.paths.heal_log)?;
    write_heal_csv(&doc.log, &csv_path(&cfg.paths.heal_log))?;
    Ok((healed, doc))
}

/// Evaluates the healed model when one exists, otherwise the compressed
/// model. Quality is measured on the evaluation calibration set.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalDocument> {
    let model = read_model(&cfg.paths.model)?;
    let compressed = read_compressed(&cfg.paths.compressed)?;
    let healed = if cfg.paths.healed.exists() { Some(read_compressed(&cfg.paths.healed)?) } else { None };
    let held_out = load_calibration(&cfg.eval_calibration, &model, cfg.seeds.eval)?;

    let before = evaluate(&compressed, &model, &held_out)?;
    let (subject, quality, healing_check) = match &healed {
        Some(h) => {
            let mut q = evaluate(h, &model, &held_out)?;
            q.attach_baseline(&before)?;
            let calib = load_calibration(&cfg.calibration, &model, cfg.seeds.calibration)?;
            let check = HealingCheck {
                mean_before: evaluate(&compressed, &model, &calib)?.mean_deviation,
                mean_after: evaluate(h, &model, &calib)?.mean_deviation,
            };
            if check.mean_after > check.mean_before {
                log::warn!("healing raised calibration deviation: {} > {}", check.mean_after, check.mean_before);
            }
            (h, q, Some(check))
        }
        None => (&compressed, before, None),
    };
    let flops = flop_report(subject, cfg.eval.batch);
    let mut quality = quality;
    quality.dense_flops = Some(flops.dense_flops);
    quality.structured_flops = Some(flops.structured_flops);
    let doc = EvalDocument {
        schema_version: SCHEMA_VERSION,
        document: EvalDocument::KIND.into(),
        generator: GENERATOR.into(),
        seeds: cfg.seeds.clone(),
        healed: healed.is_some(),
        plan_mode: subject.plan.mode,
        target_ratio: subject.plan.target_ratio,
        achieved_ratio: subject.achieved_ratio(),
        quality,
        flops,
        healing_check,
    };
    write_document(&doc, &cfg.paths.report)?;
    write_eval_csv(&doc, &csv_path(&cfg.paths.report))?;
    if cfg.eval.bench_entries > 0 {
        let bench = run_bench(cfg, subject)?;
        write_document(&bench, &cfg.paths.bench)?;
    }
    Ok(doc)
}

/// Times the first non-dense patch of the first `bench_entries` entries that
/// have one.
fn run_bench(cfg: &RunConfig, cm: &CompressedModel) -> Result<BenchDocument> {
    let mut rng = seeded(derive_seed(cfg.seeds.eval, 0xBE7C));
    let mut entries = Vec::new();
    for e in &cm.entries {
        if entries.len() == cfg.eval.bench_entries {
            break;
        }
        let Some(cp) = e.patches.iter().find(|p| p.layer.family() != Family::Dense) else {
            continue;
        };
        let x = gaussian_matrix(&mut rng, cp.layer.cols(), cfg.eval.batch);
        let dense = cp.layer.to_matrix();
        entries.push(BenchEntry {
            entry: e.name.clone(),
            patch_id: cp.patch.id,
            family: cp.layer.family(),
            structured: micro_benchmark(&cp.layer, &x, cfg.eval.bench_reps, cfg.eval.bench_warmup)?,
            dense: dense_benchmark(&dense, &x, cfg.eval.bench_reps, cfg.eval.bench_warmup)?,
        });
    }
    Ok(BenchDocument {
        schema_version: SCHEMA_VERSION,
        document: BenchDocument::KIND.into(),
        generator: GENERATOR.into(),
        seeds: cfg.seeds.clone(),
        machine_dependent: true,
        batch: cfg.eval.batch,
        entries,
    })
}

pub fn cmd_specdec(cfg: &RunConfig) -> Result<SpecdecDocument> {
    let s = &cfg.specdec;
    let (target, draft) = match (&s.target, &s.draft) {
        (Some(t), Some(d)) => (read_markov(t)?, read_markov(d)?),
        (None, None) => builtin_pair(s.vocab, s.draft_noise, cfg.seeds.specdec)?,
        _ => return Err(Error::Usage("specdec.target and specdec.draft go together".into())),
    };
    let (_, stats) = generate(&target, &draft, s.k, s.n_tokens, cfg.seeds.specdec)?;
    let doc = SpecdecDocument {
        schema_version: SCHEMA_VERSION,
        document: SpecdecDocument::KIND.into(),
        generator: GENERATOR.into(),
        seeds: cfg.seeds.clone(),
        vocab: target.vocab,
        k: s.k,
        n_tokens: s.n_tokens,
        expected_tokens_per_round: expected_tokens_per_round(stats.acceptance_rate, s.k)?,
        stats,
    };
    write_document(&doc, &cfg.paths.specdec)?;
    write_specdec_csv(&doc.stats, &csv_path(&cfg.paths.specdec))?;
    Ok(doc)
}
