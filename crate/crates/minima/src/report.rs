//! JSON documents written by the pipeline stages, plus flat CSV exports for
//! plotting.
//!
//! Every document starts with `schema_version`, `document` (its type name),
//! `generator` (crate name and version) and the run's `seeds`.

use std::path::{Path, PathBuf};

use minima_core::inference::FlopReport;
use minima_core::planner::{plan_summary, CompressionPlan, Decision, PlanMode, PlanSummary};
use minima_core::pipeline::{HealLog, PatchHealRecord, QualityReport};
use minima_core::sensitivity::{AnalyzeConfig, SensitivityReport};
use minima_core::specdec::SpecDecodeStats;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::TimingStats;
use crate::config::Seeds;
use crate::container::{read_input, write_atomic};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR: &str = concat!("minima ", env!("CARGO_PKG_VERSION"));

/// Implemented by every top-level document.
pub trait Document: Serialize + DeserializeOwned {
    const KIND: &'static str;
    fn schema_version(&self) -> u32;
    fn kind(&self) -> &str;
}

macro_rules! document {
    ($ty:ident, $kind:literal) => {
        impl Document for $ty {
            const KIND: &'static str = $kind;
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
            fn kind(&self) -> &str {
                &self.document
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityDocument {
    pub schema_version: u32,
    pub document: String,
    pub generator: String,
    pub seeds: Seeds,
    pub model: String,
    pub config: AnalyzeConfig,
    pub report: SensitivityReport,
}
document!(SensitivityDocument, "sensitivity");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub schema_version: u32,
    pub document: String,
    pub generator: String,
    pub seeds: Seeds,
    pub mode: PlanMode,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub summary: PlanSummary,
    pub plan: CompressionPlan,
}
document!(PlanDocument, "plan");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealSummary {
    pub patches: usize,
    /// Patches whose objective sequence never increased (tolerance 1e-12
    /// relative to the initial objective).
    pub non_increasing: usize,
    /// Patches with initial relative deviation above 1e-3.
    pub eligible: usize,
    pub strictly_improved: usize,
}

impl HealSummary {
    pub fn of(records: &[PatchHealRecord]) -> Self {
        let mut s = HealSummary { patches: records.len(), non_increasing: 0, eligible: 0, strictly_improved: 0 };
        for r in records {
            let t = &r.trace;
            let tol = 1e-12 * t.initial().max(f64::MIN_POSITIVE);
            if t.objective.windows(2).all(|w| w[1] <= w[0] + tol) {
                s.non_increasing += 1;
            }
            if t.reference > 0.0 && (t.initial() / t.reference).sqrt() > 1e-3 {
                s.eligible += 1;
                if t.last() < t.initial() {
                    s.strictly_improved += 1;
                }
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealDocument {
    pub schema_version: u32,
    pub document: String,
    pub generator: String,
    pub seeds: Seeds,
    pub summary: HealSummary,
    pub log: HealLog,
}
document!(HealDocument, "heal_log");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealingCheck {
    /// Mean layer deviation on the healing calibration set.
    pub mean_before: f64,
    pub mean_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDocument {
    pub schema_version: u32,
    pub document: String,
    pub generator: String,
    pub seeds: Seeds,
    pub healed: bool,
    pub plan_mode: PlanMode,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub quality: QualityReport,
    pub flops: FlopReport,
    pub healing_check: Option<HealingCheck>,
}
document!(EvalDocument, "eval");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEntry {
    pub entry: String,
    pub patch_id: usize,
    pub family: minima_core::decomp::Family,
    pub structured: TimingStats,
    pub dense: TimingStats,
}

/// Wall-clock timings; never byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchDocument {
    pub schema_version: u32,
    pub document: String,
    pub generator: String,
    pub seeds: Seeds,
    pub machine_dependent: bool,
    pub batch: usize,
    pub entries: Vec<BenchEntry>,
}
document!(BenchDocument, "bench");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecdecDocument {
    pub schema_version: u32,
    pub document: String,
    pub generator: String,
    pub seeds: Seeds,
    pub vocab: usize,
    pub k: usize,
    pub n_tokens: usize,
    pub stats: SpecDecodeStats,
    /// Closed-form tokens per round at the measured acceptance rate.
    pub expected_tokens_per_round: f64,
}
document!(SpecdecDocument, "specdec");

pub fn write_document<D: Document>(doc: &D, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_document<D: Document>(path: &Path) -> Result<D> {
    let bytes = read_input(path)?;
    let doc: D = serde_json::from_slice(&bytes)?;
    if doc.kind() != D::KIND {
        return Err(Error::Format(format!("{} is a '{}' document, expected '{}'", path.display(), doc.kind(), D::KIND)));
    }
    if doc.schema_version() != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{} has schema version {}, expected {}",
            path.display(),
            doc.schema_version(),
            SCHEMA_VERSION
        )));
    }
    Ok(doc)
}

/// `report.json` → `report.csv`.
pub fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct SensitivityRow<'a> {
    patch_id: usize,
    layer_name: &'a str,
    layer_index: usize,
    kind: &'a str,
    score: f64,
    family: &'a str,
    ratio: f64,
    degradation: f64,
    measured: bool,
}

pub fn write_sensitivity_csv(doc: &SensitivityDocument, path: &Path) -> Result<()> {
    let r = &doc.report;
    let rows = r.records.iter().flat_map(|rec| {
        let p = &r.patches[rec.patch_id];
        rec.predictions.iter().map(move |h| SensitivityRow {
            patch_id: rec.patch_id,
            layer_name: &p.layer_name,
            layer_index: p.layer_index,
            kind: p.kind.as_str(),
            score: rec.score,
            family: h.family.as_str(),
            ratio: h.ratio,
            degradation: h.degradation,
            measured: h.measured,
        })
    });
    write_csv(path, rows)
}

#[derive(Serialize)]
struct PlanRow<'a> {
    patch_id: usize,
    layer_name: &'a str,
    layer_index: usize,
    kind: &'a str,
    family: &'a str,
    ratio: Option<f64>,
    dense_params: usize,
    params: usize,
    predicted_degradation: f64,
}

pub fn write_plan_csv(plan: &CompressionPlan, path: &Path) -> Result<()> {
    let rows = plan.entries.iter().map(|e| {
        let (family, ratio) = match &e.decision {
            Decision::KeepDense => ("dense", None),
            Decision::Compress { family, ratio, .. } => (family.as_str(), Some(*ratio)),
        };
        PlanRow {
            patch_id: e.patch.id,
            layer_name: &e.patch.layer_name,
            layer_index: e.patch.layer_index,
            kind: e.patch.kind.as_str(),
            family,
            ratio,
            dense_params: e.patch.rows() * e.patch.cols(),
            params: e.params(),
            predicted_degradation: e.predicted_degradation(),
        }
    });
    write_csv(path, rows)
}

#[derive(Serialize)]
struct HealRow<'a> {
    patch_id: usize,
    family: &'a str,
    sweep: usize,
    objective: f64,
}

pub fn write_heal_csv(log: &HealLog, path: &Path) -> Result<()> {
    let rows = log.records.iter().flat_map(|r| {
        r.trace.objective.iter().enumerate().map(move |(sweep, &objective)| HealRow {
            patch_id: r.patch_id,
            family: r.family.as_str(),
            sweep,
            objective,
        })
    });
    write_csv(path, rows)
}

#[derive(Serialize)]
struct EvalRow<'a> {
    name: &'a str,
    layer_index: usize,
    kind: &'a str,
    deviation_before: Option<f64>,
    deviation: Option<f64>,
    dense_params: usize,
    params: usize,
    dense_flops: u64,
    structured_flops: u64,
}

pub fn write_eval_csv(doc: &EvalDocument, path: &Path) -> Result<()> {
    let rows = doc.quality.layers.iter().zip(&doc.flops.layers).map(|(q, f)| EvalRow {
        name: &q.name,
        layer_index: q.layer_index,
        kind: q.kind.as_str(),
        deviation_before: q.deviation_before,
        deviation: q.deviation,
        dense_params: q.dense_params,
        params: q.params,
        dense_flops: f.dense_flops,
        structured_flops: f.structured_flops,
    });
    write_csv(path, rows)
}

#[derive(Serialize)]
struct SpecdecRow {
    accepted_in_round: usize,
    rounds: usize,
}

pub fn write_specdec_csv(stats: &SpecDecodeStats, path: &Path) -> Result<()> {
    let rows = stats
        .accepted_per_round
        .iter()
        .enumerate()
        .map(|(accepted_in_round, &rounds)| SpecdecRow { accepted_in_round, rounds });
    write_csv(path, rows)
}

pub fn plan_document(seeds: &Seeds, plan: CompressionPlan) -> PlanDocument {
    PlanDocument {
        schema_version: SCHEMA_VERSION,
        document: PlanDocument::KIND.into(),
        generator: GENERATOR.into(),
        seeds: seeds.clone(),
        mode: plan.mode,
        target_ratio: plan.target_ratio,
        achieved_ratio: plan.achieved_ratio(),
        summary: plan_summary(&plan),
        plan,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use minima_core::pipeline::LayerHealTrace;

    fn trace(objective: Vec<f64>, reference: f64) -> PatchHealRecord {
        PatchHealRecord {
            patch_id: 0,
            family: minima_core::decomp::Family::Tt,
            trace: LayerHealTrace { objective, reference, accepted: 0, rejected: 0, pinv_truncations: 0 },
        }
    }

    #[test]
    fn heal_summary_counts() {
        let recs = [
            trace(vec![1.0, 0.5, 0.5], 100.0),
            trace(vec![1.0, 1.0], 100.0),
            trace(vec![1e-8, 1e-8], 100.0),
            trace(vec![1.0, 1.1], 100.0),
        ];
        let s = HealSummary::of(&recs);
        assert_eq!(s.patches, 4);
        assert_eq!(s.non_increasing, 3);
        assert_eq!(s.eligible, 3);
        assert_eq!(s.strictly_improved, 1);
    }

    #[test]
    fn document_kind_and_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.json");
        let plan = CompressionPlan::all_dense(&[], PlanMode::Uniform);
        let mut doc = plan_document(&Seeds::default(), plan);
        write_document(&doc, &p).unwrap();
        assert_eq!(read_document::<PlanDocument>(&p).unwrap(), doc);
        assert!(matches!(read_document::<EvalDocument>(&p), Err(Error::Json(_))));
        doc.schema_version = 99;
        write_document(&doc, &p).unwrap();
        assert!(matches!(read_document::<PlanDocument>(&p), Err(Error::Format(_))));
    }

    #[test]
    fn csv_path_swaps_extension() {
        assert_eq!(csv_path(Path::new("out/report.json")), PathBuf::from("out/report.csv"));
    }
}
