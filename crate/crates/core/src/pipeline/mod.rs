//! Applying a plan to a model, healing the factors and measuring quality.

mod heal;

pub use heal::{heal_layer, HealConfig, LayerHealTrace};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decomp::{compress_matrix, CompressedLayer, Family};
use crate::error::{bail, Error, Result};
use crate::model::{Calibration, ModelContainer, ModelEntry, SubmoduleKind};
use crate::planner::{CompressionPlan, Decision};
use crate::sensitivity::{output_deviation, Patch};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedPatch {
    pub patch: Patch,
    pub layer: CompressedLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub layer_index: usize,
    pub kind: SubmoduleKind,
    pub patches: Vec<CompressedPatch>,
}

impl CompressedEntry {
    /// Dense matrix reassembled from the patches.
    pub fn reassemble(&self) -> Tensor {
        reassemble(self.rows, self.cols, &self.patches)
    }

    pub fn param_count(&self) -> usize {
        self.patches.iter().map(|p| p.layer.param_count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchHealRecord {
    pub patch_id: usize,
    pub family: Family,
    pub trace: LayerHealTrace,
}

fn reassemble(rows: usize, cols: usize, patches: &[CompressedPatch]) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for cp in patches {
        let m = cp.layer.to_matrix();
        let (r0, c0) = (cp.patch.row_range.0, cp.patch.col_range.0);
        let pc = cp.patch.cols();
        for i in 0..cp.patch.rows() {
            data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + pc].copy_from_slice(&m.data()[i * pc..(i + 1) * pc]);
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HealLog {
    pub sweeps: usize,
    pub records: Vec<PatchHealRecord>,
    /// Entries whose healed output deviation on the calibration set exceeded
    /// the unhealed one; their patches were restored.
    #[serde(default)]
    pub reverted: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedModel {
    pub entries: Vec<CompressedEntry>,
    pub plan: CompressionPlan,
    pub heal_log: Option<HealLog>,
    pub total_layers: usize,
    pub provenance: String,
}

impl CompressedModel {
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(CompressedEntry::param_count).sum()
    }

    pub fn dense_params(&self) -> usize {
        self.entries.iter().map(|e| e.rows * e.cols).sum()
    }

    /// 1.0 for an empty model.
    pub fn achieved_ratio(&self) -> f64 {
        if self.dense_params() == 0 {
            return 1.0;
        }
        self.param_count() as f64 / self.dense_params() as f64
    }

    pub fn patches(&self) -> impl Iterator<Item = &CompressedPatch> {
        self.entries.iter().flat_map(|e| e.patches.iter())
    }

    /// Dense model with every entry reassembled.
    pub fn to_model(&self) -> Result<ModelContainer> {
        let mut m = ModelContainer::new(self.total_layers, self.provenance.clone());
        for e in &self.entries {
            m.push(ModelEntry::new(e.name.clone(), e.reassemble(), e.layer_index, e.kind))?;
        }
        Ok(m)
    }
}

/// Checks that the plan's patches of each entry tile it exactly.
fn check_coverage(model: &ModelContainer, plan: &CompressionPlan) -> Result<Vec<Vec<usize>>> {
    let mut by_entry: Vec<Vec<usize>> = vec![Vec::new(); model.len()];
    for (i, pe) in plan.entries.iter().enumerate() {
        let p = &pe.patch;
        let Some(e) = model.entries().get(p.entry_index) else {
            bail!(PlanMismatch, "patch {} refers to entry {}", p.id, p.entry_index);
        };
        if e.name != p.layer_name
            || p.row_range.0 >= p.row_range.1
            || p.col_range.0 >= p.col_range.1
            || p.row_range.1 > e.matrix.rows()
            || p.col_range.1 > e.matrix.cols()
        {
            bail!(PlanMismatch, "patch {} does not fit entry '{}'", p.id, e.name);
        }
        by_entry[p.entry_index].push(i);
    }
    for (ei, e) in model.entries().iter().enumerate() {
        let cols = e.matrix.cols();
        let mut cover = vec![0u8; e.matrix.len()];
        for &i in &by_entry[ei] {
            let p = &plan.entries[i].patch;
            for r in p.row_range.0..p.row_range.1 {
                for c in p.col_range.0..p.col_range.1 {
                    cover[r * cols + c] = cover[r * cols + c].saturating_add(1);
                }
            }
        }
        if cover.iter().any(|&v| v != 1) {
            bail!(PlanMismatch, "plan patches do not tile entry '{}'", e.name);
        }
    }
    Ok(by_entry)
}

/// Decomposes every patch as its plan entry says; `KeepDense` patches are
/// stored dense.
pub fn compress_model(model: &ModelContainer, plan: &CompressionPlan, hooi_iters: usize) -> Result<CompressedModel> {
    let by_entry = check_coverage(model, plan)?;
    let mut entries = Vec::with_capacity(model.len());
    for (ei, e) in model.entries().iter().enumerate() {
        let mut patches = Vec::with_capacity(by_entry[ei].len());
        for &i in &by_entry[ei] {
            let pe = &plan.entries[i];
            let w = pe.patch.extract(&e.matrix);
            let layer = match &pe.decision {
                Decision::KeepDense => CompressedLayer::dense(w)?,
                Decision::Compress {
                    family, ranks, params, ..
                } => {
                    if ranks.family != *family {
                        bail!(PlanMismatch, "patch {}: ranks are {} but family is {}", pe.patch.id, ranks.family, family);
                    }
                    let layer = compress_matrix(&w, ranks, hooi_iters)?;
                    if layer.param_count() != *params {
                        bail!(
                            PlanMismatch,
                            "patch {}: plan expects {} params, ranks give {}",
                            pe.patch.id,
                            params,
                            layer.param_count()
                        );
                    }
                    layer
                }
            };
            patches.push(CompressedPatch {
                patch: pe.patch.clone(),
                layer,
            });
        }
        entries.push(CompressedEntry {
            name: e.name.clone(),
            rows: e.matrix.rows(),
            cols: e.matrix.cols(),
            layer_index: e.layer_index,
            kind: e.kind,
            patches,
        });
    }
    Ok(CompressedModel {
        entries,
        plan: plan.clone(),
        heal_log: None,
        total_layers: model.total_layers(),
        provenance: String::from(model.provenance()),
    })
}

fn check_pairing(cm: &CompressedModel, original: &ModelContainer) -> Result<()> {
    if cm.entries.len() != original.len()
        || cm
            .entries
            .iter()
            .zip(original.entries())
            .any(|(c, o)| c.name != o.name || [c.rows, c.cols] != o.matrix.shape())
    {
        bail!(PlanMismatch, "compressed model does not match the original");
    }
    Ok(())
}

/// Refits every compressed patch against the original weights on the
/// calibration inputs, each patch independently. Ranks and families are
/// unchanged.
pub fn heal(
    cm: &CompressedModel,
    original: &ModelContainer,
    calib: &Calibration,
    cfg: &HealConfig,
) -> Result<CompressedModel> {
    check_pairing(cm, original)?;
    let widest = cm.patches().map(|p| p.patch.cols()).max().unwrap_or(0);
    let needed = crate::math::ceil(cfg.min_sample_fraction * widest as f64) as usize;
    if calib.samples() < needed {
        bail!(
            InvalidArgument,
            "healing needs at least {} calibration samples, got {}",
            needed,
            calib.samples()
        );
    }
    let mut out = cm.clone();
    let mut records = Vec::new();
    let mut reverted = Vec::new();
    for (ei, entry) in out.entries.iter_mut().enumerate() {
        let w_full = &original.entries()[ei].matrix;
        let x_full = calib.input(ei);
        if entry.patches.iter().all(|cp| cp.layer.family() == Family::Dense) {
            continue;
        }
        let before = entry.patches.clone();
        let first_record = records.len();
        for cp in entry.patches.iter_mut() {
            if cp.layer.family() == Family::Dense {
                continue;
            }
            let w = cp.patch.extract(w_full);
            let x = cp.patch.inputs(x_full);
            let trace = heal_layer(&mut cp.layer, &w, &x, cfg)?;
            if trace.pinv_truncations > 0 {
                log::info!("patch {}: {} pseudo-inverse truncations", cp.patch.id, trace.pinv_truncations);
            }
            records.push(PatchHealRecord {
                patch_id: cp.patch.id,
                family: cp.layer.family(),
                trace,
            });
        }
        let dev_before = output_deviation(w_full, &reassemble(entry.rows, entry.cols, &before), x_full);
        let dev_after = output_deviation(w_full, &entry.reassemble(), x_full);
        if let (Some(b), Some(a)) = (dev_before, dev_after) {
            if a > b {
                log::warn!("healing raised deviation of '{}' ({} > {}); reverted", entry.name, a, b);
                entry.patches = before;
                for r in &mut records[first_record..] {
                    let t = &mut r.trace;
                    let initial = t.initial();
                    t.objective.truncate(1);
                    t.objective[0] = initial;
                    t.accepted = 0;
                }
                reverted.push(entry.name.clone());
            }
        }
    }
    records.sort_by_key(|r| r.patch_id);
    out.heal_log = Some(HealLog {
        sweeps: cfg.sweeps,
        records,
        reverted,
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuality {
    pub name: String,
    pub layer_index: usize,
    pub kind: SubmoduleKind,
    /// `None` when `‖WX‖ = 0`.
    pub deviation: Option<f64>,
    pub deviation_before: Option<f64>,
    pub dense_params: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub layers: Vec<LayerQuality>,
    pub mean_deviation: f64,
    pub max_deviation: f64,
    pub mean_deviation_before: Option<f64>,
    pub max_deviation_before: Option<f64>,
    pub degenerate_layers: usize,
    pub dense_params: usize,
    pub params: usize,
    pub dense_flops: Option<u64>,
    pub structured_flops: Option<u64>,
}

impl QualityReport {
    /// Records `before`'s deviations as the pre-healing baseline.
    pub fn attach_baseline(&mut self, before: &QualityReport) -> Result<()> {
        if before.layers.len() != self.layers.len()
            || before.layers.iter().zip(&self.layers).any(|(a, b)| a.name != b.name)
        {
            bail!(PlanMismatch, "baseline report covers different layers");
        }
        for (l, b) in self.layers.iter_mut().zip(&before.layers) {
            l.deviation_before = b.deviation;
        }
        self.mean_deviation_before = Some(before.mean_deviation);
        self.max_deviation_before = Some(before.max_deviation);
        Ok(())
    }
}

/// Per-entry relative output deviation of the reassembled compressed model.
pub fn evaluate(cm: &CompressedModel, original: &ModelContainer, calib: &Calibration) -> Result<QualityReport> {
    check_pairing(cm, original)?;
    if original.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut layers = Vec::with_capacity(cm.entries.len());
    for (ei, entry) in cm.entries.iter().enumerate() {
        let w = &original.entries()[ei].matrix;
        let deviation = output_deviation(w, &entry.reassemble(), calib.input(ei));
        if deviation.is_none() {
            log::warn!("entry '{}' has zero output; excluded from aggregates", entry.name);
        }
        layers.push(LayerQuality {
            name: entry.name.clone(),
            layer_index: entry.layer_index,
            kind: entry.kind,
            deviation,
            deviation_before: None,
            dense_params: entry.rows * entry.cols,
            params: entry.param_count(),
        });
    }
    let devs: Vec<f64> = layers.iter().filter_map(|l| l.deviation).collect();
    let mean = if devs.is_empty() { 0.0 } else { devs.iter().sum::<f64>() / devs.len() as f64 };
    Ok(QualityReport {
        mean_deviation: mean,
        max_deviation: devs.iter().copied().fold(0.0, f64::max),
        mean_deviation_before: None,
        max_deviation_before: None,
        degenerate_layers: layers.len() - devs.len(),
        dense_params: cm.dense_params(),
        params: cm.param_count(),
        dense_flops: None,
        structured_flops: None,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{allocate, plan_summary, PlanMode, PlannerConfig};
    use crate::rng::{gaussian_matrix, seeded};
    use crate::sensitivity::{partition_patches, HeadPrediction, SensitivityRecord};
    use crate::synth::{synthesize, SynthConfig};

    fn small_model() -> ModelContainer {
        synthesize(&SynthConfig {
            layers: 2,
            d_model: 32,
            d_ffn: 64,
            vocab: 0,
            fragile_layers: vec![],
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn records(patches: &[Patch]) -> Vec<SensitivityRecord> {
        patches
            .iter()
            .map(|p| {
                let predictions = Family::NETWORKS
                    .iter()
                    .flat_map(|&family| {
                        [0.5, 0.35, 0.25, 0.15].map(|ratio| HeadPrediction {
                            family,
                            ratio,
                            degradation: (1.0 - ratio) * (1.0 + p.id as f64 * 0.01) * 0.01,
                            measured: false,
                        })
                    })
                    .collect();
                SensitivityRecord {
                    patch_id: p.id,
                    score: 0.5,
                    recommendations: Vec::new(),
                    predictions,
                }
            })
            .collect()
    }

    #[test]
    fn all_dense_plan_is_bit_identical() {
        let model = small_model();
        let patches = partition_patches(&model, 16, 16).unwrap();
        let plan = CompressionPlan::all_dense(&patches, PlanMode::Uniform);
        let cm = compress_model(&model, &plan, 2).unwrap();
        assert_eq!(cm.to_model().unwrap().entries(), model.entries());
        let calib = Calibration::gaussian(&model, 16, 3);
        let q = evaluate(&cm, &model, &calib).unwrap();
        assert!(q.layers.iter().all(|l| l.deviation == Some(0.0)));
    }

    #[test]
    fn achieved_ratio_matches_plan_summary() {
        let model = small_model();
        let patches = partition_patches(&model, 16, 16).unwrap();
        let plan = allocate(&records(&patches), &patches, 0.65, &PlannerConfig::default()).unwrap();
        let cm = compress_model(&model, &plan, 2).unwrap();
        let s = plan_summary(&plan);
        assert_eq!(cm.param_count(), s.total.params);
        let recount: usize = cm.patches().map(|p| p.layer.stored_entries()).sum();
        assert_eq!(recount, s.total.params);
        assert_eq!(cm, compress_model(&model, &plan, 2).unwrap());
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let model = small_model();
        let mut patches = partition_patches(&model, 16, 16).unwrap();
        patches.pop();
        let plan = CompressionPlan::all_dense(&patches, PlanMode::Uniform);
        assert!(matches!(compress_model(&model, &plan, 2), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn evaluate_matches_dense_recomputation() {
        let model = small_model();
        let patches = partition_patches(&model, 16, 16).unwrap();
        let plan = allocate(&records(&patches), &patches, 0.5, &PlannerConfig::default()).unwrap();
        let cm = compress_model(&model, &plan, 2).unwrap();
        let calib = Calibration::gaussian(&model, 32, 9);
        let q = evaluate(&cm, &model, &calib).unwrap();
        for (i, l) in q.layers.iter().enumerate() {
            let w = &model.entries()[i].matrix;
            let x = calib.input(i);
            let w_hat = cm.entries[i].reassemble();
            let wx = w.matmul(x).unwrap();
            let dx = w.sub(&w_hat).matmul(x).unwrap();
            let oracle = dx.frobenius_norm() / wx.frobenius_norm();
            assert!((l.deviation.unwrap() - oracle).abs() < 1e-12);
        }

        // a zeroed compressed model deviates by exactly 1
        let mut zero = cm.clone();
        for e in &mut zero.entries {
            for p in &mut e.patches {
                p.layer = CompressedLayer::dense(Tensor::zeros(&[p.patch.rows(), p.patch.cols()])).unwrap();
            }
        }
        let q0 = evaluate(&zero, &model, &calib).unwrap();
        assert!(q0.layers.iter().all(|l| (l.deviation.unwrap() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn healing_improves_aggregate_deviation() {
        let model = small_model();
        let patches = partition_patches(&model, 16, 16).unwrap();
        let cfg = PlannerConfig::default();
        let plan = allocate(&records(&patches), &patches, 0.5, &cfg).unwrap();
        let cm = compress_model(&model, &plan, 1).unwrap();
        let calib = Calibration::gaussian(&model, 32, 5);
        let before = evaluate(&cm, &model, &calib).unwrap();
        let healed = heal(&cm, &model, &calib, &HealConfig::default()).unwrap();
        let mut after = evaluate(&healed, &model, &calib).unwrap();
        after.attach_baseline(&before).unwrap();
        assert!(after.mean_deviation <= before.mean_deviation);
        assert_eq!(healed.param_count(), cm.param_count());
        for (a, b) in healed.patches().zip(cm.patches()) {
            assert_eq!(a.layer.ranks(), b.layer.ranks());
        }
        let log = healed.heal_log.as_ref().unwrap();
        assert!(log
            .records
            .iter()
            .all(|r| r.trace.objective.windows(2).all(|p| p[1] <= p[0])));
        assert_eq!(healed, heal(&cm, &model, &calib, &HealConfig::default()).unwrap());
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let model = small_model();
        let patches = partition_patches(&model, 16, 16).unwrap();
        let cm = compress_model(&model, &CompressionPlan::all_dense(&patches, PlanMode::Uniform), 1).unwrap();
        let calib = Calibration::new(
            &model,
            model.entries().iter().map(|e| gaussian_matrix(&mut seeded(1), e.matrix.cols(), 2)).collect(),
        )
        .unwrap();
        assert!(heal(&cm, &model, &calib, &HealConfig::default()).is_err());
    }
}
