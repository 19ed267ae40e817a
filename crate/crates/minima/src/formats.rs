//! Mapping models, calibration sets and compressed models onto MNMA
//! containers. Structure travels in the JSON metadata document; every tensor
//! is a container entry.

use std::path::Path;

use minima_core::decomp::{CompressedLayer, Family, Payload};
use minima_core::model::{Calibration, Dtype, ModelContainer, ModelEntry, SubmoduleKind};
use minima_core::pipeline::{CompressedEntry, CompressedModel, CompressedPatch, HealLog};
use minima_core::planner::CompressionPlan;
use minima_core::sensitivity::Patch;
use minima_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Data, RawEntry};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "minima.model";
pub const CALIBRATION_FORMAT: &str = "minima.calibration";
pub const COMPRESSED_FORMAT: &str = "minima.compressed";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    format: String,
    total_layers: usize,
    provenance: String,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    name: String,
    layer_index: usize,
    kind: SubmoduleKind,
}

fn to_raw(name: String, t: &Tensor, dtype: Dtype) -> RawEntry {
    let data = match dtype {
        Dtype::F32 => Data::F32(t.data().iter().map(|&x| x as f32).collect()),
        Dtype::F64 => Data::F64(t.data().to_vec()),
    };
    RawEntry { name, shape: t.shape().to_vec(), data }
}

fn to_tensor(e: &RawEntry) -> Result<Tensor> {
    Ok(Tensor::new(e.shape.clone(), e.data.to_f64())?)
}

fn dtype_of(d: &Data) -> Dtype {
    match d {
        Data::F32(_) => Dtype::F32,
        Data::F64(_) => Dtype::F64,
    }
}

/// Parses the metadata document after checking its `format` tag.
fn metadata_of<T: serde::de::DeserializeOwned>(c: &Container, expected: &str) -> Result<Option<T>> {
    let Some(value) = c.metadata_json::<serde_json::Value>()? else {
        return Ok(None);
    };
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<none>");
    if found != expected {
        return Err(Error::Format(format!("expected a '{}' container, found '{}'", expected, found)));
    }
    Ok(Some(serde_json::from_value(value)?))
}

pub fn model_to_container(model: &ModelContainer) -> Result<Container> {
    let meta = ModelMeta {
        format: MODEL_FORMAT.into(),
        total_layers: model.total_layers(),
        provenance: model.provenance().into(),
        entries: model
            .entries()
            .iter()
            .map(|e| EntryMeta { name: e.name.clone(), layer_index: e.layer_index, kind: e.kind })
            .collect(),
    };
    Ok(Container {
        entries: model.entries().iter().map(|e| to_raw(e.name.clone(), &e.matrix, e.dtype)).collect(),
        metadata: Some(serde_json::to_vec(&meta)?),
    })
}

/// Containers without metadata are read as single-layer models whose
/// entries are all of kind `other`.
pub fn model_from_container(c: &Container) -> Result<ModelContainer> {
    let meta: Option<ModelMeta> = metadata_of(c, MODEL_FORMAT)?;
    let (total_layers, provenance, metas) = match meta {
        Some(m) => {
            if m.entries.len() != c.entries.len() {
                return Err(Error::Format(format!(
                    "metadata lists {} entries, container has {}",
                    m.entries.len(),
                    c.entries.len()
                )));
            }
            (m.total_layers, m.provenance, Some(m.entries))
        }
        None => (1, String::new(), None),
    };
    let mut model = ModelContainer::new(total_layers, provenance);
    for (i, raw) in c.entries.iter().enumerate() {
        let (layer_index, kind) = match &metas {
            Some(ms) => {
                if ms[i].name != raw.name {
                    return Err(Error::Format(format!("metadata entry {} is '{}', payload is '{}'", i, ms[i].name, raw.name)));
                }
                (ms[i].layer_index, ms[i].kind)
            }
            None => (0, SubmoduleKind::Other),
        };
        let mut entry = ModelEntry::new(raw.name.clone(), to_tensor(raw)?, layer_index, kind);
        entry.dtype = dtype_of(&raw.data);
        model.push(entry)?;
    }
    Ok(model)
}

pub fn read_model(path: &Path) -> Result<ModelContainer> {
    model_from_container(&Container::read(path)?)
}

pub fn write_model(model: &ModelContainer, path: &Path) -> Result<()> {
    model_to_container(model)?.write(path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationMeta {
    format: String,
    samples: usize,
}

/// Calibration entries carry the model entry names, each `cols × samples`.
pub fn calibration_to_container(model: &ModelContainer, calib: &Calibration) -> Result<Container> {
    let entries = model
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| to_raw(e.name.clone(), calib.input(i), Dtype::F64))
        .collect();
    let meta = CalibrationMeta { format: CALIBRATION_FORMAT.into(), samples: calib.samples() };
    Ok(Container { entries, metadata: Some(serde_json::to_vec(&meta)?) })
}

pub fn calibration_from_container(model: &ModelContainer, c: &Container) -> Result<Calibration> {
    metadata_of::<CalibrationMeta>(c, CALIBRATION_FORMAT)?;
    let inputs = model
        .entries()
        .iter()
        .map(|e| {
            let raw = c
                .get(&e.name)
                .ok_or_else(|| Error::Format(format!("calibration has no entry for '{}'", e.name)))?;
            to_tensor(raw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration::new(model, inputs)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressedMeta {
    format: String,
    total_layers: usize,
    provenance: String,
    entries: Vec<CompressedEntryMeta>,
    plan: CompressionPlan,
    heal_log: Option<HealLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressedEntryMeta {
    name: String,
    rows: usize,
    cols: usize,
    layer_index: usize,
    kind: SubmoduleKind,
    patches: Vec<PatchMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchMeta {
    patch: Patch,
    family: Family,
    mode_shape: Vec<usize>,
    row_mode_count: usize,
}

fn part_names<'a>(prefix: &str, layer: &'a CompressedLayer) -> Vec<(String, &'a Tensor)> {
    match layer.payload() {
        Payload::Dense { matrix } => vec![(format!("{prefix}/matrix"), matrix)],
        Payload::Tucker { core, factors } => {
            let mut v = vec![(format!("{prefix}/core"), core)];
            v.extend(factors.iter().enumerate().map(|(k, f)| (format!("{prefix}/factor.{k}"), f)));
            v
        }
        Payload::Tt { cores } | Payload::Tr { cores } => {
            cores.iter().enumerate().map(|(k, c)| (format!("{prefix}/core.{k}"), c)).collect()
        }
    }
}

fn patch_prefix(entry: &str, patch_id: usize) -> String {
    format!("{entry}@{patch_id}")
}

pub fn compressed_to_container(cm: &CompressedModel) -> Result<Container> {
    let mut raws = Vec::new();
    let mut entries = Vec::with_capacity(cm.entries.len());
    for e in &cm.entries {
        let mut patches = Vec::with_capacity(e.patches.len());
        for cp in &e.patches {
            let prefix = patch_prefix(&e.name, cp.patch.id);
            for (name, t) in part_names(&prefix, &cp.layer) {
                raws.push(to_raw(name, t, Dtype::F64));
            }
            patches.push(PatchMeta {
                patch: cp.patch.clone(),
                family: cp.layer.family(),
                mode_shape: cp.layer.mode_shape().to_vec(),
                row_mode_count: cp.layer.row_mode_count(),
            });
        }
        entries.push(CompressedEntryMeta {
            name: e.name.clone(),
            rows: e.rows,
            cols: e.cols,
            layer_index: e.layer_index,
            kind: e.kind,
            patches,
        });
    }
    let meta = CompressedMeta {
        format: COMPRESSED_FORMAT.into(),
        total_layers: cm.total_layers,
        provenance: cm.provenance.clone(),
        entries,
        plan: cm.plan.clone(),
        heal_log: cm.heal_log.clone(),
    };
    Ok(Container { entries: raws, metadata: Some(serde_json::to_vec(&meta)?) })
}

pub fn compressed_from_container(c: &Container) -> Result<CompressedModel> {
    let meta: CompressedMeta = metadata_of(c, COMPRESSED_FORMAT)?
        .ok_or_else(|| Error::Format("compressed container has no metadata".into()))?;
    let mut used = 0usize;
    let mut take = |name: String| -> Result<Tensor> {
        used += 1;
        let raw = c.get(&name).ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        to_tensor(raw)
    };
    let mut entries = Vec::with_capacity(meta.entries.len());
    for em in meta.entries {
        let mut patches = Vec::with_capacity(em.patches.len());
        for pm in em.patches {
            let prefix = patch_prefix(&em.name, pm.patch.id);
            let payload = match pm.family {
                Family::Dense => Payload::Dense { matrix: take(format!("{prefix}/matrix"))? },
                Family::Tucker => Payload::Tucker {
                    core: take(format!("{prefix}/core"))?,
                    factors: (0..pm.mode_shape.len())
                        .map(|k| take(format!("{prefix}/factor.{k}")))
                        .collect::<Result<_>>()?,
                },
                Family::Tt | Family::Tr => {
                    let cores = (0..pm.mode_shape.len())
                        .map(|k| take(format!("{prefix}/core.{k}")))
                        .collect::<Result<_>>()?;
                    if pm.family == Family::Tt {
                        Payload::Tt { cores }
                    } else {
                        Payload::Tr { cores }
                    }
                }
            };
            let layer = CompressedLayer::from_parts(pm.mode_shape, pm.row_mode_count, payload)?;
            patches.push(CompressedPatch { patch: pm.patch, layer });
        }
        entries.push(CompressedEntry {
            name: em.name,
            rows: em.rows,
            cols: em.cols,
            layer_index: em.layer_index,
            kind: em.kind,
            patches,
        });
    }
    if used != c.entries.len() {
        return Err(Error::Format(format!(
            "compressed container has {} tensors, metadata references {}",
            c.entries.len(),
            used
        )));
    }
    Ok(CompressedModel {
        entries,
        plan: meta.plan,
        heal_log: meta.heal_log,
        total_layers: meta.total_layers,
        provenance: meta.provenance,
    })
}

pub fn read_compressed(path: &Path) -> Result<CompressedModel> {
    compressed_from_container(&Container::read(path)?)
}

pub fn write_compressed(cm: &CompressedModel, path: &Path) -> Result<()> {
    compressed_to_container(cm)?.write(path)
}
