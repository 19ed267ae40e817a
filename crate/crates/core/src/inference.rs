//! Factor-form application of compressed layers.
//!
//! A layer applied to a batch `x` (`cols × batch`) is a small tensor network:
//! the layer's factors plus `x` viewed as `(column modes…, batch)`. Every
//! pairwise contraction order is enumerated and the cheapest is executed.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decomp::{CompressedLayer, Family, Payload};
use crate::error::{bail, Result};
use crate::pipeline::CompressedModel;
use crate::tensor::{contract_counted, Tensor};

const MAX_OPERANDS: usize = 6;

/// Labelled operands of a layer-apply network. Operand 0 is the batch.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Network {
    pub label_sizes: Vec<usize>,
    pub operands: Vec<Vec<usize>>,
    pub output: Vec<usize>,
    pub batch_label: usize,
}

impl Network {
    pub fn of(layer: &CompressedLayer, batch: usize) -> Self {
        let shape = layer.mode_shape();
        let d = shape.len();
        let p = layer.row_mode_count();
        // labels 0..d are the modes, then bonds, then the batch
        let mut label_sizes = shape.to_vec();
        let mut operands = Vec::new();
        match layer.payload() {
            Payload::Dense { .. } => {
                operands.push(vec![0, 1]);
            }
            Payload::Tucker { core, .. } => {
                let bonds: Vec<usize> = (0..d).map(|k| d + k).collect();
                label_sizes.extend_from_slice(core.shape());
                for k in 0..d {
                    operands.push(vec![k, bonds[k]]);
                }
                operands.push(bonds);
            }
            Payload::Tt { cores } | Payload::Tr { cores } => {
                label_sizes.extend(cores.iter().map(|c| c.shape()[0]));
                for k in 0..d {
                    operands.push(vec![d + k, k, d + (k + 1) % d]);
                }
            }
        }
        let (row_labels, col_labels): (Vec<usize>, Vec<usize>) = match layer.payload() {
            Payload::Dense { .. } => (vec![0], vec![1]),
            _ => ((0..p).collect(), (p..d).collect()),
        };
        let batch_label = label_sizes.len();
        label_sizes.push(batch);
        let mut x = col_labels;
        x.push(batch_label);
        operands.insert(0, x);
        let mut output = row_labels;
        output.push(batch_label);
        Self {
            label_sizes,
            operands,
            output,
            batch_label,
        }
    }

    fn mask(labels: &[usize]) -> u64 {
        labels.iter().fold(0, |m, &l| m | (1 << l))
    }

    fn size(&self, mask: u64) -> u64 {
        (0..self.label_sizes.len())
            .filter(|&l| mask & (1 << l) != 0)
            .map(|l| self.label_sizes[l] as u64)
            .product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionStep {
    /// Positions in the current operand list; the result replaces `lhs` and
    /// `rhs` is removed.
    pub lhs: usize,
    pub rhs: usize,
    /// Bitmask over network labels summed in this step.
    pub contracted: u64,
    pub flops: u64,
    pub result_size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionPlan {
    pub network: Network,
    pub steps: Vec<ContractionStep>,
    pub predicted_flops: u64,
    /// Largest intermediate result, in scalars.
    pub largest_intermediate: u64,
    /// Largest intermediate that does not carry the batch mode.
    pub largest_weight_intermediate: u64,
}

/// Simulates `order` on the network's label sets.
fn simulate(net: &Network, order: &[(usize, usize)]) -> ContractionPlan {
    let mut ops: Vec<u64> = net.operands.iter().map(|o| Network::mask(o)).collect();
    let out = Network::mask(&net.output);
    let batch = 1u64 << net.batch_label;
    let mut steps = Vec::with_capacity(order.len());
    let (mut total, mut largest, mut largest_weight) = (0u64, 0u64, 0u64);
    for &(i, j) in order {
        let (a, b) = (ops[i], ops[j]);
        let others = ops
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i && k != j)
            .fold(out, |m, (_, &o)| m | o);
        let union = a | b;
        let result = union & others;
        let flops = 2 * net.size(union);
        let result_size = net.size(result);
        total += flops;
        largest = largest.max(result_size);
        if result & batch == 0 {
            largest_weight = largest_weight.max(result_size);
        }
        steps.push(ContractionStep {
            lhs: i,
            rhs: j,
            contracted: union & !others,
            flops,
            result_size,
        });
        ops[i] = result;
        ops.remove(j);
    }
    ContractionPlan {
        network: net.clone(),
        steps,
        predicted_flops: total,
        largest_intermediate: largest,
        largest_weight_intermediate: largest_weight,
    }
}

fn search(
    net: &Network,
    ops: &[u64],
    out: u64,
    prefix: &mut Vec<(usize, usize)>,
    cost: u64,
    best: &mut Option<(u64, Vec<(usize, usize)>)>,
) {
    if best.as_ref().is_some_and(|(c, _)| cost >= *c) && ops.len() > 1 {
        return;
    }
    if ops.len() == 1 {
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            *best = Some((cost, prefix.clone()));
        }
        return;
    }
    let n = ops.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (ops[i], ops[j]);
            let others = ops
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i && k != j)
                .fold(out, |m, (_, &o)| m | o);
            let step = 2 * net.size(a | b);
            let mut next = ops.to_vec();
            next[i] = (a | b) & others;
            next.remove(j);
            prefix.push((i, j));
            search(net, &next, out, prefix, cost + step, best);
            prefix.pop();
        }
    }
}

/// The left-to-right order: fold operands in list order.
pub fn baseline_plan(net: &Network) -> ContractionPlan {
    let order: Vec<(usize, usize)> = (1..net.operands.len()).map(|_| (0, 1)).collect();
    simulate(net, &order)
}

/// Cheapest pairwise contraction order by exhaustive search; ties go to the
/// lexicographically smallest step sequence.
pub fn plan_network(net: &Network) -> ContractionPlan {
    if net.operands.len() > MAX_OPERANDS {
        log::warn!("{} operands; using the left-to-right order", net.operands.len());
        return baseline_plan(net);
    }
    let ops: Vec<u64> = net.operands.iter().map(|o| Network::mask(o)).collect();
    let out = Network::mask(&net.output);
    let mut best = None;
    search(net, &ops, out, &mut Vec::new(), 0, &mut best);
    let (_, order) = best.expect("at least one order");
    simulate(net, &order)
}

pub fn plan_contraction(layer: &CompressedLayer, batch: usize) -> ContractionPlan {
    plan_network(&Network::of(layer, batch))
}

/// Counters gathered while applying a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyStats {
    pub multiply_adds: u64,
    pub largest_intermediate: u64,
}

fn operand_tensors(layer: &CompressedLayer, x: &Tensor, net: &Network) -> Result<Vec<Tensor>> {
    let x_shape: Vec<usize> = net.operands[0].iter().map(|&l| net.label_sizes[l]).collect();
    let mut ops = vec![x.reshape(&x_shape)?];
    match layer.payload() {
        Payload::Dense { matrix } => ops.push(matrix.clone()),
        Payload::Tucker { core, factors } => {
            ops.extend(factors.iter().cloned());
            ops.push(core.clone());
        }
        Payload::Tt { cores } | Payload::Tr { cores } => ops.extend(cores.iter().cloned()),
    }
    Ok(ops)
}

/// Executes `plan` on `x`, returning `layer · x` (`rows × batch`).
pub fn apply_with_plan(layer: &CompressedLayer, x: &Tensor, plan: &ContractionPlan) -> Result<(Tensor, ApplyStats)> {
    if x.rank() != 2 || x.rows() != layer.cols() {
        bail!(Shape, "layer with {} columns applied to {:?}", layer.cols(), x.shape());
    }
    let net = &plan.network;
    if net.label_sizes[net.batch_label] != x.cols() {
        bail!(Shape, "plan for batch {} applied to batch {}", net.label_sizes[net.batch_label], x.cols());
    }
    let mut tensors = operand_tensors(layer, x, net)?;
    let mut labels: Vec<Vec<usize>> = net.operands.clone();
    let mut stats = ApplyStats::default();
    for step in &plan.steps {
        let (i, j) = (step.lhs, step.rhs);
        let a_modes: Vec<usize> = (0..labels[i].len())
            .filter(|&m| step.contracted & (1 << labels[i][m]) != 0)
            .collect();
        let b_modes: Vec<usize> = a_modes
            .iter()
            .map(|&m| {
                labels[j]
                    .iter()
                    .position(|&l| l == labels[i][m])
                    .expect("contracted labels are shared")
            })
            .collect();
        let (t, madds) = contract_counted(&tensors[i], &a_modes, &tensors[j], &b_modes)?;
        let mut result_labels: Vec<usize> = labels[i]
            .iter()
            .filter(|&&l| step.contracted & (1 << l) == 0)
            .copied()
            .collect();
        result_labels.extend(labels[j].iter().filter(|&&l| step.contracted & (1 << l) == 0));
        stats.multiply_adds += madds;
        stats.largest_intermediate = stats.largest_intermediate.max(t.len() as u64);
        tensors[i] = t;
        labels[i] = result_labels;
        tensors.remove(j);
        labels.remove(j);
    }
    let perm: Vec<usize> = net
        .output
        .iter()
        .map(|l| labels[0].iter().position(|m| m == l).expect("output label survives"))
        .collect();
    let y = tensors[0].permute(&perm)?.into_shape(&[layer.rows(), x.cols()])?;
    Ok((y, stats))
}

/// `layer · x` without forming the dense matrix.
pub fn apply_compressed(layer: &CompressedLayer, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() != layer.cols() {
        bail!(Shape, "layer with {} columns applied to {:?}", layer.cols(), x.shape());
    }
    Ok(apply_with_plan(layer, x, &plan_contraction(layer, x.cols()))?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub dense_flops: u64,
    pub structured_flops: u64,
    pub by_family: BTreeMap<Family, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub batch: usize,
    pub dense_flops: u64,
    pub structured_flops: u64,
    /// `dense_flops / structured_flops`.
    pub speedup_ratio: f64,
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn structured_fraction(&self) -> f64 {
        self.structured_flops as f64 / self.dense_flops as f64
    }
}

/// Per-entry FLOPs of applying every patch to its slice of a batch, against
/// the dense `2·m·n·batch`.
pub fn flop_report(cm: &CompressedModel, batch: usize) -> FlopReport {
    let mut cache: BTreeMap<Network, u64> = BTreeMap::new();
    let mut layers = Vec::with_capacity(cm.entries.len());
    for e in &cm.entries {
        let mut by_family = BTreeMap::new();
        let mut structured = 0;
        for cp in &e.patches {
            let net = Network::of(&cp.layer, batch);
            let flops = *cache
                .entry(net)
                .or_insert_with_key(|net| plan_network(net).predicted_flops);
            structured += flops;
            *by_family.entry(cp.layer.family()).or_insert(0) += flops;
        }
        layers.push(LayerFlops {
            name: e.name.clone(),
            dense_flops: 2 * (e.rows * e.cols * batch) as u64,
            structured_flops: structured,
            by_family,
        });
    }
    let dense: u64 = layers.iter().map(|l| l.dense_flops).sum();
    let structured: u64 = layers.iter().map(|l| l.structured_flops).sum();
    FlopReport {
        batch,
        dense_flops: dense,
        structured_flops: structured,
        speedup_ratio: if structured == 0 { 0.0 } else { dense as f64 / structured as f64 },
        layers,
    }
}
