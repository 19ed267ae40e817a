//! Global parameter-budget allocation over patches.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::decomp::{matrix_mode_shape, select_ranks, Family, RankSpec};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::model::SubmoduleKind;
use crate::sensitivity::{Patch, SensitivityRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Uniform,
    Sensitivity,
    SensitivityMixed,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Uniform => "uniform",
            PlanMode::Sensitivity => "sensitivity",
            PlanMode::SensitivityMixed => "sensitivity_mixed",
        }
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub mode: PlanMode,
    /// Family used by the `uniform` and `sensitivity` modes.
    pub single_family: Family,
    pub ratio_grid: Vec<f64>,
    pub degradation_cap: f64,
    pub exclude_embeddings: bool,
    /// Resolution of the uniform-mode ratio scan.
    pub uniform_step: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mode: PlanMode::SensitivityMixed,
            single_family: Family::Tt,
            ratio_grid: vec![0.5, 0.35, 0.25, 0.15],
            degradation_cap: 0.02,
            exclude_embeddings: true,
            uniform_step: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    KeepDense,
    Compress {
        family: Family,
        ranks: RankSpec,
        ratio: f64,
        params: usize,
        predicted_degradation: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub patch: Patch,
    pub decision: Decision,
}

impl PlanEntry {
    pub fn params(&self) -> usize {
        match &self.decision {
            Decision::KeepDense => self.patch.size(),
            Decision::Compress { params, .. } => *params,
        }
    }

    pub fn predicted_degradation(&self) -> f64 {
        match &self.decision {
            Decision::KeepDense => 0.0,
            Decision::Compress {
                predicted_degradation, ..
            } => *predicted_degradation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub mode: PlanMode,
    pub target_ratio: f64,
    pub dense_params: usize,
    pub achieved_params: usize,
    pub entries: Vec<PlanEntry>,
}

impl CompressionPlan {
    /// 1.0 for an empty plan.
    pub fn achieved_ratio(&self) -> f64 {
        if self.dense_params == 0 {
            return 1.0;
        }
        self.achieved_params as f64 / self.dense_params as f64
    }

    pub fn predicted_degradation(&self) -> f64 {
        self.entries.iter().map(PlanEntry::predicted_degradation).sum()
    }

    /// Every patch kept dense.
    pub fn all_dense(patches: &[Patch], mode: PlanMode) -> Self {
        let entries: Vec<PlanEntry> = patches
            .iter()
            .map(|p| PlanEntry {
                patch: p.clone(),
                decision: Decision::KeepDense,
            })
            .collect();
        let dense = patches.iter().map(Patch::size).sum();
        Self {
            mode,
            target_ratio: 1.0,
            dense_params: dense,
            achieved_params: dense,
            entries,
        }
    }
}

/// One candidate compression of a patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub family: Family,
    pub ratio: f64,
    pub params: usize,
    pub degradation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub patch_id: usize,
    pub dense_params: usize,
    pub candidates: Vec<Candidate>,
}

/// Result of [`allocate_greedy`]: per patch, the chosen candidate index
/// (`None` = dense).
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub choice: Vec<Option<usize>>,
    pub total_params: usize,
    pub total_degradation: f64,
}

/// Drops candidates that do not save parameters, and candidates dominated by
/// another with no more parameters and no more degradation.
pub fn prune_dominated(options: &PatchOptions) -> PatchOptions {
    let c = &options.candidates;
    let keep: Vec<Candidate> = c
        .iter()
        .enumerate()
        .filter(|&(i, a)| {
            a.params < options.dense_params
                && !c.iter().enumerate().any(|(j, b)| {
                    j != i
                        && b.params <= a.params
                        && b.degradation <= a.degradation
                        && (b.params < a.params
                            || b.degradation < a.degradation
                            || (b.family, a.ratio, j) < (a.family, b.ratio, i))
                })
        })
        .map(|(_, a)| a.clone())
        .collect();
    PatchOptions {
        patch_id: options.patch_id,
        dense_params: options.dense_params,
        candidates: keep,
    }
}

/// Step priority: parameters saved per unit of added degradation, with
/// free steps first (larger saving first).
#[derive(Clone, Copy, PartialEq)]
struct Priority {
    free: bool,
    value: f64,
}

impl Priority {
    fn new(saved: usize, added: f64) -> Self {
        if added <= 0.0 {
            Self {
                free: true,
                value: saved as f64,
            }
        } else {
            Self {
                free: false,
                value: saved as f64 / added,
            }
        }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        self.free
            .cmp(&other.free)
            .then_with(|| self.value.total_cmp(&other.value))
    }
}

fn option_state(o: &PatchOptions, choice: Option<usize>) -> (usize, f64) {
    match choice {
        None => (o.dense_params, 0.0),
        Some(k) => (o.candidates[k].params, o.candidates[k].degradation),
    }
}

/// The greedy step sequence from all dense to fully compressed, as
/// `(patch, candidate)` pairs. Does not depend on the budget.
fn greedy_path(pruned: &[PatchOptions]) -> Vec<(usize, usize)> {
    let mut choice: Vec<Option<usize>> = vec![None; pruned.len()];
    let mut path = Vec::new();
    loop {
        let mut best: Option<(Priority, usize, usize)> = None;
        for (i, opt) in pruned.iter().enumerate() {
            let (p_cur, d_cur) = option_state(opt, choice[i]);
            for (k, c) in opt.candidates.iter().enumerate() {
                if c.params >= p_cur {
                    continue;
                }
                let pr = Priority::new(p_cur - c.params, c.degradation - d_cur);
                let better = match &best {
                    None => true,
                    Some((bp, bi, bk)) => match pr.cmp(bp) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => {
                            let b = &pruned[*bi].candidates[*bk];
                            (opt.patch_id, c.family)
                                .cmp(&(pruned[*bi].patch_id, b.family))
                                .then_with(|| b.ratio.total_cmp(&c.ratio))
                                == Ordering::Less
                        }
                    },
                };
                if better {
                    best = Some((pr, i, k));
                }
            }
        }
        let Some((_, i, k)) = best else { return path };
        choice[i] = Some(k);
        path.push((i, k));
    }
}

/// `(patch, new choice, extra params, gain)`.
type Upgrade = (usize, Option<usize>, usize, f64);

/// Moves that lower a patch's degradation at the cost of extra parameters.
fn upgrades(pruned: &[PatchOptions], choice: &[Option<usize>], slack: usize) -> Vec<Upgrade> {
    let mut out = Vec::new();
    for (i, opt) in pruned.iter().enumerate() {
        let (p_cur, d_cur) = option_state(opt, choice[i]);
        let moves = core::iter::once((None, opt.dense_params, 0.0))
            .chain(opt.candidates.iter().enumerate().map(|(k, c)| (Some(k), c.params, c.degradation)));
        for (k, params, deg) in moves {
            if deg < d_cur && params > p_cur && params - p_cur <= slack {
                out.push((i, k, params - p_cur, d_cur - deg));
            }
        }
    }
    out
}

/// Largest total gain from upgrades whose extra parameters fit in `slack`,
/// at most one per patch (exact multiple-choice knapsack). Applies the
/// chosen moves to `choice` and returns the gain.
fn reclaim(pruned: &[PatchOptions], choice: &mut [Option<usize>], slack: usize) -> f64 {
    let moves = upgrades(pruned, choice, slack);
    if moves.is_empty() {
        return 0.0;
    }
    let mut groups: Vec<&[Upgrade]> = Vec::new();
    let mut rest = &moves[..];
    while let Some(first) = rest.first() {
        let n = rest.iter().take_while(|m| m.0 == first.0).count();
        groups.push(&rest[..n]);
        rest = &rest[n..];
    }
    let mut gain = vec![0.0; slack + 1];
    // picks[g][w]: move taken from group g at capacity w
    let mut picks: Vec<Vec<Option<u8>>> = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut next = gain.clone();
        let mut pick = vec![None; slack + 1];
        for (m, &(_, _, extra, value)) in g.iter().enumerate() {
            for w in extra..=slack {
                let v = gain[w - extra] + value;
                if v > next[w] {
                    next[w] = v;
                    pick[w] = Some(m as u8);
                }
            }
        }
        gain = next;
        picks.push(pick);
    }
    let best = gain[slack];
    let mut w = slack;
    for (g, pick) in groups.iter().zip(&picks).rev() {
        if let Some(m) = pick[w] {
            let (i, k, extra, _) = g[m as usize];
            choice[i] = k;
            w -= extra;
        }
    }
    best
}

/// Greedy marginal allocation: starting all dense, repeatedly applies the
/// step with the best saved-parameters / added-degradation ratio until the
/// total fits in `budget`. Ties go to the lower patch id, then family order
/// (Tucker, TT, TR), then the larger ratio. Candidates are first pruned
/// with [`prune_dominated`].
///
/// The slack left by the final step is then spent on an exact choice of
/// upgrades (moves to less damaging options). The same reclaim is applied to
/// every later state of the greedy sequence with the slack it would have
/// under the tightest budget that reaches it, and the best result is kept.
/// This makes the returned degradation non-increasing in `budget`.
pub fn allocate_greedy(options: &[PatchOptions], budget: usize) -> Result<Allocation> {
    let pruned: Vec<PatchOptions> = options.iter().map(prune_dominated).collect();
    let path = greedy_path(&pruned);
    let mut choice: Vec<Option<usize>> = vec![None; pruned.len()];
    let mut total: usize = pruned.iter().map(|o| o.dense_params).sum();
    let mut degradation = 0.0;
    let mut step = 0;
    while total > budget {
        let Some(&(i, k)) = path.get(step) else {
            let dense: usize = pruned.iter().map(|o| o.dense_params).sum();
            return Err(Error::UnreachableTarget {
                target: budget as f64 / dense as f64,
                best_ratio: total as f64 / dense as f64,
            });
        };
        let (p_cur, d_cur) = option_state(&pruned[i], choice[i]);
        let c = &pruned[i].candidates[k];
        total = total - p_cur + c.params;
        degradation += c.degradation - d_cur;
        choice[i] = Some(k);
        step += 1;
    }

    let mut best_choice = choice.clone();
    let mut best = degradation - reclaim(&pruned, &mut best_choice, budget - total);
    for &(i, k) in &path[step..] {
        let (p_cur, d_cur) = option_state(&pruned[i], choice[i]);
        let c = &pruned[i].candidates[k];
        let slack = p_cur - c.params - 1;
        total = total - p_cur + c.params;
        degradation += c.degradation - d_cur;
        choice[i] = Some(k);
        let bound = upgrades(&pruned, &choice, slack)
            .iter()
            .map(|m| m.3 / m.2 as f64)
            .fold(0.0, f64::max)
            * slack as f64;
        if degradation - bound.min(degradation) >= best {
            continue;
        }
        let mut candidate = choice.clone();
        let value = degradation - reclaim(&pruned, &mut candidate, slack);
        if value < best {
            best = value;
            best_choice = candidate;
        }
    }
    let choice = best_choice;
    let total: usize = pruned.iter().zip(&choice).map(|(o, &c)| option_state(o, c).0).sum();

    // map back to indices in the unpruned candidate lists
    let mapped: Vec<Option<usize>> = choice
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.map(|k| {
                let chosen = &pruned[i].candidates[k];
                options[i]
                    .candidates
                    .iter()
                    .position(|o| o == chosen)
                    .expect("pruned from these candidates")
            })
        })
        .collect();
    let total_degradation = mapped
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|k| options[i].candidates[k].degradation))
        .sum();
    Ok(Allocation {
        choice: mapped,
        total_params: total,
        total_degradation,
    })
}

type RankCache = BTreeMap<(Family, Vec<usize>, usize), Option<RankSpec>>;

fn cached_ranks(cache: &mut RankCache, shape: &[usize], family: Family, budget: usize) -> Option<RankSpec> {
    cache
        .entry((family, shape.to_vec(), budget))
        .or_insert_with(|| select_ranks(shape, family, budget).ok())
        .clone()
}

fn eligible(p: &Patch, cfg: &PlannerConfig) -> bool {
    !(cfg.exclude_embeddings && p.kind == SubmoduleKind::Embedding) && matrix_mode_shape(p.rows(), p.cols()).0.len() >= 2
}

fn budget_for(ratio: f64, size: usize) -> usize {
    math::floor(ratio * size as f64) as usize
}

/// Builds a plan meeting `target_ratio` of the dense parameter count.
///
/// `records[i]` must describe `patches[i]`. In the sensitivity modes a patch
/// whose degradation exceeds the cap at every candidate is kept dense.
pub fn allocate(
    records: &[SensitivityRecord],
    patches: &[Patch],
    target_ratio: f64,
    cfg: &PlannerConfig,
) -> Result<CompressionPlan> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        bail!(InvalidArgument, "target ratio {} outside (0, 1]", target_ratio);
    }
    if records.len() != patches.len() || records.iter().zip(patches).any(|(r, p)| r.patch_id != p.id) {
        bail!(PlanMismatch, "sensitivity records do not match the patches");
    }
    if patches.is_empty() {
        return Err(Error::EmptyModel);
    }
    match cfg.mode {
        PlanMode::Uniform => allocate_uniform(records, patches, target_ratio, cfg),
        PlanMode::Sensitivity | PlanMode::SensitivityMixed => {
            allocate_sensitivity(records, patches, target_ratio, cfg)
        }
    }
}

fn allocate_sensitivity(
    records: &[SensitivityRecord],
    patches: &[Patch],
    target_ratio: f64,
    cfg: &PlannerConfig,
) -> Result<CompressionPlan> {
    let families: Vec<Family> = match cfg.mode {
        PlanMode::SensitivityMixed => Family::NETWORKS.to_vec(),
        _ => vec![cfg.single_family],
    };
    let mut cache = RankCache::new();
    let mut specs: Vec<Vec<RankSpec>> = Vec::with_capacity(patches.len());
    let mut options = Vec::with_capacity(patches.len());
    let mut pinned = 0usize;
    for (p, r) in patches.iter().zip(records) {
        let mut candidates = Vec::new();
        let mut patch_specs = Vec::new();
        if eligible(p, cfg) {
            let (shape, _) = matrix_mode_shape(p.rows(), p.cols());
            for &family in &families {
                for &ratio in &cfg.ratio_grid {
                    let Some(degradation) = r.degradation(family, ratio) else {
                        continue;
                    };
                    let Some(spec) = cached_ranks(&mut cache, &shape, family, budget_for(ratio, p.size())) else {
                        continue;
                    };
                    let params = spec.param_count(&shape);
                    if params >= p.size() {
                        continue;
                    }
                    candidates.push(Candidate {
                        family,
                        ratio,
                        params,
                        degradation,
                    });
                    patch_specs.push(spec);
                }
            }
            if !candidates.is_empty() && candidates.iter().all(|c| c.degradation > cfg.degradation_cap) {
                candidates.clear();
                patch_specs.clear();
                pinned += 1;
            }
        }
        options.push(PatchOptions {
            patch_id: p.id,
            dense_params: p.size(),
            candidates,
        });
        specs.push(patch_specs);
    }
    if pinned > 0 {
        log::info!("{} fragile patches pinned dense", pinned);
    }

    let dense: usize = patches.iter().map(Patch::size).sum();
    let budget = budget_for(target_ratio, dense);
    let alloc = allocate_greedy(&options, budget).map_err(|e| match e {
        Error::UnreachableTarget { best_ratio, .. } => Error::UnreachableTarget {
            target: target_ratio,
            best_ratio,
        },
        e => e,
    })?;

    let entries = patches
        .iter()
        .enumerate()
        .map(|(i, p)| PlanEntry {
            patch: p.clone(),
            decision: match alloc.choice[i] {
                None => Decision::KeepDense,
                Some(k) => {
                    let c = &options[i].candidates[k];
                    Decision::Compress {
                        family: c.family,
                        ranks: specs[i][k].clone(),
                        ratio: c.ratio,
                        params: c.params,
                        predicted_degradation: c.degradation,
                    }
                }
            },
        })
        .collect();
    Ok(CompressionPlan {
        mode: cfg.mode,
        target_ratio,
        dense_params: dense,
        achieved_params: alloc.total_params,
        entries,
    })
}

/// Piecewise-linear degradation over ratio through `(1, 0)` and the grid
/// predictions, held constant below the smallest grid ratio.
fn interpolate(record: &SensitivityRecord, family: Family, ratio: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = record
        .predictions
        .iter()
        .filter(|h| h.family == family)
        .map(|h| (h.ratio, h.degradation))
        .collect();
    pts.push((1.0, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if ratio <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if ratio <= x1 {
            return if x1 == x0 { y1 } else { y0 + (y1 - y0) * (ratio - x0) / (x1 - x0) };
        }
    }
    0.0
}

/// One family at one ratio `ρ` on every eligible patch, with `ρ` the
/// largest multiple of `uniform_step` whose total fits the target. Patches
/// whose ranks at `ρ` would not save parameters stay dense.
fn allocate_uniform(
    records: &[SensitivityRecord],
    patches: &[Patch],
    target_ratio: f64,
    cfg: &PlannerConfig,
) -> Result<CompressionPlan> {
    if !(cfg.uniform_step > 0.0 && cfg.uniform_step < 1.0) {
        bail!(InvalidArgument, "uniform step {} outside (0, 1)", cfg.uniform_step);
    }
    let family = cfg.single_family;
    let dense: usize = patches.iter().map(Patch::size).sum();
    let budget = budget_for(target_ratio, dense);
    let mut cache = RankCache::new();

    let choose = |cache: &mut RankCache, p: &Patch, rho: f64| -> Option<(RankSpec, usize)> {
        if !eligible(p, cfg) {
            return None;
        }
        let (shape, _) = matrix_mode_shape(p.rows(), p.cols());
        let spec = cached_ranks(cache, &shape, family, budget_for(rho, p.size()))?;
        let params = spec.param_count(&shape);
        (params < p.size()).then_some((spec, params))
    };

    let steps = math::floor(1.0 / cfg.uniform_step + 0.5) as usize;
    let mut best_total = dense;
    let mut found = None;
    for s in 0..=steps {
        let rho = 1.0 - s as f64 * cfg.uniform_step;
        if rho <= 0.0 {
            break;
        }
        let total: usize = patches
            .iter()
            .map(|p| choose(&mut cache, p, rho).map_or(p.size(), |(_, n)| n))
            .sum();
        best_total = best_total.min(total);
        if total <= budget {
            found = Some(rho);
            break;
        }
    }
    let Some(rho) = found else {
        return Err(Error::UnreachableTarget {
            target: target_ratio,
            best_ratio: best_total as f64 / dense as f64,
        });
    };

    let mut achieved = 0;
    let entries = patches
        .iter()
        .zip(records)
        .map(|(p, r)| {
            let decision = match choose(&mut cache, p, rho) {
                None => Decision::KeepDense,
                Some((ranks, params)) => Decision::Compress {
                    family,
                    ranks,
                    ratio: rho,
                    params,
                    predicted_degradation: interpolate(r, family, rho),
                },
            };
            let entry = PlanEntry {
                patch: p.clone(),
                decision,
            };
            achieved += entry.params();
            entry
        })
        .collect();
    Ok(CompressionPlan {
        mode: PlanMode::Uniform,
        target_ratio,
        dense_params: dense,
        achieved_params: achieved,
        entries,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub patches: usize,
    pub dense_params: usize,
    pub params: usize,
    pub predicted_degradation: f64,
}

impl GroupSummary {
    fn add(&mut self, e: &PlanEntry) {
        self.patches += 1;
        self.dense_params += e.patch.size();
        self.params += e.params();
        self.predicted_degradation += e.predicted_degradation();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub total: GroupSummary,
    pub dense_patches: usize,
    pub by_family: BTreeMap<Family, GroupSummary>,
    pub by_kind: BTreeMap<SubmoduleKind, GroupSummary>,
}

pub fn plan_summary(plan: &CompressionPlan) -> PlanSummary {
    let mut s = PlanSummary::default();
    for e in &plan.entries {
        s.total.add(e);
        let family = match &e.decision {
            Decision::KeepDense => {
                s.dense_patches += 1;
                Family::Dense
            }
            Decision::Compress { family, .. } => *family,
        };
        s.by_family.entry(family).or_default().add(e);
        s.by_kind.entry(e.patch.kind).or_default().add(e);
    }
    s
}
