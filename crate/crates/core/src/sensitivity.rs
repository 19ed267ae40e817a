//! Patch partitioning, sensitivity features, probe measurements and the
//! degradation predictor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decomp::{compress_matrix, matrix_mode_shape, select_ranks, Family};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::model::{Calibration, ModelContainer, SubmoduleKind};
use crate::rng::{derive_seed, gaussian, seeded};
use crate::svd::svd;
use crate::tensor::{matmul_raw, Tensor};

pub const FEATURE_COUNT: usize = 12;
const HIDDEN: usize = 16;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "stable_rank",
    "top10pct_energy",
    "log_condition",
    "spectral_entropy",
    "mean_abs",
    "max_abs",
    "frac_small",
    "row_norm_cv",
    "normalized_layer_index",
    "is_attention_proj",
    "is_ffn",
    "is_embedding",
];

/// A rectangular tile of one model entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub id: usize,
    pub layer_name: String,
    pub entry_index: usize,
    pub layer_index: usize,
    pub kind: SubmoduleKind,
    /// Half-open `[start, end)`.
    pub row_range: (usize, usize),
    /// Half-open `[start, end)`.
    pub col_range: (usize, usize),
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.row_range.1 - self.row_range.0
    }

    pub fn cols(&self) -> usize {
        self.col_range.1 - self.col_range.0
    }

    pub fn size(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Copies this patch out of its parent matrix.
    pub fn extract(&self, parent: &Tensor) -> Tensor {
        let (r0, c0) = (self.row_range.0, self.col_range.0);
        let (rows, cols) = (self.rows(), self.cols());
        let pc = parent.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let start = (r0 + i) * pc + c0;
            data.extend_from_slice(&parent.data()[start..start + cols]);
        }
        Tensor::from_parts(vec![rows, cols], data)
    }

    /// Rows of a layer input `x` (`parent cols × samples`) feeding this patch.
    pub fn inputs(&self, x: &Tensor) -> Tensor {
        let s = x.cols();
        let data = x.data()[self.col_range.0 * s..self.col_range.1 * s].to_vec();
        Tensor::from_parts(vec![self.cols(), s], data)
    }
}

/// Tiles every entry with `patch_rows × patch_cols` blocks in row-major tile
/// order; edge tiles may be smaller.
pub fn partition_patches(model: &ModelContainer, patch_rows: usize, patch_cols: usize) -> Result<Vec<Patch>> {
    if patch_rows < 16 || patch_cols < 16 {
        bail!(InvalidArgument, "patch size {}x{} below 16x16", patch_rows, patch_cols);
    }
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut patches = Vec::new();
    for (entry_index, e) in model.entries().iter().enumerate() {
        let (m, n) = (e.matrix.rows(), e.matrix.cols());
        for r in (0..m).step_by(patch_rows) {
            for c in (0..n).step_by(patch_cols) {
                patches.push(Patch {
                    id: patches.len(),
                    layer_name: e.name.clone(),
                    entry_index,
                    layer_index: e.layer_index,
                    kind: e.kind,
                    row_range: (r, (r + patch_rows).min(m)),
                    col_range: (c, (c + patch_cols).min(n)),
                });
            }
        }
    }
    Ok(patches)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|&n| n == name).map(|i| self.0[i])
    }
}

/// Spectral, magnitude and positional statistics of a patch. An all-zero
/// patch has zero spectral features and `frac_small = 1`.
pub fn extract_features(
    w: &Tensor,
    layer_index: usize,
    total_layers: usize,
    kind: SubmoduleKind,
) -> Result<FeatureVector> {
    if w.rank() != 2 || w.is_empty() {
        bail!(Shape, "features need a non-empty matrix, got {:?}", w.shape());
    }
    if !w.is_finite() {
        bail!(Numerics, "patch has non-finite entries");
    }
    let (m, n) = (w.rows(), w.cols());
    let s = svd(w)?.singular_values;
    let energy: f64 = s.iter().map(|x| x * x).sum();
    let sigma1 = s[0];
    let (mut stable_rank, mut top10, mut log_cond, mut entropy) = (0.0, 0.0, 0.0, 0.0);
    if energy > 0.0 {
        stable_rank = energy / (sigma1 * sigma1);
        let k = math::ceil(0.1 * m.min(n) as f64) as usize;
        top10 = s[..k].iter().map(|x| x * x).sum::<f64>() / energy;
        let tol = sigma1 * f64::EPSILON * m.max(n) as f64;
        let smallest = s.iter().rev().find(|&&x| x > tol).copied().unwrap_or(sigma1);
        log_cond = math::log10(sigma1 / smallest);
        entropy = s
            .iter()
            .map(|x| x * x / energy)
            .filter(|&p| p > 0.0)
            .map(|p| -p * math::ln(p))
            .sum::<f64>()
            .max(0.0);
    }

    let len = w.len() as f64;
    let mean_abs = w.data().iter().map(|x| x.abs()).sum::<f64>() / len;
    let max_abs = w.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let frac_small = if max_abs == 0.0 {
        1.0
    } else {
        w.data().iter().filter(|x| x.abs() < 1e-3 * max_abs).count() as f64 / len
    };

    let row_norms: Vec<f64> = (0..m)
        .map(|i| math::sqrt(w.data()[i * n..(i + 1) * n].iter().map(|x| x * x).sum()))
        .collect();
    let mean_norm = row_norms.iter().sum::<f64>() / m as f64;
    let row_norm_cv = if mean_norm > 0.0 {
        let var = row_norms.iter().map(|r| (r - mean_norm) * (r - mean_norm)).sum::<f64>() / m as f64;
        math::sqrt(var) / mean_norm
    } else {
        0.0
    };

    let position = if total_layers == 0 {
        0.0
    } else {
        layer_index as f64 / total_layers as f64
    };
    let one_hot = |k: SubmoduleKind| if kind == k { 1.0 } else { 0.0 };
    Ok(FeatureVector([
        stable_rank,
        top10,
        log_cond,
        entropy,
        mean_abs,
        max_abs,
        frac_small,
        row_norm_cv,
        position,
        one_hot(SubmoduleKind::AttentionProj),
        one_hot(SubmoduleKind::Ffn),
        one_hot(SubmoduleKind::Embedding),
    ]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub patch_id: usize,
    pub family: Family,
    pub target_ratio: f64,
    pub measured_degradation: f64,
}

/// Relative output deviation `‖(W − Ŵ)X‖_F / ‖WX‖_F`, or `None` when
/// `‖WX‖_F = 0`.
pub fn output_deviation(w: &Tensor, w_hat: &Tensor, x: &Tensor) -> Option<f64> {
    let (m, n, s) = (w.rows(), w.cols(), x.cols());
    let wx = matmul_raw(w.data(), x.data(), m, n, s);
    let diff = w.sub(w_hat);
    let dx = matmul_raw(diff.data(), x.data(), m, n, s);
    let reference: f64 = wx.iter().map(|v| v * v).sum();
    if reference == 0.0 {
        return None;
    }
    Some(math::sqrt(dx.iter().map(|v| v * v).sum::<f64>() / reference))
}

/// Compresses `w` with each family at each budget `⌊ratio · size⌋` and
/// measures the output deviation on `x` (`cols × samples`, at least 8
/// samples). Infeasible budgets and degenerate outputs are skipped.
pub fn probe_patch(
    w: &Tensor,
    patch_id: usize,
    families: &[Family],
    ratio_grid: &[f64],
    x: &Tensor,
    hooi_iters: usize,
) -> Result<Vec<ProbeRecord>> {
    if x.rank() != 2 || x.rows() != w.cols() {
        bail!(Shape, "calibration {:?} incompatible with patch {:?}", x.shape(), w.shape());
    }
    if x.cols() < 8 {
        bail!(InvalidArgument, "probing needs at least 8 samples, got {}", x.cols());
    }
    let (shape, _) = matrix_mode_shape(w.rows(), w.cols());
    let mut out = Vec::new();
    for &family in families {
        for &ratio in ratio_grid {
            if !(ratio > 0.0 && ratio <= 1.0) {
                bail!(InvalidArgument, "ratio {} outside (0, 1]", ratio);
            }
            let budget = math::floor(ratio * w.len() as f64) as usize;
            let spec = match select_ranks(&shape, family, budget) {
                Ok(spec) => spec,
                Err(e) => {
                    log::info!("patch {}: skipping {} at ratio {}: {}", patch_id, family, ratio, e);
                    continue;
                }
            };
            let layer = compress_matrix(w, &spec, hooi_iters)?;
            match output_deviation(w, &layer.to_matrix(), x) {
                Some(d) => out.push(ProbeRecord {
                    patch_id,
                    family,
                    target_ratio: ratio,
                    measured_degradation: d,
                }),
                None => log::info!("patch {}: zero output, probe {} at {} skipped", patch_id, family, ratio),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadKey {
    pub family: Family,
    pub ratio: f64,
}

/// Supervision for [`train_predictor`]: one row per probed patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub heads: Vec<HeadKey>,
    pub features: Vec<FeatureVector>,
    /// `targets[i][h]`: measured degradation of row `i` under head `h`.
    pub targets: Vec<Vec<Option<f64>>>,
    /// Normalised rank of each row's mean degradation, in `[0, 1]`.
    pub score_targets: Vec<f64>,
}

impl TrainingSet {
    /// Groups probe records by patch. `features[patch_id]` must exist for
    /// every probed patch.
    pub fn from_probes(heads: Vec<HeadKey>, features: &[FeatureVector], probes: &[ProbeRecord]) -> Self {
        let mut ids: Vec<usize> = probes.iter().map(|p| p.patch_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut targets = vec![vec![None; heads.len()]; ids.len()];
        for p in probes {
            let row = ids.binary_search(&p.patch_id).expect("collected above");
            if let Some(h) = heads.iter().position(|h| h.family == p.family && h.ratio == p.target_ratio) {
                targets[row][h] = Some(p.measured_degradation);
            }
        }
        let means: Vec<f64> = targets
            .iter()
            .map(|t| {
                let v: Vec<f64> = t.iter().flatten().copied().collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect();
        Self {
            heads,
            features: ids.iter().map(|&i| features[i]).collect(),
            targets,
            score_targets: normalized_ranks(&means),
        }
    }

    pub fn observed(&self) -> usize {
        self.targets.iter().flatten().filter(|t| t.is_some()).count()
    }
}

/// Average ranks scaled to `[0, 1]`; ties share their mean rank.
pub fn normalized_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.5; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 / (n - 1) as f64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weight matrices (not biases).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub samples: usize,
    pub observed_targets: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub best_epoch: usize,
    /// Heads replaced by a constant because their targets do not vary.
    pub constant_heads: Vec<String>,
}

/// Feature-standardised 12 → 16 (tanh) perceptron with one linear head per
/// `(family, ratio)` and a sigmoid score head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub heads: Vec<HeadKey>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// `HIDDEN × FEATURE_COUNT`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(heads + 1) × HIDDEN`; the last row is the score head.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Fixed outputs for degenerate heads (same indexing as `b2`).
    pub constants: Vec<Option<f64>>,
    pub config: TrainConfig,
    pub log: TrainingLog,
}

struct Forward {
    hidden: [f64; HIDDEN],
    out: Vec<f64>,
}

impl Predictor {
    fn outputs(&self) -> usize {
        self.heads.len() + 1
    }

    fn forward_raw(&self, f: &FeatureVector) -> Forward {
        let mut z = [0.0; FEATURE_COUNT];
        for i in 0..FEATURE_COUNT {
            z[i] = (f.0[i] - self.feature_mean[i]) / self.feature_scale[i];
        }
        let mut hidden = [0.0; HIDDEN];
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT];
            *h = math::tanh(self.b1[j] + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>());
        }
        let outputs = self.outputs();
        let mut out = vec![0.0; outputs];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.w2[k * HIDDEN..(k + 1) * HIDDEN];
            let v = self.b2[k] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
            *o = if k + 1 == outputs { sigmoid(v) } else { v };
        }
        Forward { hidden, out }
    }

    /// Predicted degradation per head and the sensitivity score.
    pub fn forward(&self, f: &FeatureVector) -> (Vec<f64>, f64) {
        let mut out = self.forward_raw(f).out;
        for (o, c) in out.iter_mut().zip(&self.constants) {
            if let Some(c) = c {
                *o = *c;
            }
        }
        let score = out.pop().expect("score head");
        (out, score)
    }

    /// Masked mean squared error over every observed target and score.
    pub fn mse(&self, set: &TrainingSet) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, f) in set.features.iter().enumerate() {
            let (heads, score) = self.forward(f);
            for (p, t) in heads.iter().zip(&set.targets[i]) {
                if let Some(t) = t {
                    sum += (p - t) * (p - t);
                    count += 1;
                }
            }
            sum += (score - set.score_targets[i]) * (score - set.score_targets[i]);
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

/// Fits the predictor with full-batch Adam on the masked squared error and
/// returns the parameters with the lowest training error seen.
pub fn train_predictor(set: &TrainingSet, cfg: &TrainConfig) -> Result<Predictor> {
    let observed = set.observed();
    if observed < 32 {
        bail!(InvalidArgument, "predictor training needs at least 32 probe records, got {}", observed);
    }
    if !(cfg.learning_rate > 0.0) {
        bail!(InvalidArgument, "learning rate must be positive");
    }
    let n = set.features.len();
    let outputs = set.heads.len() + 1;

    let mut mean = vec![0.0; FEATURE_COUNT];
    let mut scale = vec![1.0; FEATURE_COUNT];
    for i in 0..FEATURE_COUNT {
        mean[i] = set.features.iter().map(|f| f.0[i]).sum::<f64>() / n as f64;
        let var = set.features.iter().map(|f| (f.0[i] - mean[i]) * (f.0[i] - mean[i])).sum::<f64>() / n as f64;
        if var > 1e-24 {
            scale[i] = math::sqrt(var);
        }
    }

    let mut constants = vec![None; outputs];
    let mut constant_heads = Vec::new();
    let overall_max = set.targets.iter().flatten().flatten().fold(0.0f64, |a, &b| a.max(b));
    for (h, key) in set.heads.iter().enumerate() {
        let vals: Vec<f64> = set.targets.iter().filter_map(|t| t[h]).collect();
        let constant = match vals.first() {
            None => Some(overall_max),
            Some(&v0) if vals.iter().all(|&v| v == v0) => Some(v0),
            _ => None,
        };
        if constant.is_some() {
            constant_heads.push(format!("{}@{}", key.family, key.ratio));
            log::warn!("predictor head {}@{} has constant targets", key.family, key.ratio);
        }
        constants[h] = constant;
    }
    if let Some(&s0) = set.score_targets.first() {
        if set.score_targets.iter().all(|&s| s == s0) {
            constants[outputs - 1] = Some(s0);
            constant_heads.push(String::from("score"));
            log::warn!("predictor score head has constant targets");
        }
    }

    let mut rng = seeded(cfg.seed);
    let init = |rng: &mut _, len: usize, fan_in: usize| -> Vec<f64> {
        let s = 1.0 / math::sqrt(fan_in as f64);
        (0..len).map(|_| gaussian(rng) * s).collect()
    };
    let mut p = Predictor {
        heads: set.heads.clone(),
        feature_mean: mean,
        feature_scale: scale,
        w1: init(&mut rng, HIDDEN * FEATURE_COUNT, FEATURE_COUNT),
        b1: vec![0.0; HIDDEN],
        w2: init(&mut rng, outputs * HIDDEN, HIDDEN),
        b2: vec![0.0; outputs],
        constants,
        config: cfg.clone(),
        log: TrainingLog {
            samples: n,
            observed_targets: observed,
            initial_mse: 0.0,
            final_mse: 0.0,
            best_epoch: 0,
            constant_heads,
        },
    };
    // start every regression head at its mean target
    for h in 0..set.heads.len() {
        let vals: Vec<f64> = set.targets.iter().filter_map(|t| t[h]).collect();
        if !vals.is_empty() {
            p.b2[h] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }

    let initial = p.mse(set);
    let mut best = (initial, p.clone(), 0usize);
    let mut adam = Adam::new(p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len(), cfg.learning_rate);
    let count = (observed + n) as f64;

    for epoch in 1..=cfg.epochs {
        let mut g_w1 = vec![0.0; p.w1.len()];
        let mut g_b1 = vec![0.0; HIDDEN];
        let mut g_w2 = vec![0.0; p.w2.len()];
        let mut g_b2 = vec![0.0; outputs];
        for (i, f) in set.features.iter().enumerate() {
            let fw = p.forward_raw(f);
            let mut g_hidden = [0.0; HIDDEN];
            for k in 0..outputs {
                if p.constants[k].is_some() {
                    continue;
                }
                let grad = if k + 1 == outputs {
                    let y = fw.out[k];
                    2.0 * (y - set.score_targets[i]) * y * (1.0 - y)
                } else if let Some(t) = set.targets[i][k] {
                    2.0 * (fw.out[k] - t)
                } else {
                    continue;
                } / count;
                g_b2[k] += grad;
                for j in 0..HIDDEN {
                    g_w2[k * HIDDEN + j] += grad * fw.hidden[j];
                    g_hidden[j] += grad * p.w2[k * HIDDEN + j];
                }
            }
            for j in 0..HIDDEN {
                let g = g_hidden[j] * (1.0 - fw.hidden[j] * fw.hidden[j]);
                g_b1[j] += g;
                for c in 0..FEATURE_COUNT {
                    let z = (f.0[c] - p.feature_mean[c]) / p.feature_scale[c];
                    g_w1[j * FEATURE_COUNT + c] += g * z;
                }
            }
        }
        for (g, w) in g_w1.iter_mut().zip(&p.w1).chain(g_w2.iter_mut().zip(&p.w2)) {
            *g += 2.0 * cfg.weight_decay * w;
        }
        adam.step(
            &mut [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2],
            &[&g_w1, &g_b1, &g_w2, &g_b2],
        );
        let loss = p.mse(set);
        if loss.is_finite() && loss < best.0 {
            best = (loss, p.clone(), epoch);
        }
    }

    let (final_mse, mut p, best_epoch) = best;
    p.log.initial_mse = initial;
    p.log.final_mse = final_mse;
    p.log.best_epoch = best_epoch;
    Ok(p)
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - math::powi(Self::BETA1, self.t);
        let c2 = 1.0 - math::powi(Self::BETA2, self.t);
        let mut idx = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, &gi) in p.iter_mut().zip(g.iter()) {
                self.m[idx] = Self::BETA1 * self.m[idx] + (1.0 - Self::BETA1) * gi;
                self.v[idx] = Self::BETA2 * self.v[idx] + (1.0 - Self::BETA2) * gi * gi;
                *x -= self.lr * (self.m[idx] / c1) / (math::sqrt(self.v[idx] / c2) + Self::EPS);
                idx += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPrediction {
    pub family: Family,
    pub ratio: f64,
    pub degradation: f64,
    /// Whether `degradation` was measured by a probe rather than predicted.
    pub measured: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub family: Family,
    /// Smallest grid ratio within the cap; `None` keeps the patch dense.
    pub target_ratio: Option<f64>,
    pub predicted_degradation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub patch_id: usize,
    pub score: f64,
    pub recommendations: Vec<Recommendation>,
    pub predictions: Vec<HeadPrediction>,
}

impl SensitivityRecord {
    pub fn degradation(&self, family: Family, ratio: f64) -> Option<f64> {
        self.predictions
            .iter()
            .find(|h| h.family == family && h.ratio == ratio)
            .map(|h| h.degradation)
    }
}

/// Scores a patch and recommends, per family, the most compressive grid
/// ratio whose predicted degradation stays within `cap`.
pub fn predict(p: &Predictor, patch_id: usize, f: &FeatureVector, cap: f64) -> SensitivityRecord {
    let (heads, score) = p.forward(f);
    let predictions = p
        .heads
        .iter()
        .zip(heads)
        .map(|(k, d)| HeadPrediction {
            family: k.family,
            ratio: k.ratio,
            degradation: d.max(0.0),
            measured: false,
        })
        .collect();
    let mut record = SensitivityRecord {
        patch_id,
        score: score.clamp(0.0, 1.0),
        recommendations: Vec::new(),
        predictions,
    };
    record.recommend(cap);
    record
}

impl SensitivityRecord {
    /// Recomputes recommendations from the current predictions.
    pub fn recommend(&mut self, cap: f64) {
        let mut families: Vec<Family> = self.predictions.iter().map(|h| h.family).collect();
        families.sort();
        families.dedup();
        self.recommendations = families
            .into_iter()
            .map(|family| {
                let best = self
                    .predictions
                    .iter()
                    .filter(|h| h.family == family && h.degradation <= cap)
                    .min_by(|a, b| a.ratio.total_cmp(&b.ratio));
                match best {
                    Some(h) => Recommendation {
                        family,
                        target_ratio: Some(h.ratio),
                        predicted_degradation: h.degradation,
                    },
                    None => Recommendation {
                        family,
                        target_ratio: None,
                        predicted_degradation: 0.0,
                    },
                }
            })
            .collect();
    }

    /// Replaces predictions with probe measurements where available.
    pub fn apply_measurements(&mut self, probes: &[ProbeRecord], cap: f64) {
        for p in probes.iter().filter(|p| p.patch_id == self.patch_id) {
            if let Some(h) = self
                .predictions
                .iter_mut()
                .find(|h| h.family == p.family && h.ratio == p.target_ratio)
            {
                h.degradation = p.measured_degradation;
                h.measured = true;
            }
        }
        self.recommend(cap);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub families: Vec<Family>,
    pub ratio_grid: Vec<f64>,
    pub degradation_cap: f64,
    pub probe_stride: usize,
    pub hooi_iters: usize,
    pub train: TrainConfig,
    /// Seeds the choice of probed patches.
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            patch_rows: 32,
            patch_cols: 32,
            families: Family::NETWORKS.to_vec(),
            ratio_grid: vec![0.5, 0.35, 0.25, 0.15],
            degradation_cap: 0.02,
            probe_stride: 4,
            hooi_iters: 2,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub patches: Vec<Patch>,
    pub features: Vec<FeatureVector>,
    pub probed: Vec<usize>,
    pub probes: Vec<ProbeRecord>,
    pub records: Vec<SensitivityRecord>,
    pub predictor: Predictor,
}

/// Patches to probe: within each (layer, submodule) group, every
/// `stride`-th patch from a seeded offset.
pub fn select_probes(patches: &[Patch], stride: usize, seed: u64) -> Vec<usize> {
    let stride = stride.max(1);
    let mut groups: Vec<((usize, SubmoduleKind), Vec<usize>)> = Vec::new();
    for p in patches {
        let key = (p.layer_index, p.kind);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, ids)) => ids.push(p.id),
            None => groups.push((key, vec![p.id])),
        }
    }
    let mut out = Vec::new();
    for ((layer, kind), ids) in groups {
        let group = (layer as u64) * 8 + kind as u64;
        let offset = (derive_seed(seed, group) % stride as u64) as usize;
        out.extend(ids.iter().skip(offset).step_by(stride));
    }
    out.sort_unstable();
    out
}

/// Runs the whole analysis: partition, features, probes, predictor training
/// and per-patch records. Probed patches keep their measured degradations.
pub fn analyze(model: &ModelContainer, calib: &Calibration, cfg: &AnalyzeConfig) -> Result<SensitivityReport> {
    if cfg.families.is_empty() || cfg.ratio_grid.is_empty() {
        bail!(InvalidArgument, "families and ratio grid must be non-empty");
    }
    let patches = partition_patches(model, cfg.patch_rows, cfg.patch_cols)?;
    let entries = model.entries();
    let mut features = Vec::with_capacity(patches.len());
    for p in &patches {
        let w = p.extract(&entries[p.entry_index].matrix);
        features.push(extract_features(&w, p.layer_index, model.total_layers(), p.kind)?);
    }

    let probed = select_probes(&patches, cfg.probe_stride, cfg.seed);
    let mut probes = Vec::new();
    for &id in &probed {
        let p = &patches[id];
        let w = p.extract(&entries[p.entry_index].matrix);
        let x = p.inputs(calib.input(p.entry_index));
        probes.extend(probe_patch(&w, id, &cfg.families, &cfg.ratio_grid, &x, cfg.hooi_iters)?);
    }

    let heads: Vec<HeadKey> = cfg
        .families
        .iter()
        .flat_map(|&family| cfg.ratio_grid.iter().map(move |&ratio| HeadKey { family, ratio }))
        .collect();
    let set = TrainingSet::from_probes(heads, &features, &probes);
    let predictor = train_predictor(&set, &cfg.train)?;
    log::info!(
        "predictor trained on {} patches: mse {:.3e} -> {:.3e}",
        set.features.len(),
        predictor.log.initial_mse,
        predictor.log.final_mse
    );

    let records = patches
        .iter()
        .map(|p| {
            let mut r = predict(&predictor, p.id, &features[p.id], cfg.degradation_cap);
            r.apply_measurements(&probes, cfg.degradation_cap);
            r
        })
        .collect();
    Ok(SensitivityReport {
        patches,
        features,
        probed,
        probes,
        records,
        predictor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelEntry;
    use crate::rng::{gaussian_matrix, gaussian_vec, uniform};
    use proptest::prelude::*;

    fn model_with(shapes: &[(usize, usize)]) -> ModelContainer {
        let mut m = ModelContainer::new(shapes.len(), "test");
        let mut rng = seeded(1);
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let w = gaussian_matrix(&mut rng, r, c);
            m.push(ModelEntry::new(format!("w{}", i), w, i, SubmoduleKind::Ffn)).unwrap();
        }
        m
    }

    #[test]
    fn partition_examples() {
        let p = partition_patches(&model_with(&[(128, 128)]), 64, 64).unwrap();
        assert_eq!(p.len(), 4);
        let p = partition_patches(&model_with(&[(100, 64)]), 64, 64).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[1].rows(), p[1].cols()), (36, 64));
        assert!(matches!(
            partition_patches(&ModelContainer::new(1, ""), 32, 32),
            Err(Error::EmptyModel)
        ));
        assert!(partition_patches(&model_with(&[(32, 32)]), 8, 32).is_err());
    }

    proptest! {
        #[test]
        fn tiling_is_exact(rows in 1usize..90, cols in 1usize..90, pr in 16usize..40, pc in 16usize..40) {
            let model = model_with(&[(rows, cols)]);
            let patches = partition_patches(&model, pr, pc).unwrap();
            let mut hits = vec![0u8; rows * cols];
            for (k, p) in patches.iter().enumerate() {
                prop_assert_eq!(p.id, k);
                for i in p.row_range.0..p.row_range.1 {
                    for j in p.col_range.0..p.col_range.1 {
                        hits[i * cols + j] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }

        #[test]
        fn features_are_finite_and_bounded(seed in 0u64..1000, r in 1usize..20, c in 1usize..20) {
            let w = gaussian_matrix(&mut seeded(seed), r, c);
            let f = extract_features(&w, 3, 12, SubmoduleKind::AttentionProj).unwrap();
            prop_assert!(f.0.iter().all(|x| x.is_finite()));
            for name in ["top10pct_energy", "frac_small", "normalized_layer_index"] {
                let v = f.get(name).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(f.get("spectral_entropy").unwrap() >= 0.0);
            prop_assert_eq!(f, extract_features(&w, 3, 12, SubmoduleKind::AttentionProj).unwrap());
        }
    }

    #[test]
    fn identity_features() {
        let f = extract_features(&Tensor::identity(4), 0, 1, SubmoduleKind::Ffn).unwrap();
        assert!((f.get("stable_rank").unwrap() - 4.0).abs() < 1e-12);
        assert!(f.get("log_condition").unwrap().abs() < 1e-12);
        assert!((f.get("mean_abs").unwrap() - 0.25).abs() < 1e-15);
        assert!((f.get("frac_small").unwrap() - 0.75).abs() < 1e-15);
        assert!((f.get("spectral_entropy").unwrap() - math::ln(4.0)).abs() < 1e-12);
        assert_eq!(f.get("is_ffn"), Some(1.0));
    }

    #[test]
    fn rank_one_features() {
        let w = Tensor::matrix(2, 2, vec![1., 2., 2., 4.]).unwrap();
        let f = extract_features(&w, 0, 1, SubmoduleKind::Other).unwrap();
        assert!((f.get("stable_rank").unwrap() - 1.0).abs() < 1e-12);
        assert!((f.get("top10pct_energy").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_patch_features() {
        let f = extract_features(&Tensor::zeros(&[3, 3]), 0, 1, SubmoduleKind::Other).unwrap();
        assert_eq!(f.get("stable_rank"), Some(0.0));
        assert_eq!(f.get("log_condition"), Some(0.0));
    }

    #[test]
    fn probes_at_full_ratio_and_rank_one_are_exact() {
        let mut rng = seeded(7);
        let x = gaussian_matrix(&mut rng, 32, 16);
        let w = gaussian_matrix(&mut rng, 32, 32);
        for r in probe_patch(&w, 0, &Family::NETWORKS, &[1.0], &x, 1).unwrap() {
            assert!(r.measured_degradation <= 1e-9, "{:?}", r);
        }
        // rank one in the (4, 8, 4, 8) view the decompositions see
        let a: Vec<Vec<f64>> = [4, 8, 4, 8].iter().map(|&n| gaussian_vec(&mut rng, n)).collect();
        let w = Tensor::from_fn(&[32, 32], |i| {
            a[0][i[0] / 8] * a[1][i[0] % 8] * a[2][i[1] / 8] * a[3][i[1] % 8]
        })
        .unwrap();
        let records = probe_patch(&w, 0, &Family::NETWORKS, &[0.5, 0.25, 0.15, 0.05], &x, 1).unwrap();
        assert_eq!(records.len(), 12);
        for r in records {
            assert!(r.measured_degradation <= 1e-9, "{:?}", r);
        }
    }

    #[test]
    fn infeasible_probe_is_skipped() {
        let mut rng = seeded(8);
        let x = gaussian_matrix(&mut rng, 32, 16);
        let w = gaussian_matrix(&mut rng, 32, 32);
        let records = probe_patch(&w, 0, &[Family::Tt], &[0.5, 0.01], &x, 0).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].target_ratio, 0.5);
    }

    #[test]
    fn tt_probe_degradation_grows_with_compression() {
        let mut rng = seeded(9);
        for _ in 0..20 {
            let x = gaussian_matrix(&mut rng, 32, 16);
            let w = gaussian_matrix(&mut rng, 32, 32);
            let r = probe_patch(&w, 0, &[Family::Tt], &[0.5, 0.25], &x, 0).unwrap();
            assert!(r[1].measured_degradation + 1e-9 >= r[0].measured_degradation);
        }
    }

    fn linear_set(n: usize, seed: u64, shuffle: bool) -> TrainingSet {
        let mut rng = seeded(seed);
        let coef: Vec<f64> = (0..FEATURE_COUNT).map(|_| 0.02 * gaussian(&mut rng)).collect();
        let features: Vec<FeatureVector> = (0..n)
            .map(|_| {
                let mut f = [0.0; FEATURE_COUNT];
                f.iter_mut().for_each(|x| *x = uniform(&mut rng));
                FeatureVector(f)
            })
            .collect();
        let mut labels: Vec<f64> = features
            .iter()
            .map(|f| 0.1 + f.0.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        if shuffle {
            labels.rotate_left(n / 3);
        }
        TrainingSet {
            heads: vec![HeadKey {
                family: Family::Tt,
                ratio: 0.5,
            }],
            score_targets: normalized_ranks(&labels),
            targets: labels.iter().map(|&l| vec![Some(l)]).collect(),
            features,
        }
    }

    fn split_mse(p: &Predictor, test: &TrainingSet) -> f64 {
        let mut s = 0.0;
        for (f, t) in test.features.iter().zip(&test.targets) {
            let (h, _) = p.forward(f);
            s += (h[0] - t[0].unwrap()).powi(2);
        }
        s / test.features.len() as f64
    }

    #[test]
    fn recovers_linear_labels() {
        let all = linear_set(160, 11, false);
        let take = |r: core::ops::Range<usize>| TrainingSet {
            heads: all.heads.clone(),
            features: all.features[r.clone()].to_vec(),
            targets: all.targets[r.clone()].to_vec(),
            score_targets: all.score_targets[r].to_vec(),
        };
        let (train, test) = (take(0..128), take(128..160));
        let cfg = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let p = train_predictor(&train, &cfg).unwrap();
        assert!(p.log.final_mse <= 0.9 * p.log.initial_mse);
        let test_mse = split_mse(&p, &test);
        assert!(test_mse <= 1e-3, "test mse {}", test_mse);

        // mismatched pairing generalises worse
        let shuffled = linear_set(160, 11, true);
        let strain = TrainingSet {
            heads: shuffled.heads.clone(),
            features: shuffled.features[..128].to_vec(),
            targets: shuffled.targets[..128].to_vec(),
            score_targets: shuffled.score_targets[..128].to_vec(),
        };
        let ps = train_predictor(&strain, &cfg).unwrap();
        assert!(split_mse(&ps, &test) >= test_mse);
    }

    #[test]
    fn constant_labels_give_constant_predictor() {
        let mut set = linear_set(40, 12, false);
        for t in &mut set.targets {
            t[0] = Some(0.07);
        }
        set.score_targets = vec![0.5; 40];
        let p = train_predictor(&set, &TrainConfig::default()).unwrap();
        assert_eq!(p.log.constant_heads.len(), 2);
        assert!(p.mse(&set) < 1e-24);
        let (h, s) = p.forward(&set.features[3]);
        assert_eq!((h[0], s), (0.07, 0.5));
    }

    #[test]
    fn too_few_records() {
        let set = linear_set(10, 1, false);
        assert!(train_predictor(&set, &TrainConfig::default()).is_err());
    }

    #[test]
    fn score_is_bounded_and_keep_dense_fallback() {
        let set = linear_set(40, 13, false);
        let p = train_predictor(
            &set,
            &TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut rng = seeded(14);
        for _ in 0..1000 {
            let mut f = [0.0; FEATURE_COUNT];
            f.iter_mut().for_each(|x| *x = 100.0 * gaussian(&mut rng));
            let r = predict(&p, 0, &FeatureVector(f), 0.02);
            assert!((0.0..=1.0).contains(&r.score));
        }
        let r = predict(&p, 0, &set.features[0], -1.0);
        assert_eq!(r.recommendations[0].target_ratio, None);
    }

    #[test]
    fn ranks_normalise_with_ties() {
        assert_eq!(normalized_ranks(&[3.0, 1.0, 2.0]), vec![1.0, 0.0, 0.5]);
        assert_eq!(normalized_ranks(&[1.0, 1.0, 2.0]), vec![0.25, 0.25, 1.0]);
    }

    #[test]
    fn probe_selection_is_stratified() {
        let model = model_with(&[(64, 64), (64, 64)]);
        let patches = partition_patches(&model, 16, 16).unwrap();
        let chosen = select_probes(&patches, 4, 5);
        assert_eq!(chosen.len(), 8);
        assert_eq!(chosen.iter().filter(|&&i| patches[i].layer_index == 0).count(), 4);
        assert_eq!(chosen, select_probes(&patches, 4, 5));
    }
}
