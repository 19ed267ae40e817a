//! The run configuration document.
//!
//! Every key is optional and falls back to the default below; unknown keys
//! are rejected.
//!
//! | key | default | range |
//! |-----|---------|-------|
//! | `synth` | 12 layers, d_model 64, d_ffn 256, vocab 128 | see [`SynthSection`] |
//! | `patch_size` | `[32, 32]` | both ≥ 1 |
//! | `families` | `["tucker", "tt", "tr"]` | non-empty, no `dense` |
//! | `ratio_grid` | `[0.5, 0.35, 0.25, 0.15]` | non-empty, each in (0, 1) |
//! | `degradation_cap` | `0.02` | > 0 |
//! | `probe_stride` | `4` | ≥ 1 |
//! | `hooi_iters` | `2` | ≤ 100 |
//! | `predictor` | 2000 epochs, lr 1e-2, weight decay 1e-4 | epochs ≥ 1, lr > 0 |
//! | `target_ratio` | `0.65` | (0, 1] |
//! | `planner` | mode `sensitivity_mixed`, family `tt` | see [`PlannerSection`] |
//! | `heal` | 20 sweeps, step 1.0, 20 halvings | sweeps ≤ 10000 |
//! | `calibration` | seeded Gaussian, 256 samples | samples ≥ 1 |
//! | `eval_calibration` | seeded Gaussian, 256 samples | samples ≥ 1 |
//! | `eval` | batch 1, benchmark off (10 reps when enabled) | reps ≥ 10 |
//! | `specdec` | built-in bigram pair, V = 8, k = 3, 10000 tokens | k ≥ 1 |
//! | `seeds` | synth 42, analyze 0, calibration 1, eval 2, specdec 7 | |
//! | `paths` | files in the working directory | |

use std::path::{Path, PathBuf};

use minima_core::decomp::Family;
use minima_core::pipeline::HealConfig;
use minima_core::planner::{PlanMode, PlannerConfig};
use minima_core::sensitivity::{AnalyzeConfig, TrainConfig};
use minima_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::container::read_input;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub patch_size: [usize; 2],
    pub families: Vec<Family>,
    pub ratio_grid: Vec<f64>,
    pub degradation_cap: f64,
    pub probe_stride: usize,
    pub hooi_iters: usize,
    pub predictor: PredictorSection,
    pub target_ratio: f64,
    pub planner: PlannerSection,
    pub heal: HealConfig,
    pub calibration: CalibrationSource,
    pub eval_calibration: CalibrationSource,
    pub eval: EvalSection,
    pub specdec: SpecdecSection,
    pub seeds: Seeds,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub fragile_layers: Vec<usize>,
    pub block: usize,
    pub terms: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub noise: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            layers: d.layers,
            d_model: d.d_model,
            d_ffn: d.d_ffn,
            vocab: d.vocab,
            fragile_layers: d.fragile_layers,
            block: d.block,
            terms: d.terms,
            tau_min: d.tau_min,
            tau_max: d.tau_max,
            noise: d.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self { epochs: d.epochs, learning_rate: d.learning_rate, weight_decay: d.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub mode: PlanMode,
    pub single_family: Family,
    pub exclude_embeddings: bool,
    pub uniform_step: f64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let d = PlannerConfig::default();
        Self {
            mode: d.mode,
            single_family: d.single_family,
            exclude_embeddings: d.exclude_embeddings,
            uniform_step: d.uniform_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationSource {
    /// Standard Gaussian inputs from the stage's calibration seed.
    Gaussian { samples: usize },
    /// An MNMA calibration container.
    File { path: PathBuf },
}

impl Default for CalibrationSource {
    fn default() -> Self {
        CalibrationSource::Gaussian { samples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch: usize,
    /// Entries timed by the micro-benchmark; 0 disables it.
    pub bench_entries: usize,
    pub bench_reps: usize,
    pub bench_warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { batch: 1, bench_entries: 0, bench_reps: 10, bench_warmup: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecdecSection {
    /// Markov-model JSON files; both absent selects a seeded bigram pair.
    pub target: Option<PathBuf>,
    pub draft: Option<PathBuf>,
    /// Vocabulary of the built-in pair.
    pub vocab: usize,
    /// Weight of the independent component in the built-in draft.
    pub draft_noise: f64,
    pub k: usize,
    pub n_tokens: usize,
}

impl Default for SpecdecSection {
    fn default() -> Self {
        Self { target: None, draft: None, vocab: 8, draft_noise: 0.3, k: 3, n_tokens: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub synth: u64,
    pub analyze: u64,
    pub calibration: u64,
    pub eval: u64,
    pub specdec: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { synth: 42, analyze: 0, calibration: 1, eval: 2, specdec: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub model: PathBuf,
    pub sensitivity: PathBuf,
    pub plan: PathBuf,
    pub compressed: PathBuf,
    pub healed: PathBuf,
    pub heal_log: PathBuf,
    pub report: PathBuf,
    /// Micro-benchmark timings, written by `eval` when enabled.
    pub bench: PathBuf,
    pub specdec: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            model: "model.mnma".into(),
            sensitivity: "sensitivity.json".into(),
            plan: "plan.json".into(),
            compressed: "compressed.mnma".into(),
            healed: "healed.mnma".into(),
            heal_log: "heal_log.json".into(),
            report: "report.json".into(),
            bench: "bench.json".into(),
            specdec: "specdec.json".into(),
        }
    }
}

impl Paths {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.model,
            &mut self.sensitivity,
            &mut self.plan,
            &mut self.compressed,
            &mut self.healed,
            &mut self.heal_log,
            &mut self.report,
            &mut self.bench,
            &mut self.specdec,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AnalyzeConfig::default();
        Self {
            synth: SynthSection::default(),
            patch_size: [a.patch_rows, a.patch_cols],
            families: a.families,
            ratio_grid: a.ratio_grid,
            degradation_cap: a.degradation_cap,
            probe_stride: a.probe_stride,
            hooi_iters: a.hooi_iters,
            predictor: PredictorSection::default(),
            target_ratio: 0.65,
            planner: PlannerSection::default(),
            heal: HealConfig::default(),
            calibration: CalibrationSource::default(),
            eval_calibration: CalibrationSource::default(),
            eval: EvalSection::default(),
            specdec: SpecdecSection::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn in_open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_input(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config("config is not UTF-8".into()))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
            for src in [&mut cfg.calibration, &mut cfg.eval_calibration] {
                if let CalibrationSource::File { path } = src {
                    if path.is_relative() {
                        *path = dir.join(&*path);
                    }
                }
            }
            for p in [&mut cfg.specdec.target, &mut cfg.specdec.draft].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        check(s.layers >= 1 && s.d_model >= 1 && s.d_ffn >= 1, || "synth sizes must be >= 1".into())?;
        check(s.block >= 1 && s.d_model.is_multiple_of(s.block) && s.d_ffn.is_multiple_of(s.block), || {
            format!("synth.block {} must divide d_model and d_ffn", s.block)
        })?;
        check(s.terms >= 1, || "synth.terms must be >= 1".into())?;
        check(s.tau_min > 0.0 && s.tau_max >= s.tau_min, || "need 0 < synth.tau_min <= synth.tau_max".into())?;
        check(s.noise >= 0.0 && s.noise.is_finite(), || "synth.noise must be >= 0".into())?;
        check(s.fragile_layers.iter().all(|&l| l < s.layers), || "synth.fragile_layers out of range".into())?;
        check(self.patch_size.iter().all(|&n| n >= 1), || "patch_size entries must be >= 1".into())?;
        check(!self.families.is_empty() && !self.families.contains(&Family::Dense), || {
            "families must be non-empty tensor-network families".into()
        })?;
        check(!self.ratio_grid.is_empty() && self.ratio_grid.iter().all(|&r| in_open_unit(r)), || {
            "ratio_grid entries must lie in (0, 1)".into()
        })?;
        check(self.degradation_cap > 0.0 && self.degradation_cap.is_finite(), || "degradation_cap must be > 0".into())?;
        check(self.probe_stride >= 1, || "probe_stride must be >= 1".into())?;
        check(self.hooi_iters <= 100, || "hooi_iters must be <= 100".into())?;
        let p = &self.predictor;
        check(p.epochs >= 1 && p.learning_rate > 0.0 && p.weight_decay >= 0.0, || {
            "predictor needs epochs >= 1, learning_rate > 0, weight_decay >= 0".into()
        })?;
        check(self.target_ratio > 0.0 && self.target_ratio <= 1.0, || {
            format!("target_ratio {} outside (0, 1]", self.target_ratio)
        })?;
        check(self.planner.uniform_step > 0.0 && self.planner.uniform_step < 1.0, || {
            "planner.uniform_step must lie in (0, 1)".into()
        })?;
        check(self.planner.single_family != Family::Dense, || "planner.single_family cannot be dense".into())?;
        let h = &self.heal;
        check(h.sweeps <= 10_000 && h.step_init > 0.0 && h.max_halvings <= 60, || {
            "heal needs sweeps <= 10000, step_init > 0, max_halvings <= 60".into()
        })?;
        check(h.pinv_threshold > 0.0 && h.min_sample_fraction >= 0.0, || {
            "heal.pinv_threshold must be > 0 and min_sample_fraction >= 0".into()
        })?;
        for (name, src) in [("calibration", &self.calibration), ("eval_calibration", &self.eval_calibration)] {
            if let CalibrationSource::Gaussian { samples } = src {
                check(*samples >= 1, || format!("{name}.samples must be >= 1"))?;
            }
        }
        check(self.eval.batch >= 1, || "eval.batch must be >= 1".into())?;
        check(self.eval.bench_entries == 0 || self.eval.bench_reps >= 10, || "eval.bench_reps must be >= 10".into())?;
        let d = &self.specdec;
        check(d.target.is_some() == d.draft.is_some(), || "specdec.target and specdec.draft go together".into())?;
        check(d.k >= 1 && d.n_tokens >= 1 && d.vocab >= 1, || "specdec needs k, n_tokens, vocab >= 1".into())?;
        check((0.0..=1.0).contains(&d.draft_noise), || "specdec.draft_noise must lie in [0, 1]".into())?;
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            layers: s.layers,
            d_model: s.d_model,
            d_ffn: s.d_ffn,
            vocab: s.vocab,
            fragile_layers: s.fragile_layers.clone(),
            block: s.block,
            terms: s.terms,
            tau_min: s.tau_min,
            tau_max: s.tau_max,
            noise: s.noise,
            seed: self.seeds.synth,
        }
    }

    pub fn analyze_config(&self) -> AnalyzeConfig {
        AnalyzeConfig {
            patch_rows: self.patch_size[0],
            patch_cols: self.patch_size[1],
            families: self.families.clone(),
            ratio_grid: self.ratio_grid.clone(),
            degradation_cap: self.degradation_cap,
            probe_stride: self.probe_stride,
            hooi_iters: self.hooi_iters,
            train: TrainConfig {
                epochs: self.predictor.epochs,
                learning_rate: self.predictor.learning_rate,
                weight_decay: self.predictor.weight_decay,
                seed: self.seeds.analyze,
            },
            seed: self.seeds.analyze,
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            mode: self.planner.mode,
            single_family: self.planner.single_family,
            ratio_grid: self.ratio_grid.clone(),
            degradation_cap: self.degradation_cap,
            exclude_embeddings: self.planner.exclude_embeddings,
            uniform_step: self.planner.uniform_step,
        }
    }
}
