//! Layered synthetic transformer-shaped models with controllable spectral
//! decay.
//!
//! Row and column indices are split as `outer · block + inner`, and every
//! weight matrix is a CP sum over that 4-way view:
//! `W[(a, b), (c, d)] = Σ_k exp(−k/τ) · x_k[a] y_k[b] u_k[c] v_k[d]`
//! with random unit vectors. Any patch aligned to `block` then has
//! multilinear and chain ranks bounded by `terms`, with energy decaying at
//! rate `τ`. `τ` grows linearly from `tau_min` at the middle layer to
//! `tau_max` at the outermost layers; fragile layers are plain Gaussian.
//! Every matrix is scaled to unit RMS entry and perturbed by Gaussian noise
//! of relative Frobenius size `noise`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::model::{ModelContainer, ModelEntry, SubmoduleKind};
use crate::rng::{derive_seed, gaussian_matrix, seeded, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Rows of the embedding matrix; 0 omits it.
    pub vocab: usize,
    pub fragile_layers: Vec<usize>,
    /// Inner index extent; must divide `d_model` and `d_ffn`.
    pub block: usize,
    pub terms: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            d_model: 64,
            d_ffn: 256,
            vocab: 128,
            fragile_layers: vec![0, 11],
            block: 8,
            terms: 16,
            tau_min: 0.4,
            tau_max: 1.2,
            noise: 0.005,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Decay constant of layer `l`; `None` for fragile layers.
    pub fn tau(&self, l: usize) -> Option<f64> {
        if self.fragile_layers.contains(&l) {
            return None;
        }
        let mid = (self.layers.saturating_sub(1)) as f64 / 2.0;
        if mid == 0.0 {
            return Some(self.tau_min);
        }
        let dist = (l as f64 - mid).abs() / mid;
        Some(self.tau_min + (self.tau_max - self.tau_min) * dist)
    }
}

/// Builds the synthetic model. Entry order: embedding, then per layer
/// `attn.{q,k,v,o}`, `ffn.up`, `ffn.down`.
pub fn synthesize(cfg: &SynthConfig) -> Result<ModelContainer> {
    if cfg.layers == 0 || cfg.terms == 0 || cfg.block == 0 {
        bail!(InvalidArgument, "synthetic model needs layers, terms and block >= 1");
    }
    if !cfg.d_model.is_multiple_of(cfg.block) || !cfg.d_ffn.is_multiple_of(cfg.block) {
        bail!(InvalidArgument, "block {} must divide d_model and d_ffn", cfg.block);
    }
    if !(cfg.tau_min > 0.0 && cfg.tau_max >= cfg.tau_min) || !(cfg.noise >= 0.0) {
        bail!(InvalidArgument, "need 0 < tau_min <= tau_max and noise >= 0");
    }
    let mut model = ModelContainer::new(cfg.layers, format!("minima-synth seed={}", cfg.seed));
    let mut stream = 0u64;
    let mut next_rng = || {
        stream += 1;
        seeded(derive_seed(cfg.seed, stream))
    };

    if cfg.vocab > 0 {
        let mut rng = next_rng();
        let w = finish(gaussian_matrix(&mut rng, cfg.vocab, cfg.d_model), cfg.noise, &mut rng);
        model.push(ModelEntry::new("embed", w, 0, SubmoduleKind::Embedding))?;
    }
    for l in 0..cfg.layers {
        let tau = cfg.tau(l);
        let shapes = [
            ("attn.q", cfg.d_model, cfg.d_model, SubmoduleKind::AttentionProj),
            ("attn.k", cfg.d_model, cfg.d_model, SubmoduleKind::AttentionProj),
            ("attn.v", cfg.d_model, cfg.d_model, SubmoduleKind::AttentionProj),
            ("attn.o", cfg.d_model, cfg.d_model, SubmoduleKind::AttentionProj),
            ("ffn.up", cfg.d_ffn, cfg.d_model, SubmoduleKind::Ffn),
            ("ffn.down", cfg.d_model, cfg.d_ffn, SubmoduleKind::Ffn),
        ];
        for (name, rows, cols, kind) in shapes {
            let mut rng = next_rng();
            let w = match tau {
                Some(tau) => cp_sum(&mut rng, rows, cols, cfg.block, cfg.terms, tau),
                None => gaussian_matrix(&mut rng, rows, cols),
            };
            let w = finish(w, cfg.noise, &mut rng);
            model.push(ModelEntry::new(format!("layers.{}.{}", l, name), w, l, kind))?;
        }
    }
    Ok(model)
}

fn cp_sum(rng: &mut StreamRng, rows: usize, cols: usize, block: usize, terms: usize, tau: f64) -> Tensor {
    let mut acc = Tensor::zeros(&[rows, cols]);
    for k in 0..terms {
        let x = unit_vector(rng, rows / block);
        let y = unit_vector(rng, block);
        let u = unit_vector(rng, cols / block);
        let v = unit_vector(rng, block);
        let lambda = math::exp(-(k as f64) / tau);
        for (idx, o) in acc.data_mut().iter_mut().enumerate() {
            let (r, c) = (idx / cols, idx % cols);
            *o += lambda * x[r / block] * y[r % block] * u[c / block] * v[c % block];
        }
    }
    acc
}

fn unit_vector(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    let g = gaussian_matrix(rng, n, 1);
    let norm = g.frobenius_norm();
    g.data().iter().map(|x| x / norm).collect()
}

/// Scales to unit RMS entry and adds relative Gaussian noise.
fn finish(mut w: Tensor, noise: f64, rng: &mut StreamRng) -> Tensor {
    let rms = w.frobenius_norm() / math::sqrt(w.len() as f64);
    if rms > 0.0 {
        w.scale(1.0 / rms);
    }
    if noise > 0.0 {
        let mut n = gaussian_matrix(rng, w.rows(), w.cols());
        n.scale(noise);
        w = w.sub(&n);
    }
    w
}
