//! Activation-weighted refitting of one compressed layer.
//!
//! The objective is `J = ‖(W − Ŵ)X‖_F² = tr(E·C·Eᵀ)` with `E = W − Ŵ` and
//! `C = X·Xᵀ`. Tucker factors and core are refit by exact alternating least
//! squares; TT/TR cores by gradient steps with line-search step halving.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decomp::{CompressedLayer, Payload};
use crate::error::{bail, Result};
use crate::linalg::solve_psd;
use crate::tensor::{matmul_raw, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HealConfig {
    pub sweeps: usize,
    /// Initial TT/TR step as a multiple of the exact line-search step.
    pub step_init: f64,
    pub max_halvings: usize,
    pub pinv_threshold: f64,
    /// Minimum samples as a fraction of the widest patch.
    pub min_sample_fraction: f64,
}

impl Default for HealConfig {
    fn default() -> Self {
        Self {
            sweeps: 20,
            step_init: 1.0,
            max_halvings: 20,
            pinv_threshold: 1e-10,
            min_sample_fraction: 0.25,
        }
    }
}

/// Objective history of one layer: `objective[0]` is the starting value,
/// then one value per sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerHealTrace {
    pub objective: Vec<f64>,
    pub reference: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub pinv_truncations: usize,
}

impl LayerHealTrace {
    pub fn initial(&self) -> f64 {
        self.objective[0]
    }

    pub fn last(&self) -> f64 {
        *self.objective.last().expect("initial value recorded")
    }
}

struct Problem<'a> {
    w: &'a Tensor,
    c: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Problem<'_> {
    /// `tr(E·C·Eᵀ)` for a `rows × cols` matrix `e` given as flat data.
    fn quad(&self, e: &[f64]) -> f64 {
        let ec = matmul_raw(e, &self.c, self.rows, self.cols, self.cols);
        ec.iter().zip(e).map(|(a, b)| a * b).sum()
    }

    fn objective(&self, layer: &CompressedLayer) -> f64 {
        let w_hat = layer.reconstruct();
        let e: Vec<f64> = self.w.data().iter().zip(w_hat.data()).map(|(a, b)| a - b).collect();
        self.quad(&e)
    }

    /// `(W − Ŵ)·C` as flat `rows × cols` data.
    fn weighted_residual(&self, layer: &CompressedLayer) -> Vec<f64> {
        let w_hat = layer.reconstruct();
        let e: Vec<f64> = self.w.data().iter().zip(w_hat.data()).map(|(a, b)| a - b).collect();
        matmul_raw(&e, &self.c, self.rows, self.cols, self.cols)
    }
}

/// Refits `layer` against `w` (`rows × cols`) on inputs `x` (`cols × samples`).
/// Dense layers are left unchanged.
pub fn heal_layer(layer: &mut CompressedLayer, w: &Tensor, x: &Tensor, cfg: &HealConfig) -> Result<LayerHealTrace> {
    let (rows, cols) = (layer.rows(), layer.cols());
    if w.shape() != [rows, cols] || x.rank() != 2 || x.rows() != cols {
        bail!(
            Shape,
            "healing {}x{} layer with weight {:?} and inputs {:?}",
            rows,
            cols,
            w.shape(),
            x.shape()
        );
    }
    let xt = x.transpose()?;
    let problem = Problem {
        w,
        c: matmul_raw(x.data(), xt.data(), cols, x.cols(), cols),
        rows,
        cols,
    };
    let mut trace = LayerHealTrace {
        objective: vec![problem.objective(layer)],
        reference: problem.quad(w.data()),
        ..LayerHealTrace::default()
    };
    if matches!(layer.payload(), Payload::Dense { .. }) || trace.initial() <= 1e-16 * trace.reference {
        return Ok(trace);
    }
    let mut current = trace.initial();
    for _ in 0..cfg.sweeps {
        match layer.family() {
            crate::decomp::Family::Tucker => tucker_sweep(layer, &problem, cfg, &mut current, &mut trace)?,
            _ => chain_sweep(layer, &problem, cfg, &mut current, &mut trace)?,
        }
        trace.objective.push(current);
    }
    Ok(trace)
}

fn accept(
    layer: &mut CompressedLayer,
    candidate: CompressedLayer,
    problem: &Problem,
    current: &mut f64,
    trace: &mut LayerHealTrace,
) {
    let j = problem.objective(&candidate);
    if j.is_finite() && j <= *current {
        *layer = candidate;
        *current = j;
        trace.accepted += 1;
    } else {
        trace.rejected += 1;
    }
}

fn tucker_parts(layer: &CompressedLayer) -> (Tensor, Vec<Tensor>) {
    match layer.payload() {
        Payload::Tucker { core, factors } => (core.clone(), factors.clone()),
        _ => unreachable!("tucker layer"),
    }
}

fn with_tucker(layer: &CompressedLayer, core: Tensor, factors: Vec<Tensor>) -> CompressedLayer {
    let mut out = layer.clone();
    *out.payload_mut() = Payload::Tucker { core, factors };
    out
}

fn kron(mats: &[Tensor]) -> Tensor {
    let mut acc = Tensor::from_parts(vec![1, 1], vec![1.0]);
    for m in mats {
        let (ar, ac, br, bc) = (acc.rows(), acc.cols(), m.rows(), m.cols());
        let mut data = vec![0.0; ar * br * ac * bc];
        for i in 0..ar {
            for j in 0..ac {
                let a = acc.at(i, j);
                for k in 0..br {
                    for l in 0..bc {
                        data[(i * br + k) * (ac * bc) + j * bc + l] = a * m.at(k, l);
                    }
                }
            }
        }
        acc = Tensor::from_parts(vec![ar * br, ac * bc], data);
    }
    acc
}

fn tucker_sweep(
    layer: &mut CompressedLayer,
    problem: &Problem,
    cfg: &HealConfig,
    current: &mut f64,
    trace: &mut LayerHealTrace,
) -> Result<()> {
    let d = layer.mode_shape().len();
    let p = layer.row_mode_count();
    let wc = matmul_raw(problem.w.data(), &problem.c, problem.rows, problem.cols, problem.cols);
    for k in 0..d {
        let (core, mut factors) = tucker_parts(layer);
        let f = factors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .try_fold(core.clone(), |t, (j, u)| t.mode_product(j, u))?;
        let (u, truncated) = if k < p {
            row_factor(problem, &f, &wc, layer.mode_shape(), k, cfg.pinv_threshold)?
        } else {
            col_factor(problem, &f, &wc, layer.mode_shape(), p, k, cfg.pinv_threshold)?
        };
        trace.pinv_truncations += truncated as usize;
        factors[k] = u;
        let candidate = with_tucker(layer, core, factors);
        accept(layer, candidate, problem, current, trace);
    }

    let (core, factors) = tucker_parts(layer);
    let ur = kron(&factors[..p]);
    let uc = kron(&factors[p..]);
    let (rr, rc) = (ur.cols(), uc.cols());
    let cuc = Tensor::from_parts(
        vec![problem.cols, rc],
        matmul_raw(&problem.c, uc.data(), problem.cols, problem.cols, rc),
    );
    let urt = ur.transpose()?;
    let a = urt.matmul(&ur)?;
    let rhs = urt.matmul(problem.w)?.matmul(&cuc)?;
    let (y, t1) = solve_psd(&a, &rhs, cfg.pinv_threshold)?;
    let s = uc.transpose()?.matmul(&cuc)?;
    let (gt, t2) = solve_psd(&s, &y.transpose()?, cfg.pinv_threshold)?;
    trace.pinv_truncations += t1 as usize + t2 as usize;
    let g = gt.transpose()?.into_shape(&[rr * rc])?.into_shape(core.shape())?;
    let candidate = with_tucker(layer, g, factors);
    accept(layer, candidate, problem, current, trace);
    Ok(())
}

/// Least-squares row-mode factor: `U·(F·C)_(k)·F_(k)ᵀ = (W·C)_(k)·F_(k)ᵀ`.
fn row_factor(
    problem: &Problem,
    f: &Tensor,
    wc: &[f64],
    mode_shape: &[usize],
    k: usize,
    threshold: f64,
) -> Result<(Tensor, bool)> {
    let cols = problem.cols;
    let rows_f = f.len() / cols;
    let fc = Tensor::from_parts(f.shape().to_vec(), matmul_raw(f.data(), &problem.c, rows_f, cols, cols));
    let fk = f.unfold(k)?;
    let fkt = fk.transpose()?;
    let gram = fc.unfold(k)?.matmul(&fkt)?;
    let wc_t = Tensor::from_parts(mode_shape.to_vec(), wc.to_vec());
    let rhs = wc_t.unfold(k)?.matmul(&fkt)?;
    let (ut, truncated) = solve_psd(&gram, &rhs.transpose()?, threshold)?;
    Ok((ut.transpose()?, truncated))
}

/// Least-squares column-mode factor through the normal equations over
/// `vec(U_k)`, built from the Gram of `F`'s other-column slices and the
/// matching blocks of `C`.
fn col_factor(
    problem: &Problem,
    f: &Tensor,
    wc: &[f64],
    mode_shape: &[usize],
    p: usize,
    k: usize,
    threshold: f64,
) -> Result<(Tensor, bool)> {
    let d = mode_shape.len();
    let (rows, cols) = (problem.rows, problem.cols);
    let nk = mode_shape[k];
    let rk = f.shape()[k];
    let m = cols / nk;

    // F with mode k moved last: (rows, m, r_k)
    let perm: Vec<usize> = (0..d).filter(|&j| j != k).chain(core::iter::once(k)).collect();
    let fp = f.permute(&perm)?;
    let w2 = m * rk;
    let fpt = fp.reshape(&[rows, w2])?.transpose()?;
    let kmat = matmul_raw(fpt.data(), fp.data(), w2, rows, w2);

    // column index of (c_k = a, other column modes = j)
    let col_shape = &mode_shape[p..];
    let mut col_strides = vec![1usize; col_shape.len()];
    for i in (0..col_shape.len().saturating_sub(1)).rev() {
        col_strides[i] = col_strides[i + 1] * col_shape[i + 1];
    }
    let others: Vec<usize> = (0..col_shape.len()).filter(|&i| i != k - p).collect();
    let mut col_of = vec![0usize; nk * m];
    for a in 0..nk {
        for j in 0..m {
            let mut rem = j;
            let mut idx = a * col_strides[k - p];
            for &o in others.iter().rev() {
                idx += (rem % col_shape[o]) * col_strides[o];
                rem /= col_shape[o];
            }
            col_of[a * m + j] = idx;
        }
    }

    let n = nk * rk;
    let mut h = vec![0.0; n * n];
    for a in 0..nk {
        for b in 0..nk {
            for j in 0..m {
                let ca = col_of[a * m + j];
                for jp in 0..m {
                    let cab = problem.c[ca * cols + col_of[b * m + jp]];
                    if cab == 0.0 {
                        continue;
                    }
                    for rho in 0..rk {
                        let krow = &kmat[(j * rk + rho) * w2 + jp * rk..(j * rk + rho) * w2 + jp * rk + rk];
                        let hrow = &mut h[(a * rk + rho) * n + b * rk..(a * rk + rho) * n + b * rk + rk];
                        for (hv, kv) in hrow.iter_mut().zip(krow) {
                            *hv += cab * kv;
                        }
                    }
                }
            }
        }
    }
    // g[a, ρ] = Σ_{row, j} (W·C)[row, col(a, j)] · F[row, j, ρ]
    let wct = Tensor::from_parts(vec![rows, cols], wc.to_vec()).transpose()?;
    let mm = matmul_raw(wct.data(), fp.data(), cols, rows, w2);
    let mut g = vec![0.0; n];
    for a in 0..nk {
        for j in 0..m {
            let c = col_of[a * m + j];
            for rho in 0..rk {
                g[a * rk + rho] += mm[c * w2 + j * rk + rho];
            }
        }
    }
    let (u, truncated) = solve_psd(
        &Tensor::from_parts(vec![n, n], h),
        &Tensor::from_parts(vec![n, 1], g),
        threshold,
    )?;
    Ok((u.into_shape(&[nk, rk])?, truncated))
}

fn chain_cores(layer: &CompressedLayer) -> Vec<Tensor> {
    match layer.payload() {
        Payload::Tt { cores } | Payload::Tr { cores } => cores.clone(),
        _ => unreachable!("chain layer"),
    }
}

fn with_cores(layer: &CompressedLayer, cores: Vec<Tensor>) -> CompressedLayer {
    let mut out = layer.clone();
    match out.payload_mut() {
        Payload::Tt { cores: c } | Payload::Tr { cores: c } => *c = cores,
        _ => unreachable!("chain layer"),
    }
    out
}

/// Product of every core but `k`, in cyclic order from `k + 1`, laid out
/// as `[rest][a][b]` with `a` the left bond of core `k` and `b` its right
/// bond.
fn environment(cores: &[Tensor], k: usize) -> (Vec<f64>, usize) {
    let d = cores.len();
    let first = &cores[(k + 1) % d];
    let r_left = first.shape()[0];
    let mut outer = first.shape()[1];
    let mut bond = first.shape()[2];
    let mut acc = first.data().to_vec();
    for s in 2..d {
        let c = &cores[(k + s) % d];
        let (n, next) = (c.shape()[1], c.shape()[2]);
        acc = matmul_raw(&acc, c.data(), r_left * outer, bond, n * next);
        outer *= n;
        bond = next;
    }
    // acc is (b, rest, a)
    let (ra, rb) = (bond, r_left);
    let mut env = vec![0.0; outer * ra * rb];
    for b in 0..rb {
        for rest in 0..outer {
            for a in 0..ra {
                env[(rest * ra + a) * rb + b] = acc[(b * outer + rest) * ra + a];
            }
        }
    }
    (env, outer)
}

fn chain_sweep(
    layer: &mut CompressedLayer,
    problem: &Problem,
    cfg: &HealConfig,
    current: &mut f64,
    trace: &mut LayerHealTrace,
) -> Result<()> {
    let mode_shape = layer.mode_shape().to_vec();
    let d = mode_shape.len();
    for k in 0..d {
        let cores = chain_cores(layer);
        let (ra, nk, rb) = (cores[k].shape()[0], cores[k].shape()[1], cores[k].shape()[2]);
        let (env, rest) = environment(&cores, k);
        let perm: Vec<usize> = (0..d).map(|s| (k + s) % d).collect();
        let mut inverse = vec![0usize; d];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }

        // ∇J = −2 · contraction of (W − Ŵ)·C with the environment
        let r = Tensor::from_parts(mode_shape.clone(), problem.weighted_residual(layer)).permute(&perm)?;
        let mg = matmul_raw(r.data(), &env, nk, rest, ra * rb);
        let mut grad = vec![0.0; ra * nk * rb];
        for i in 0..nk {
            for a in 0..ra {
                for b in 0..rb {
                    grad[(a * nk + i) * rb + b] = -2.0 * mg[i * ra * rb + a * rb + b];
                }
            }
        }
        let g2: f64 = grad.iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            continue;
        }

        // q = J's curvature along the gradient
        let mut gm = vec![0.0; nk * ra * rb];
        for i in 0..nk {
            for a in 0..ra {
                for b in 0..rb {
                    gm[i * ra * rb + a * rb + b] = grad[(a * nk + i) * rb + b];
                }
            }
        }
        let env_t = Tensor::from_parts(vec![rest, ra * rb], env).transpose()?;
        let delta = matmul_raw(&gm, env_t.data(), nk, ra * rb, rest);
        let perm_shape: Vec<usize> = perm.iter().map(|&p| mode_shape[p]).collect();
        let delta = Tensor::from_parts(perm_shape, delta).permute(&inverse)?;
        let q = problem.quad(delta.data());
        if !(q > 0.0) {
            continue;
        }

        let mut eta = cfg.step_init;
        let mut done = false;
        for _ in 0..=cfg.max_halvings {
            let t = eta * g2 / (2.0 * q);
            let mut next = cores.clone();
            next[k]
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(v, g)| *v -= t * g);
            let candidate = with_cores(layer, next);
            let j = problem.objective(&candidate);
            if j.is_finite() && j <= *current {
                *layer = candidate;
                *current = j;
                trace.accepted += 1;
                done = true;
                break;
            }
            eta *= 0.5;
        }
        if !done {
            trace.rejected += 1;
        }
    }
    Ok(())
}
