use alloc::vec::Vec;

use super::{CompressedLayer, Payload};
use crate::error::{bail, Result};
use crate::math;
use crate::svd::leading_left_vectors;
use crate::tensor::Tensor;

/// Slack for accepting a HOOI sweep, relative to `‖t‖`.
const HOOI_SLACK: f64 = 1e-12;

/// Tucker decomposition: HOSVD initialisation refined by `hooi_iters` HOOI
/// sweeps.
pub fn tucker_decompose(t: &Tensor, ranks: &[usize], hooi_iters: usize) -> Result<CompressedLayer> {
    Ok(tucker_decompose_traced(t, ranks, hooi_iters)?.0)
}

/// As [`tucker_decompose`], also returning the relative reconstruction error
/// after HOSVD and after each accepted HOOI sweep.
///
/// A sweep that would increase the error beyond a `1e-12` relative slack is
/// discarded and iteration stops.
pub fn tucker_decompose_traced(
    t: &Tensor,
    ranks: &[usize],
    hooi_iters: usize,
) -> Result<(CompressedLayer, Vec<f64>)> {
    let d = t.rank();
    if ranks.len() != d {
        bail!(Rank, "expected {} Tucker ranks, got {}", d, ranks.len());
    }
    for (k, (&r, &n)) in ranks.iter().zip(t.shape()).enumerate() {
        if r < 1 || r > n {
            bail!(Rank, "Tucker rank {} for mode {} outside [1, {}]", r, k, n);
        }
    }
    let norm_sq = t.squared_norm();
    let rel = |core: &Tensor| {
        if norm_sq == 0.0 {
            0.0
        } else {
            math::sqrt((norm_sq - core.squared_norm()).max(0.0) / norm_sq)
        }
    };

    let mut factors = Vec::with_capacity(d);
    for (k, &r) in ranks.iter().enumerate() {
        factors.push(leading_left_vectors(&t.unfold(k)?, r)?);
    }
    let mut core = project(t, &factors, None)?;
    let mut history = alloc::vec![rel(&core)];

    for _ in 0..hooi_iters {
        let mut next = factors.clone();
        for k in 0..d {
            let y = project(t, &next, Some(k))?;
            next[k] = leading_left_vectors(&y.unfold(k)?, ranks[k])?;
        }
        let next_core = project(t, &next, None)?;
        let err = rel(&next_core);
        let prev = *history.last().expect("non-empty");
        if err > prev + HOOI_SLACK {
            break;
        }
        factors = next;
        core = next_core;
        history.push(err);
    }

    let layer = CompressedLayer::new_unchecked(t.shape().to_vec(), Payload::Tucker { core, factors });
    Ok((layer, history))
}

/// `t ×_j U_jᵀ` over all modes except `skip`.
fn project(t: &Tensor, factors: &[Tensor], skip: Option<usize>) -> Result<Tensor> {
    let mut y = t.clone();
    for (j, f) in factors.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        y = y.mode_product(j, &f.transpose()?)?;
    }
    Ok(y)
}

pub(crate) fn tucker_reconstruct(core: &Tensor, factors: &[Tensor]) -> Tensor {
    let mut y = core.clone();
    for (k, f) in factors.iter().enumerate() {
        y = y.mode_product(k, f).expect("validated factor shapes");
    }
    y
}
