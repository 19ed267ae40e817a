//! Tensor-train and tensor-ring decompositions.
//!
//! A tensor train is a ring whose cyclic bond has size 1, so both share the
//! sequential SVD sweep and the trace reconstruction below.

use alloc::vec;
use alloc::vec::Vec;

use super::{CompressedLayer, Payload};
use crate::error::{bail, Result};
use crate::svd::{truncated_svd, TruncationPolicy};
use crate::tensor::{matmul_raw, Tensor};

/// TT-SVD. `policies` holds one policy per bond (`d − 1`) or a single policy
/// applied to every bond. Fixed ranks are clamped to what each unfolding
/// supports.
pub fn tt_decompose(t: &Tensor, policies: &[TruncationPolicy]) -> Result<CompressedLayer> {
    let d = t.rank();
    if d < 2 {
        bail!(Shape, "tensor train needs at least 2 modes, got {}", d);
    }
    if policies.len() != 1 && policies.len() != d - 1 {
        bail!(InvalidArgument, "expected 1 or {} policies, got {}", d - 1, policies.len());
    }
    for p in policies {
        p.validate()?;
    }
    let policy_at = |k: usize| policies[if policies.len() == 1 { 0 } else { k }];
    let cores = sweep(t.data().to_vec(), 1, t.shape(), 1, policy_at)?;
    Ok(CompressedLayer::new_unchecked(t.shape().to_vec(), Payload::Tt { cores }))
}

/// TR-SVD with cyclic ranks `ranks` (`ranks[k]` is the left rank of core
/// `k`; core `d − 1` closes the ring back to `ranks[0]`).
///
/// The first split needs `ranks[0]·ranks[1] ≤ min(n_0, Π_{k>0} n_k)`; later
/// bonds are clamped to their unfoldings.
pub fn tr_decompose(t: &Tensor, ranks: &[usize]) -> Result<CompressedLayer> {
    let d = t.rank();
    if d < 2 {
        bail!(Shape, "tensor ring needs at least 2 modes, got {}", d);
    }
    if ranks.len() != d {
        bail!(Rank, "expected {} ring ranks, got {}", d, ranks.len());
    }
    if ranks.iter().any(|&r| r < 1) {
        bail!(Rank, "ring ranks must be >= 1, got {:?}", ranks);
    }
    let shape = t.shape();
    let (r0, r1) = (ranks[0], ranks[1]);
    let n0 = shape[0];
    let rest = t.len() / n0;
    if r0 * r1 > n0.min(rest) {
        bail!(Rank, "first ring split {}·{} exceeds min({}, {})", r0, r1, n0, rest);
    }

    let m = t.reshape(&[n0, rest])?;
    let s = truncated_svd(&m, TruncationPolicy::FixedRank(r0 * r1))?;
    // S·Vᵀ as (α0, α1, rest) moved to (α1, rest, α0)
    let remainder = s
        .weighted_right()
        .into_shape(&[r0, r1, rest])?
        .permute(&[1, 2, 0])?;
    // column j of U splits as (α0, α1) with j = α0·r1 + α1
    let first = s
        .left_vectors
        .into_shape(&[n0, r0, r1])?
        .permute(&[1, 0, 2])?;

    let policy_at = |k: usize| TruncationPolicy::FixedRank(ranks[k + 2]);
    let mut cores = vec![first];
    cores.extend(sweep(remainder.into_data(), r1, &shape[1..], r0, policy_at)?);
    Ok(CompressedLayer::new_unchecked(shape.to_vec(), Payload::Tr { cores }))
}

/// Sequential SVD sweep over `data`, laid out as `(left, modes…, right)`.
/// `policy_at(k)` is the truncation for the bond after mode `k`.
fn sweep(
    mut data: Vec<f64>,
    left: usize,
    modes: &[usize],
    right: usize,
    policy_at: impl Fn(usize) -> TruncationPolicy,
) -> Result<Vec<Tensor>> {
    let d = modes.len();
    let mut cores = Vec::with_capacity(d);
    let mut r_prev = left;
    for (k, &n) in modes.iter().enumerate().take(d - 1) {
        let rows = r_prev * n;
        let cols = data.len() / rows;
        let policy = match policy_at(k) {
            TruncationPolicy::FixedRank(r) => TruncationPolicy::FixedRank(r.min(rows).min(cols)),
            p => p,
        };
        let s = truncated_svd(&Tensor::from_parts(vec![rows, cols], data), policy)?;
        let r = s.rank();
        data = s.weighted_right().into_data();
        cores.push(s.left_vectors.into_shape(&[r_prev, n, r])?);
        r_prev = r;
    }
    cores.push(Tensor::from_parts(vec![r_prev, modes[d - 1], right], data));
    Ok(cores)
}

/// Contracts a chain of order-3 cores and traces the outer bond.
pub(crate) fn chain_reconstruct(cores: &[Tensor]) -> Tensor {
    let r0 = cores[0].shape()[0];
    let mut outer = cores[0].shape()[1];
    let mut acc = cores[0].data().to_vec();
    let mut bond = cores[0].shape()[2];
    for c in &cores[1..] {
        let (n, next) = (c.shape()[1], c.shape()[2]);
        acc = matmul_raw(&acc, c.data(), r0 * outer, bond, n * next);
        outer *= n;
        bond = next;
    }
    // acc is (r0, outer, r0)
    let mut out = vec![0.0; outer];
    for a in 0..r0 {
        for (i, o) in out.iter_mut().enumerate() {
            *o += acc[(a * outer + i) * bond + a];
        }
    }
    let shape: Vec<usize> = cores.iter().map(|c| c.shape()[1]).collect();
    Tensor::from_parts(shape, out)
}
