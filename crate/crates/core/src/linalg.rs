//! Small dense solves used by healing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::svd::svd;
use crate::tensor::{matmul_raw, Tensor};

/// Solves `N·X = B` for symmetric positive semi-definite `N` (`n × n`) and
/// `B` (`n × k`) through an SVD pseudo-inverse, dropping singular values below
/// `threshold · σ_max`. Returns the solution and whether any were dropped.
pub(crate) fn solve_psd(n: &Tensor, b: &Tensor, threshold: f64) -> Result<(Tensor, bool)> {
    let dim = n.rows();
    let k = b.cols();
    let s = svd(n)?;
    let sigma_max = s.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = threshold * sigma_max;
    let kept = s.singular_values.iter().take_while(|&&v| v > cutoff && v > 0.0).count();
    let truncated = kept < dim;

    // X = V · S⁺ · Uᵀ · B, restricted to the kept triplets
    let ut = s.left_vectors.transpose()?;
    let utb = matmul_raw(ut.data(), b.data(), dim, dim, k);
    let mut scaled = vec![0.0; kept * k];
    for i in 0..kept {
        let inv = 1.0 / s.singular_values[i];
        for j in 0..k {
            scaled[i * k + j] = utb[i * k + j] * inv;
        }
    }
    let mut v_kept = Vec::with_capacity(dim * kept);
    for i in 0..dim {
        v_kept.extend_from_slice(&s.right_vectors.data()[i * dim..i * dim + kept]);
    }
    let x = matmul_raw(&v_kept, &scaled, dim, kept, k);
    Ok((Tensor::from_parts(vec![dim, k], x), truncated))
}
