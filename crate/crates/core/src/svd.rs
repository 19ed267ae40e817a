//! Deterministic truncated SVD via one-sided Jacobi rotations.
//!
//! Cyclic sweeps rotate column pairs until every pair is orthogonal to a
//! relative cosine of `1e-12` (at most 60 sweeps). Singular values come out
//! sorted non-increasing; the entry of largest magnitude in each left singular
//! vector is made positive (lowest row index on ties) and the matching right
//! vector is flipped with it. Left/right blocks are completed to orthonormal
//! columns when the matrix is rank deficient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor;

const ROTATION_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum TruncationPolicy {
    FixedRank(usize),
    RelativeError(f64),
    ParamBudget(usize),
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationPolicy::FixedRank(r) if r < 1 => bail!(Rank, "fixed rank must be >= 1"),
            TruncationPolicy::RelativeError(e) if !(e > 0.0 && e <= 1.0) => {
                bail!(InvalidArgument, "relative error {} outside (0, 1]", e)
            }
            TruncationPolicy::ParamBudget(p) if p < 1 => {
                bail!(InvalidArgument, "parameter budget must be >= 1")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `m × r`, orthonormal columns.
    pub left_vectors: Tensor,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub right_vectors: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U·diag(S)·Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let m = self.left_vectors.rows();
        let n = self.right_vectors.rows();
        let r = self.rank();
        let mut us = self.left_vectors.clone();
        for i in 0..m {
            for j in 0..r {
                us.data_mut()[i * r + j] *= self.singular_values[j];
            }
        }
        let vt = self.right_vectors.transpose().expect("matrix");
        let out = crate::tensor::matmul_raw(us.data(), vt.data(), m, r, n);
        Tensor::from_parts(vec![m, n], out)
    }

    /// Keeps the leading `r` triplets.
    pub fn truncate(&self, r: usize) -> SvdResult {
        SvdResult {
            left_vectors: leading_columns(&self.left_vectors, r),
            singular_values: self.singular_values[..r].to_vec(),
            right_vectors: leading_columns(&self.right_vectors, r),
        }
    }

    /// `diag(S)·Vᵀ` as an `r × n` matrix.
    pub fn weighted_right(&self) -> Tensor {
        let n = self.right_vectors.rows();
        let r = self.rank();
        let mut out = vec![0.0; r * n];
        for j in 0..n {
            for k in 0..r {
                out[k * n + j] = self.singular_values[k] * self.right_vectors.at(j, k);
            }
        }
        Tensor::from_parts(vec![r, n], out)
    }
}

pub(crate) fn leading_columns(m: &Tensor, r: usize) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    debug_assert!(r <= cols);
    let mut out = Vec::with_capacity(rows * r);
    for i in 0..rows {
        out.extend_from_slice(&m.data()[i * cols..i * cols + r]);
    }
    Tensor::from_parts(vec![rows, r], out)
}

/// Thin SVD with `min(m, n)` triplets.
pub fn svd(m: &Tensor) -> Result<SvdResult> {
    if m.rank() != 2 {
        bail!(Shape, "svd needs a matrix, got shape {:?}", m.shape());
    }
    if !m.is_finite() {
        bail!(Numerics, "svd input contains non-finite entries");
    }
    let (rows, cols) = (m.rows(), m.cols());
    if rows >= cols {
        let (u, s, v) = jacobi_tall(m.data(), rows, cols);
        Ok(finish(u, s, v, rows, cols))
    } else {
        let t = m.transpose()?;
        let (u, s, v) = jacobi_tall(t.data(), cols, rows);
        // Aᵀ = U S Vᵀ  =>  A = V S Uᵀ
        Ok(finish(v, s, u, rows, cols))
    }
}

/// Truncated SVD under `policy`.
///
/// * `FixedRank(r)`: exactly `r` triplets (`r ≤ min(m, n)`), zero-padded when
///   the numerical rank is smaller.
/// * `RelativeError(ε)`: the smallest `r` with `‖m − m_r‖_F ≤ ε‖m‖_F`.
/// * `ParamBudget(p)`: the largest `r` with `r·(m + n + 1) ≤ p`.
pub fn truncated_svd(m: &Tensor, policy: TruncationPolicy) -> Result<SvdResult> {
    policy.validate()?;
    if m.rank() != 2 {
        bail!(Shape, "svd needs a matrix, got shape {:?}", m.shape());
    }
    let (rows, cols) = (m.rows(), m.cols());
    let full = rows.min(cols);
    if let TruncationPolicy::FixedRank(r) = policy {
        if r > full {
            bail!(Rank, "rank {} exceeds min({}, {})", r, rows, cols);
        }
    }
    if let TruncationPolicy::ParamBudget(p) = policy {
        if p < rows + cols + 1 {
            return Err(Error::InfeasibleBudget {
                budget: p,
                minimum: rows + cols + 1,
            });
        }
    }
    let result = svd(m)?;
    let r = rank_for_policy(&result.singular_values, rows, cols, policy);
    Ok(result.truncate(r))
}

pub(crate) fn rank_for_policy(s: &[f64], rows: usize, cols: usize, policy: TruncationPolicy) -> usize {
    let full = s.len();
    match policy {
        TruncationPolicy::FixedRank(r) => r.min(full),
        TruncationPolicy::ParamBudget(p) => (p / (rows + cols + 1)).clamp(1, full),
        TruncationPolicy::RelativeError(eps) => {
            let tail = tail_energies(s);
            let threshold = eps * eps * tail[0];
            (1..=full).find(|&r| tail[r] <= threshold).unwrap_or(full)
        }
    }
}

/// `tail[r] = Σ_{i ≥ r} σ_i²`, with `tail[len] = 0`.
pub(crate) fn tail_energies(s: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; s.len() + 1];
    for i in (0..s.len()).rev() {
        tail[i] = tail[i + 1] + s[i] * s[i];
    }
    tail
}

/// One-sided Jacobi on a row-major `m × n` matrix with `m ≥ n`.
///
/// Returns column-major `U` (`m × n`, unnormalised columns are `A·V`), the
/// column norms and column-major `V` (`n × n`).
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            u[j * m + i] = a[i * n + j];
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &u[p * m..(p + 1) * m];
                    let cq = &u[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || math::abs(gamma) <= ROTATION_TOL * math::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + math::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + math::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut u, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| math::sqrt(u[j * m..(j + 1) * m].iter().map(|x| x * x).sum()))
        .collect();
    (u, norms, v)
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Sorts, normalises, completes and sign-fixes the Jacobi output.
///
/// `u_cols` holds `k` column-major columns of length `lu`; `v_cols` holds `k`
/// columns of length `lv`. The output is expressed for the original
/// `rows × cols` matrix, with `left` of length `rows`.
fn finish(u_cols: Vec<f64>, norms: Vec<f64>, v_cols: Vec<f64>, rows: usize, cols: usize) -> SvdResult {
    let k = norms.len();
    // For tall inputs the left buffer holds the unnormalised `A·V` columns;
    // for wide inputs (solved transposed) the right buffer does.
    let tall = rows >= cols;
    let (left_len, right_len) = (rows, cols);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let sigma_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let tiny = sigma_max * (rows.max(cols) as f64) * f64::EPSILON;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut deficient = Vec::new();
    for (pos, &j) in order.iter().enumerate() {
        let lcol = &u_cols[j * left_len..(j + 1) * left_len];
        let rcol = &v_cols[j * right_len..(j + 1) * right_len];
        let s = norms[j];
        if tall {
            // left = A·v / σ
            if s > tiny && s > 0.0 {
                left.push(lcol.iter().map(|x| x / s).collect());
            } else {
                left.push(vec![0.0; left_len]);
                deficient.push(pos);
            }
            right.push(rcol.to_vec());
        } else {
            // right = Aᵀ·u / σ, left = orthogonal rotation vector
            left.push(lcol.to_vec());
            if s > tiny && s > 0.0 {
                right.push(rcol.iter().map(|x| x / s).collect());
            } else {
                right.push(vec![0.0; right_len]);
                deficient.push(pos);
            }
        }
        sigma.push(if s > tiny { s } else { 0.0 });
    }
    if tall {
        complete_columns(&mut left, &deficient);
    } else {
        complete_columns(&mut right, &deficient);
    }

    for j in 0..k {
        let col = &left[j];
        let mut best = 0;
        for i in 1..col.len() {
            if math::abs(col[i]) > math::abs(col[best]) {
                best = i;
            }
        }
        if col[best] < 0.0 {
            left[j].iter_mut().for_each(|x| *x = -*x);
            right[j].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut u = vec![0.0; left_len * k];
    let mut v = vec![0.0; right_len * k];
    for j in 0..k {
        for i in 0..left_len {
            u[i * k + j] = left[j][i];
        }
        for i in 0..right_len {
            v[i * k + j] = right[j][i];
        }
    }
    SvdResult {
        left_vectors: Tensor::from_parts(vec![left_len, k], u),
        singular_values: sigma,
        right_vectors: Tensor::from_parts(vec![right_len, k], v),
    }
}

/// Replaces the columns at `missing` by unit vectors orthogonal to all other
/// columns, scanning the standard basis in order.
pub(crate) fn complete_columns(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let len = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        while candidate < len {
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot || (missing.contains(&j) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let dot: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = math::sqrt(e.iter().map(|x| x * x).sum());
            if norm > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Leading `r` left singular vectors of `m`, completed to `r` orthonormal
/// columns when `r` exceeds `min(rows, cols)`.
pub(crate) fn leading_left_vectors(m: &Tensor, r: usize) -> Result<Tensor> {
    let rows = m.rows();
    if r > rows {
        bail!(Rank, "cannot take {} orthonormal columns of length {}", r, rows);
    }
    let s = svd(m)?;
    let k = s.rank();
    if r <= k {
        return Ok(leading_columns(&s.left_vectors, r));
    }
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..rows).map(|i| s.left_vectors.at(i, j)).collect())
        .collect();
    cols.extend((k..r).map(|_| vec![0.0; rows]));
    let missing: Vec<usize> = (k..r).collect();
    complete_columns(&mut cols, &missing);
    let mut out = vec![0.0; rows * r];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..rows {
            out[i * r + j] = c[i];
        }
    }
    Ok(Tensor::from_parts(vec![rows, r], out))
}
