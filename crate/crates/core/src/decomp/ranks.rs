//! Rank bookkeeping and budget-driven rank selection.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{tr_decompose, tt_decompose, tucker_decompose, CompressedLayer, Family};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::svd::{svd, tail_energies, TruncationPolicy};
use crate::tensor::Tensor;

/// Ranks of one family over a fixed mode shape.
///
/// * Tucker: one rank per mode.
/// * TT: one rank per inner bond (`d − 1`).
/// * TR: one rank per core, `ranks[k]` being the left bond of core `k`.
/// * Dense: empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankSpec {
    pub family: Family,
    pub ranks: Vec<usize>,
}

impl RankSpec {
    pub fn new(family: Family, ranks: Vec<usize>) -> Self {
        Self { family, ranks }
    }

    pub fn dense() -> Self {
        Self::new(Family::Dense, Vec::new())
    }

    pub fn param_count(&self, mode_shape: &[usize]) -> usize {
        let r = &self.ranks;
        match self.family {
            Family::Dense => mode_shape.iter().product(),
            Family::Tucker => {
                r.iter().product::<usize>() + mode_shape.iter().zip(r).map(|(n, r)| n * r).sum::<usize>()
            }
            Family::Tt => {
                let d = mode_shape.len();
                (0..d)
                    .map(|k| {
                        let left = if k == 0 { 1 } else { r[k - 1] };
                        let right = if k + 1 == d { 1 } else { r[k] };
                        left * mode_shape[k] * right
                    })
                    .sum()
            }
            Family::Tr => {
                let d = mode_shape.len();
                (0..d).map(|k| r[k] * mode_shape[k] * r[(k + 1) % d]).sum()
            }
        }
    }

    /// Checks that the ranks are exactly realisable by the decomposition of a
    /// tensor with `mode_shape`.
    pub fn validate(&self, mode_shape: &[usize]) -> Result<()> {
        let d = mode_shape.len();
        if self.family == Family::Dense {
            if !self.ranks.is_empty() {
                bail!(Rank, "dense layers carry no ranks");
            }
            return Ok(());
        }
        if d < 2 {
            bail!(Shape, "{} needs at least 2 modes, got {:?}", self.family, mode_shape);
        }
        let expected = if self.family == Family::Tt { d - 1 } else { d };
        if self.ranks.len() != expected {
            bail!(Rank, "{} expects {} ranks, got {}", self.family, expected, self.ranks.len());
        }
        if self.ranks.iter().any(|&r| r < 1) {
            bail!(Rank, "ranks must be >= 1, got {:?}", self.ranks);
        }
        let ok = match self.family {
            Family::Tr => tr_feasible(mode_shape, &self.ranks),
            _ => {
                let max = maximal_ranks(mode_shape, self.family)?;
                self.ranks.iter().zip(&max.ranks).all(|(r, m)| r <= m)
            }
        };
        if !ok {
            bail!(Rank, "{} ranks {:?} not realisable for {:?}", self.family, self.ranks, mode_shape);
        }
        Ok(())
    }
}

/// Largest realisable ranks; these reproduce any tensor exactly.
pub fn maximal_ranks(mode_shape: &[usize], family: Family) -> Result<RankSpec> {
    let d = mode_shape.len();
    if family == Family::Dense {
        return Ok(RankSpec::dense());
    }
    if d < 2 {
        bail!(Shape, "{} needs at least 2 modes, got {:?}", family, mode_shape);
    }
    let total: usize = mode_shape.iter().product();
    let tt: Vec<usize> = (1..d)
        .map(|b| {
            let prefix: usize = mode_shape[..b].iter().product();
            prefix.min(total / prefix)
        })
        .collect();
    let ranks = match family {
        Family::Tucker => mode_shape.iter().map(|&n| n.min(total / n)).collect(),
        Family::Tt => tt,
        Family::Tr => core::iter::once(1).chain(tt).collect(),
        Family::Dense => unreachable!(),
    };
    Ok(RankSpec::new(family, ranks))
}

/// Whether TR-SVD realises `ranks` exactly: the first split must fit in the
/// mode-0 unfolding and every later bond in its sequential unfolding.
fn tr_feasible(mode_shape: &[usize], ranks: &[usize]) -> bool {
    let d = mode_shape.len();
    let total: usize = mode_shape.iter().product();
    let n0 = mode_shape[0];
    if ranks[0] * ranks[1] > n0.min(total / n0) {
        return false;
    }
    let mut suffix = total / n0;
    for k in 1..d - 1 {
        suffix /= mode_shape[k];
        let bound = (ranks[k] * mode_shape[k]).min(suffix * ranks[0]);
        if ranks[k + 1] > bound {
            return false;
        }
    }
    true
}

fn within_max(mode_shape: &[usize], spec: &RankSpec, max: &RankSpec) -> bool {
    match spec.family {
        Family::Tr => tr_feasible(mode_shape, &spec.ranks),
        _ => spec.ranks.iter().zip(&max.ranks).all(|(r, m)| r <= m),
    }
}

/// Ranks whose parameter count fits within `target`.
///
/// A target of at least the dense size yields the maximal ranks. Otherwise
/// the largest uniform rank that fits is raised greedily, one mode at a time
/// in ascending order, until no single increment fits.
pub fn select_ranks(mode_shape: &[usize], family: Family, target: usize) -> Result<RankSpec> {
    let max = maximal_ranks(mode_shape, family)?;
    if family == Family::Dense {
        return Ok(max);
    }
    let full: usize = mode_shape.iter().product();
    if target >= full {
        return Ok(max);
    }
    let mut spec = RankSpec::new(family, vec![1; max.ranks.len()]);
    let minimum = spec.param_count(mode_shape);
    if minimum > target {
        return Err(Error::InfeasibleBudget {
            budget: target,
            minimum,
        });
    }

    for r in 2.. {
        let ranks: Vec<usize> = match family {
            Family::Tr => vec![r; max.ranks.len()],
            _ => max.ranks.iter().map(|&m| r.min(m)).collect(),
        };
        if ranks == spec.ranks {
            break;
        }
        let cand = RankSpec::new(family, ranks);
        if !within_max(mode_shape, &cand, &max) || cand.param_count(mode_shape) > target {
            break;
        }
        spec = cand;
    }

    loop {
        let mut changed = false;
        for k in 0..spec.ranks.len() {
            spec.ranks[k] += 1;
            if within_max(mode_shape, &spec, &max) && spec.param_count(mode_shape) <= target {
                changed = true;
            } else {
                spec.ranks[k] -= 1;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(spec)
}

/// Ranks meeting a relative reconstruction error of `eps`.
///
/// TT (and TR, with a unit cyclic rank) truncates each bond to
/// `eps / √(d − 1)`; Tucker drops at most `eps² / d` of the energy per mode.
pub fn select_ranks_for_error(t: &Tensor, family: Family, eps: f64) -> Result<RankSpec> {
    TruncationPolicy::RelativeError(eps).validate()?;
    let d = t.rank();
    if family == Family::Dense {
        return Ok(RankSpec::dense());
    }
    if d < 2 {
        bail!(Shape, "{} needs at least 2 modes, got {:?}", family, t.shape());
    }
    match family {
        Family::Tucker => {
            let share = eps * eps / d as f64;
            let mut ranks = Vec::with_capacity(d);
            for k in 0..d {
                let s = svd(&t.unfold(k)?)?;
                let tail = tail_energies(&s.singular_values);
                let r = (1..=s.rank()).find(|&r| tail[r] <= share * tail[0]).unwrap_or(s.rank());
                ranks.push(r);
            }
            Ok(RankSpec::new(family, ranks))
        }
        Family::Tt | Family::Tr => {
            let delta = eps / math::sqrt((d - 1) as f64);
            let tt = tt_decompose(t, &[TruncationPolicy::RelativeError(delta)])?.ranks().ranks;
            let ranks = if family == Family::Tr {
                core::iter::once(1).chain(tt).collect()
            } else {
                tt
            };
            Ok(RankSpec::new(family, ranks))
        }
        Family::Dense => unreachable!(),
    }
}

/// Decomposes `t` with exactly the ranks in `spec`.
pub fn decompose(t: &Tensor, spec: &RankSpec, hooi_iters: usize) -> Result<CompressedLayer> {
    spec.validate(t.shape())?;
    match spec.family {
        Family::Dense => bail!(InvalidArgument, "dense is not a tensor network"),
        Family::Tucker => tucker_decompose(t, &spec.ranks, hooi_iters),
        Family::Tt => {
            let policies: Vec<_> = spec.ranks.iter().map(|&r| TruncationPolicy::FixedRank(r)).collect();
            tt_decompose(t, &policies)
        }
        Family::Tr => tr_decompose(t, &spec.ranks),
    }
}

/// Tensor view of a `rows × cols` matrix: rows and columns are each split
/// into their most nearly square factor pair (smaller factor first), primes
/// stay whole and unit modes are dropped. Returns the mode shape and the
/// number of leading row modes.
pub fn matrix_mode_shape(rows: usize, cols: usize) -> (Vec<usize>, usize) {
    fn split(n: usize) -> Vec<usize> {
        if n <= 1 {
            return Vec::new();
        }
        let mut a = math::sqrt(n as f64) as usize;
        while a * a > n {
            a -= 1;
        }
        while (a + 1) * (a + 1) <= n {
            a += 1;
        }
        while !n.is_multiple_of(a) {
            a -= 1;
        }
        if a == 1 {
            vec![n]
        } else {
            vec![a, n / a]
        }
    }
    let mut shape = split(rows);
    let row_modes = shape.len();
    shape.extend(split(cols));
    (shape, row_modes)
}

/// Compresses a weight matrix under `spec`, whose ranks refer to
/// [`matrix_mode_shape`] of the matrix.
pub fn compress_matrix(w: &Tensor, spec: &RankSpec, hooi_iters: usize) -> Result<CompressedLayer> {
    if w.rank() != 2 {
        bail!(Shape, "expected a matrix, got {:?}", w.shape());
    }
    if spec.family == Family::Dense {
        return CompressedLayer::dense(w.clone());
    }
    let (shape, row_modes) = matrix_mode_shape(w.rows(), w.cols());
    if shape.len() < 2 {
        bail!(Shape, "{}x{} matrix has no tensor view", w.rows(), w.cols());
    }
    decompose(&w.reshape(&shape)?, spec, hooi_iters)?.with_row_modes(row_modes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, gaussian_tensor, seeded};
    use crate::tensor::relative_error;
    use proptest::prelude::*;

    /// Every rank vector with entries in `1..=max[k]`.
    fn all_ranks(max: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for &m in max {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (1..=m).map(move |r| {
                        let mut q = p.clone();
                        q.push(r);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn tt_budget_example() {
        let spec = select_ranks(&[8, 8, 8, 8], Family::Tt, 320).unwrap();
        assert_eq!(spec.ranks, vec![4, 4, 4]);
        assert_eq!(spec.param_count(&[8, 8, 8, 8]), 320);
    }

    #[test]
    fn tucker_budget_just_below_uniform() {
        let shape = [8, 8, 8, 8];
        let spec = select_ranks(&shape, Family::Tucker, 383).unwrap();
        assert_eq!(spec.ranks, vec![5, 4, 4, 3]);
        assert_eq!(spec.param_count(&shape), 368);
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        let err = select_ranks(&[8, 8, 8, 8], Family::Tt, 10).unwrap_err();
        assert_eq!(
            err,
            Error::InfeasibleBudget {
                budget: 10,
                minimum: 32
            }
        );
    }

    #[test]
    fn full_budget_gives_exact_reconstruction() {
        let shape = [3, 4, 2, 5];
        let t = gaussian_tensor(&mut seeded(31), &shape);
        for family in Family::NETWORKS {
            let spec = select_ranks(&shape, family, 120).unwrap();
            assert_eq!(spec, maximal_ranks(&shape, family).unwrap());
            let layer = decompose(&t, &spec, 1).unwrap();
            assert!(relative_error(&t, &layer.reconstruct()).unwrap() <= 1e-10, "{}", family);
        }
    }

    #[test]
    fn tr_feasibility_matches_decomposition() {
        let shape = [4, 3, 2];
        let t = gaussian_tensor(&mut seeded(32), &shape);
        for ranks in all_ranks(&[4, 4, 4]) {
            let spec = RankSpec::new(Family::Tr, ranks.clone());
            match decompose(&t, &spec, 0) {
                Ok(layer) => assert_eq!(layer.ranks().ranks, ranks),
                Err(_) => assert!(spec.validate(&shape).is_err()),
            }
        }
    }

    #[test]
    fn error_driven_ranks_meet_tolerance() {
        let t = gaussian_tensor(&mut seeded(33), &[4, 4, 4]);
        for family in Family::NETWORKS {
            for eps in [0.2, 0.5, 0.8] {
                let spec = select_ranks_for_error(&t, family, eps).unwrap();
                let layer = decompose(&t, &spec, 0).unwrap();
                let err = relative_error(&t, &layer.reconstruct()).unwrap();
                assert!(err <= eps + 1e-12, "{} eps {} got {}", family, eps, err);
            }
        }
    }

    #[test]
    fn mode_shapes() {
        assert_eq!(matrix_mode_shape(32, 32), (vec![4, 8, 4, 8], 2));
        assert_eq!(matrix_mode_shape(64, 64), (vec![8, 8, 8, 8], 2));
        assert_eq!(matrix_mode_shape(7, 12), (vec![7, 3, 4], 1));
        assert_eq!(matrix_mode_shape(1, 6), (vec![2, 3], 0));
        assert_eq!(matrix_mode_shape(1, 1), (vec![], 0));
    }

    #[test]
    fn compress_matrix_keeps_matrix_shape() {
        let w = gaussian_matrix(&mut seeded(34), 12, 8);
        let (shape, _) = matrix_mode_shape(12, 8);
        let spec = maximal_ranks(&shape, Family::Tt).unwrap();
        let layer = compress_matrix(&w, &spec, 0).unwrap();
        assert_eq!((layer.rows(), layer.cols()), (12, 8));
        assert!(relative_error(&w, &layer.to_matrix()).unwrap() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selected_ranks_fit_and_are_locally_maximal(
            dims in prop::collection::vec(2usize..6, 2..5),
            frac in 0.0f64..1.2,
            fam in 0usize..3,
        ) {
            let family = Family::NETWORKS[fam];
            let full: usize = dims.iter().product();
            let target = (frac * full as f64) as usize;
            let max = maximal_ranks(&dims, family).unwrap();
            match select_ranks(&dims, family, target) {
                Ok(spec) => {
                    prop_assert!(spec.validate(&dims).is_ok());
                    if target < full {
                        prop_assert!(spec.param_count(&dims) <= target);
                        for k in 0..spec.ranks.len() {
                            let mut up = spec.clone();
                            up.ranks[k] += 1;
                            prop_assert!(
                                !within_max(&dims, &up, &max) || up.param_count(&dims) > target
                            );
                        }
                    } else {
                        prop_assert_eq!(spec, max);
                    }
                }
                Err(Error::InfeasibleBudget { minimum, .. }) => prop_assert!(minimum > target),
                Err(e) => prop_assert!(false, "unexpected {:?}", e),
            }
        }

        #[test]
        fn maximal_ranks_are_exact(seed in 0u64..500, dims in prop::collection::vec(1usize..5, 2..5), fam in 0usize..3) {
            let family = Family::NETWORKS[fam];
            let t = gaussian_tensor(&mut seeded(seed), &dims);
            let spec = maximal_ranks(&dims, family).unwrap();
            let layer = decompose(&t, &spec, 0).unwrap();
            prop_assert!(relative_error(&t, &layer.reconstruct()).unwrap() <= 1e-10);
            prop_assert_eq!(layer.stored_entries(), spec.param_count(&dims));
        }
    }
}
