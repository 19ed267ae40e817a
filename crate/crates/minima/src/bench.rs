//! Wall-clock timing of structured and dense layer application. Numbers are
//! machine dependent and only reported.

use std::hint::black_box;
use std::time::Instant;

use minima_core::decomp::CompressedLayer;
use minima_core::inference::{apply_with_plan, plan_contraction};
use minima_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_REPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub reps: usize,
    pub warmup: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
}

impl TimingStats {
    pub fn from_samples(mut ns: Vec<f64>, warmup: usize) -> Self {
        ns.sort_by(f64::total_cmp);
        Self {
            reps: ns.len(),
            warmup,
            median_ns: quantile(&ns, 0.5),
            iqr_ns: quantile(&ns, 0.75) - quantile(&ns, 0.25),
            min_ns: ns[0],
            max_ns: ns[ns.len() - 1],
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn time<F: FnMut() -> Result<()>>(mut f: F, reps: usize, warmup: usize) -> Result<TimingStats> {
    if reps < MIN_REPS {
        return Err(Error::Usage(format!("micro benchmark needs at least {MIN_REPS} reps, got {reps}")));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_nanos() as f64);
    }
    Ok(TimingStats::from_samples(samples, warmup))
}

/// Times `apply_compressed`-equivalent execution of `layer` on `x` with the
/// contraction plan prepared once up front.
pub fn micro_benchmark(layer: &CompressedLayer, x: &Tensor, reps: usize, warmup: usize) -> Result<TimingStats> {
    let plan = plan_contraction(layer, x.cols());
    time(
        || {
            black_box(apply_with_plan(layer, black_box(x), &plan)?);
            Ok(())
        },
        reps,
        warmup,
    )
}

/// Times the dense product `w · x`.
pub fn dense_benchmark(w: &Tensor, x: &Tensor, reps: usize, warmup: usize) -> Result<TimingStats> {
    time(
        || {
            black_box(w.matmul(black_box(x))?);
            Ok(())
        },
        reps,
        warmup,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use minima_core::decomp::{compress_matrix, select_ranks, Family, matrix_mode_shape};
    use minima_core::rng::{gaussian_matrix, seeded};

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        let s = TimingStats::from_samples(vec![4.0, 1.0, 3.0, 2.0], 0);
        assert_eq!(s.median_ns, 2.5);
        assert_eq!(s.iqr_ns, 1.5);
    }

    #[test]
    fn timings_nonnegative_and_reps_enforced() {
        let mut rng = seeded(5);
        let w = gaussian_matrix(&mut rng, 32, 32);
        let (shape, _) = matrix_mode_shape(32, 32);
        let spec = select_ranks(&shape, Family::Tt, 400).unwrap();
        let layer = compress_matrix(&w, &spec, 0).unwrap();
        let x = gaussian_matrix(&mut rng, 32, 4);
        let s = micro_benchmark(&layer, &x, 10, 1).unwrap();
        assert_eq!(s.reps, 10);
        assert!(s.min_ns >= 0.0 && s.median_ns >= s.min_ns && s.iqr_ns >= 0.0);
        assert!(dense_benchmark(&w, &x, 12, 0).unwrap().median_ns >= 0.0);
        assert!(matches!(micro_benchmark(&layer, &x, 9, 0), Err(Error::Usage(_))));
    }
}
