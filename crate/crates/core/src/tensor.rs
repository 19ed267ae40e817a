//! Dense row-major tensors.
//!
//! Layout is row-major with the last index varying fastest. The mode-`k`
//! unfolding places mode `k` on the rows and enumerates the remaining modes on
//! the columns in increasing mode order, again with the last varying fastest.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the size, mode and finiteness invariants.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "mode sizes must be positive, got {:?}", shape);
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            bail!(Shape, "shape {:?} needs {} entries, got {}", shape, len, data.len());
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            bail!(Numerics, "non-finite entry at flat index {}", pos);
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Unchecked constructor for internal paths whose outputs are finite and
    /// correctly sized by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; len])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            increment_index(&mut idx, shape);
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(index, &self.shape)]
    }

    #[inline]
    pub(crate) fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.squared_norm())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "mode sizes must be positive, got {:?}", shape);
        }
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    /// Views a matrix as a tensor of `mode_shape`; the flat data is unchanged.
    pub fn reshape_to_modes(&self, mode_shape: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            bail!(Shape, "expected a matrix, got shape {:?}", self.shape);
        }
        if !(2..=6).contains(&mode_shape.len()) {
            bail!(Shape, "mode shape must have 2 to 6 modes, got {}", mode_shape.len());
        }
        self.reshape(mode_shape)
    }

    /// Mode-`mode` matricization.
    pub fn unfold(&self, mode: usize) -> Result<Self> {
        if mode >= self.rank() {
            return Err(Error::Index(alloc::format!(
                "mode {} out of range for rank {}",
                mode,
                self.rank()
            )));
        }
        let n = self.shape[mode];
        let outer: usize = self.shape[..mode].iter().product();
        let inner: usize = self.shape[mode + 1..].iter().product();
        let cols = outer * inner;
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..n {
                let src = &self.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                out[i * cols + o * inner..i * cols + (o + 1) * inner].copy_from_slice(src);
            }
        }
        Ok(Self::from_parts(vec![n, cols], out))
    }

    /// Inverse of [`Tensor::unfold`].
    pub fn fold(matrix: &Tensor, mode: usize, shape: &[usize]) -> Result<Self> {
        if mode >= shape.len() {
            bail!(Index, "mode {} out of range for rank {}", mode, shape.len());
        }
        let n = shape[mode];
        let outer: usize = shape[..mode].iter().product();
        let inner: usize = shape[mode + 1..].iter().product();
        let cols = outer * inner;
        if matrix.shape() != [n, cols] {
            bail!(
                Shape,
                "matrix {:?} is not a mode-{} unfolding of {:?}",
                matrix.shape(),
                mode,
                shape
            );
        }
        let mut out = vec![0.0; matrix.len()];
        for o in 0..outer {
            for i in 0..n {
                let dst = &mut out[(o * n + i) * inner..(o * n + i + 1) * inner];
                dst.copy_from_slice(&matrix.data[i * cols + o * inner..i * cols + (o + 1) * inner]);
            }
        }
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    /// Reorders modes: output mode `k` is input mode `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let d = self.rank();
        let mut seen = vec![false; d];
        if perm.len() != d || perm.iter().any(|&p| p >= d || core::mem::replace(&mut seen[p], true)) {
            bail!(Index, "{:?} is not a permutation of {} modes", perm, d);
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides = strides(&self.shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; d];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            // odometer over the output index, tracking the source offset
            for k in (0..d).rev() {
                idx[k] += 1;
                src += perm_strides[k];
                if idx[k] < new_shape[k] {
                    break;
                }
                src -= perm_strides[k] * new_shape[k];
                idx[k] = 0;
            }
        }
        Ok(Self::from_parts(new_shape, out))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            bail!(Shape, "transpose needs a matrix, got {:?}", self.shape);
        }
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            bail!(Shape, "cannot multiply {:?} by {:?}", self.shape, other.shape);
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Self::from_parts(
            vec![m, n],
            matmul_raw(&self.data, &other.data, m, k, n),
        ))
    }

    /// Mode product `self ×_mode matrix`, with `matrix` of shape `(J, shape[mode])`.
    pub fn mode_product(&self, mode: usize, matrix: &Tensor) -> Result<Self> {
        if mode >= self.rank() {
            bail!(Index, "mode {} out of range for rank {}", mode, self.rank());
        }
        if matrix.rank() != 2 || matrix.cols() != self.shape[mode] {
            bail!(
                Shape,
                "mode-{} product of {:?} with {:?}",
                mode,
                self.shape,
                matrix.shape()
            );
        }
        let j = matrix.rows();
        let n = self.shape[mode];
        let outer: usize = self.shape[..mode].iter().product();
        let inner: usize = self.shape[mode + 1..].iter().product();
        let mut out = vec![0.0; outer * j * inner];
        for o in 0..outer {
            let src = &self.data[o * n * inner..(o + 1) * n * inner];
            let dst = &mut out[o * j * inner..(o + 1) * j * inner];
            for a in 0..j {
                let row = &mut dst[a * inner..(a + 1) * inner];
                for i in 0..n {
                    let w = matrix.data[a * n + i];
                    if w == 0.0 {
                        continue;
                    }
                    for (r, s) in row.iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                        *r += w * s;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[mode] = j;
        Ok(Self::from_parts(shape, out))
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub(crate) fn sub(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major `(m×k)·(k×n)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let w = a[i * k + p];
            if w == 0.0 {
                continue;
            }
            for (o, x) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += w * x;
            }
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

pub(crate) fn flat_index(index: &[usize], shape: &[usize]) -> usize {
    index.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + i)
}

pub(crate) fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Contracts `a_modes` of `a` against `b_modes` of `b`.
///
/// The result carries the free modes of `a` in order, followed by the free
/// modes of `b` in order.
pub fn contract(a: &Tensor, a_modes: &[usize], b: &Tensor, b_modes: &[usize]) -> Result<Tensor> {
    Ok(contract_counted(a, a_modes, b, b_modes)?.0)
}

/// As [`contract`], also returning the number of multiply-adds performed.
pub(crate) fn contract_counted(
    a: &Tensor,
    a_modes: &[usize],
    b: &Tensor,
    b_modes: &[usize],
) -> Result<(Tensor, u64)> {
    if a_modes.len() != b_modes.len() {
        bail!(Shape, "paired mode lists differ in length");
    }
    for (&ma, &mb) in a_modes.iter().zip(b_modes) {
        if ma >= a.rank() || mb >= b.rank() {
            bail!(Index, "contracted mode out of range");
        }
        if a.shape[ma] != b.shape[mb] {
            bail!(
                Shape,
                "mode {} of {:?} does not match mode {} of {:?}",
                ma,
                a.shape,
                mb,
                b.shape
            );
        }
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|m| !a_modes.contains(m)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|m| !b_modes.contains(m)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(a_modes).copied().collect();
    let perm_b: Vec<usize> = b_modes.iter().chain(&free_b).copied().collect();
    let a_t = a.permute(&perm_a)?;
    let b_t = b.permute(&perm_b)?;

    let fa: usize = free_a.iter().map(|&m| a.shape[m]).product();
    let kk: usize = a_modes.iter().map(|&m| a.shape[m]).product();
    let fb: usize = free_b.iter().map(|&m| b.shape[m]).product();

    let data = matmul_raw(&a_t.data, &b_t.data, fa, kk, fb);
    let shape: Vec<usize> = free_a
        .iter()
        .map(|&m| a.shape[m])
        .chain(free_b.iter().map(|&m| b.shape[m]))
        .collect();
    Ok((Tensor::from_parts(shape, data), (fa * kk * fb) as u64))
}

/// `‖a − b‖_F / ‖a‖_F`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        bail!(Shape, "relative error of {:?} vs {:?}", a.shape, b.shape);
    }
    let reference = a.frobenius_norm();
    if reference == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(math::sqrt(diff) / reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counting(shape: &[usize]) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::Numerics(_))
        ));
    }

    #[test]
    fn reshape_to_modes_keeps_layout() {
        let m = counting(&[4, 4]);
        let t = m.reshape_to_modes(&[2, 2, 2, 2]).unwrap();
        assert_eq!(t.data(), m.data());
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        assert_eq!(t.reshape(&[4, 4]).unwrap(), m);

        let m = counting(&[6, 4]);
        let t = m.reshape_to_modes(&[2, 3, 4]).unwrap();
        assert_eq!(t.data(), m.data());

        assert!(matches!(
            counting(&[4, 4]).reshape_to_modes(&[3, 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unfold_follows_layout_convention() {
        let t = Tensor::from_fn(&[2, 2, 2], |i| (4 * i[0] + 2 * i[1] + i[2]) as f64).unwrap();
        let m0 = t.unfold(0).unwrap();
        assert_eq!(m0.shape(), &[2, 4]);
        assert_eq!(m0.data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let m2 = t.unfold(2).unwrap();
        assert_eq!(m2.data(), &[0., 2., 4., 6., 1., 3., 5., 7.]);
        assert!(matches!(t.unfold(3), Err(Error::Index(_))));
    }

    #[test]
    fn unfold_matches_brute_force_enumeration() {
        let shape = [3, 2, 4, 2];
        let t = Tensor::from_fn(&shape, |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64 + 0.5 * i[3] as f64)
            .unwrap();
        for mode in 0..shape.len() {
            let m = t.unfold(mode).unwrap();
            let rest: Vec<usize> = (0..shape.len()).filter(|&k| k != mode).collect();
            let rest_shape: Vec<usize> = rest.iter().map(|&k| shape[k]).collect();
            let mut col = 0;
            let mut ridx = vec![0; rest.len()];
            loop {
                for r in 0..shape[mode] {
                    let mut full = vec![0; shape.len()];
                    full[mode] = r;
                    for (p, &k) in rest.iter().enumerate() {
                        full[k] = ridx[p];
                    }
                    assert_eq!(m.at(r, col), t.get(&full));
                }
                col += 1;
                if col == m.cols() {
                    break;
                }
                increment_index(&mut ridx, &rest_shape);
            }
        }
    }

    #[test]
    fn contraction_examples() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = contract(&a, &[1], &b, &[0]).unwrap();
        assert_eq!(c, a.matmul(&b).unwrap());
        assert_eq!(c.data(), &[58., 64., 139., 154.]);

        // identity over one mode reorders but keeps values
        let t = counting(&[2, 3, 4]);
        let id = Tensor::identity(3);
        let r = contract(&t, &[1], &id, &[0]).unwrap();
        assert_eq!(r, t.permute(&[0, 2, 1]).unwrap());

        // contraction with ones over mode 1 gives mode-1 sums
        let ones = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let s = contract(&t, &[1], &ones, &[0]).unwrap();
        assert_eq!(s.shape(), &[2, 4]);
        for i in 0..2 {
            for k in 0..4 {
                let expected: f64 = (0..3).map(|j| t.get(&[i, j, k])).sum();
                assert_eq!(s.get(&[i, k]), expected);
            }
        }

        assert!(contract(&a, &[1], &a, &[1]).is_ok());
        assert!(matches!(contract(&a, &[0], &b, &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn relative_error_examples() {
        let a = Tensor::new(vec![2], vec![3., 4.]).unwrap();
        let z = Tensor::zeros(&[2]);
        assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
        assert_eq!(relative_error(&a, &z).unwrap(), 1.0);
        assert_eq!(relative_error(&z, &a), Err(Error::DegenerateReference));
    }

    #[test]
    fn mode_product_matches_unfolded_matmul() {
        let t = counting(&[2, 3, 4]);
        let m = Tensor::from_fn(&[5, 3], |i| (i[0] as f64) - 0.5 * i[1] as f64).unwrap();
        let p = t.mode_product(1, &m).unwrap();
        let via = Tensor::fold(&m.matmul(&t.unfold(1).unwrap()).unwrap(), 1, &[2, 5, 4]).unwrap();
        assert_eq!(p, via);
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=6, 1..=5)
    }

    proptest! {
        #[test]
        fn fold_unfold_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
            let t = Tensor::new(shape.clone(), data).unwrap();
            for k in 0..shape.len() {
                let back = Tensor::fold(&t.unfold(k).unwrap(), k, &shape).unwrap();
                prop_assert_eq!(&back, &t);
            }
        }

        #[test]
        fn permute_round_trip(shape in prop::collection::vec(1usize..=4, 2..=4)) {
            let t = counting(&shape);
            let d = shape.len();
            let perm: Vec<usize> = (0..d).rev().collect();
            let back = t.permute(&perm).unwrap().permute(&perm).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
