//! Tucker, tensor-train and tensor-ring compressed layers.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

mod chain;
mod ranks;
mod tucker;

pub use chain::{tr_decompose, tt_decompose};
pub use ranks::{
    compress_matrix, decompose, matrix_mode_shape, maximal_ranks, select_ranks, select_ranks_for_error,
    RankSpec,
};
pub use tucker::{tucker_decompose, tucker_decompose_traced};

pub(crate) use chain::chain_reconstruct;
pub(crate) use tucker::tucker_reconstruct;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dense,
    Tucker,
    Tt,
    Tr,
}

impl Family {
    /// Tensor-network families in tie-break order.
    pub const NETWORKS: [Family; 3] = [Family::Tucker, Family::Tt, Family::Tr];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Dense => "dense",
            Family::Tucker => "tucker",
            Family::Tt => "tt",
            Family::Tr => "tr",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "dense" => Some(Family::Dense),
            "tucker" => Some(Family::Tucker),
            "tt" => Some(Family::Tt),
            "tr" => Some(Family::Tr),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Dense { matrix: Tensor },
    Tucker { core: Tensor, factors: Vec<Tensor> },
    Tt { cores: Vec<Tensor> },
    Tr { cores: Vec<Tensor> },
}

/// A weight block in dense or factorised form.
///
/// `mode_shape` is the tensor view the factors live in; its leading
/// `row_mode_count` modes enumerate matrix rows and the rest enumerate
/// columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedLayer {
    mode_shape: Vec<usize>,
    row_mode_count: usize,
    payload: Payload,
}

impl CompressedLayer {
    pub fn dense(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            bail!(Shape, "dense layer needs a matrix, got {:?}", matrix.shape());
        }
        let mode_shape = matrix.shape().to_vec();
        Self::from_parts(mode_shape, 1, Payload::Dense { matrix })
    }

    /// Assembles a layer from stored parts, checking every structural invariant.
    pub fn from_parts(mode_shape: Vec<usize>, row_mode_count: usize, payload: Payload) -> Result<Self> {
        let layer = Self {
            mode_shape,
            row_mode_count,
            payload,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub(crate) fn new_unchecked(mode_shape: Vec<usize>, payload: Payload) -> Self {
        let row_mode_count = mode_shape.len();
        Self {
            mode_shape,
            row_mode_count,
            payload,
        }
    }

    /// Reassigns how many leading modes map to matrix rows.
    pub fn with_row_modes(mut self, row_mode_count: usize) -> Result<Self> {
        if row_mode_count > self.mode_shape.len() {
            bail!(
                InvalidArgument,
                "row mode count {} exceeds {} modes",
                row_mode_count,
                self.mode_shape.len()
            );
        }
        if let Payload::Dense { matrix } = &mut self.payload {
            let rows: usize = self.mode_shape[..row_mode_count].iter().product();
            let cols: usize = self.mode_shape[row_mode_count..].iter().product();
            *matrix = matrix.reshape(&[rows, cols])?;
        }
        self.row_mode_count = row_mode_count;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mode_shape.len();
        if d == 0 || self.mode_shape.contains(&0) {
            bail!(Shape, "invalid mode shape {:?}", self.mode_shape);
        }
        if self.row_mode_count > d {
            bail!(Shape, "row mode count {} exceeds {} modes", self.row_mode_count, d);
        }
        match &self.payload {
            Payload::Dense { matrix } => {
                if matrix.shape() != [self.rows(), self.cols()] {
                    bail!(Shape, "dense payload {:?} does not match {:?}", matrix.shape(), self.mode_shape);
                }
            }
            Payload::Tucker { core, factors } => {
                if factors.len() != d || core.rank() != d {
                    bail!(Shape, "tucker layer needs {} factors and an order-{} core", d, d);
                }
                for (k, f) in factors.iter().enumerate() {
                    if f.rank() != 2 || f.rows() != self.mode_shape[k] || f.cols() != core.shape()[k] {
                        bail!(Shape, "tucker factor {} has shape {:?}", k, f.shape());
                    }
                }
            }
            Payload::Tt { cores } | Payload::Tr { cores } => {
                if cores.len() != d {
                    bail!(Shape, "chain layer needs {} cores, got {}", d, cores.len());
                }
                for (k, c) in cores.iter().enumerate() {
                    if c.rank() != 3 || c.shape()[1] != self.mode_shape[k] {
                        bail!(Shape, "core {} has shape {:?}", k, c.shape());
                    }
                    let next = &cores[(k + 1) % d];
                    let closes_ring = k + 1 == d;
                    if !closes_ring && c.shape()[2] != next.shape()[0] {
                        bail!(Shape, "bond between cores {} and {} does not match", k, k + 1);
                    }
                }
                let first = cores[0].shape()[0];
                let last = cores[d - 1].shape()[2];
                match &self.payload {
                    Payload::Tt { .. } if first != 1 || last != 1 => {
                        bail!(Shape, "tensor-train boundary ranks must be 1, got {} and {}", first, last)
                    }
                    Payload::Tr { .. } if first != last => {
                        bail!(Shape, "tensor-ring cyclic rank mismatch: {} vs {}", first, last)
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        match self.payload {
            Payload::Dense { .. } => Family::Dense,
            Payload::Tucker { .. } => Family::Tucker,
            Payload::Tt { .. } => Family::Tt,
            Payload::Tr { .. } => Family::Tr,
        }
    }

    pub fn mode_shape(&self) -> &[usize] {
        &self.mode_shape
    }

    pub fn row_mode_count(&self) -> usize {
        self.row_mode_count
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub(crate) fn payload_mut(&mut self) -> &mut Payload {
        &mut self.payload
    }

    pub fn rows(&self) -> usize {
        self.mode_shape[..self.row_mode_count].iter().product()
    }

    pub fn cols(&self) -> usize {
        self.mode_shape[self.row_mode_count..].iter().product()
    }

    /// Ranks as stored: per mode (Tucker), per bond (TT) or cyclic (TR).
    pub fn ranks(&self) -> RankSpec {
        let ranks = match &self.payload {
            Payload::Dense { .. } => Vec::new(),
            Payload::Tucker { core, .. } => core.shape().to_vec(),
            Payload::Tt { cores } => cores[1..].iter().map(|c| c.shape()[0]).collect(),
            Payload::Tr { cores } => cores.iter().map(|c| c.shape()[0]).collect(),
        };
        RankSpec {
            family: self.family(),
            ranks,
        }
    }

    /// Stored scalars, from the rank formula.
    pub fn param_count(&self) -> usize {
        self.ranks().param_count(&self.mode_shape)
    }

    /// Stored scalars, counted entry by entry.
    pub fn stored_entries(&self) -> usize {
        match &self.payload {
            Payload::Dense { matrix } => matrix.len(),
            Payload::Tucker { core, factors } => core.len() + factors.iter().map(Tensor::len).sum::<usize>(),
            Payload::Tt { cores } | Payload::Tr { cores } => cores.iter().map(Tensor::len).sum(),
        }
    }

    pub fn compression_ratio(&self) -> f64 {
        self.param_count() as f64 / self.mode_shape.iter().product::<usize>() as f64
    }

    /// Dense tensor of `mode_shape`.
    pub fn reconstruct(&self) -> Tensor {
        match &self.payload {
            Payload::Dense { matrix } => matrix.reshape(&self.mode_shape).expect("validated shape"),
            Payload::Tucker { core, factors } => tucker_reconstruct(core, factors),
            Payload::Tt { cores } | Payload::Tr { cores } => chain_reconstruct(cores),
        }
    }

    /// Dense `rows × cols` matrix.
    pub fn to_matrix(&self) -> Tensor {
        match &self.payload {
            Payload::Dense { matrix } => matrix.clone(),
            _ => self
                .reconstruct()
                .into_shape(&[self.rows(), self.cols()])
                .expect("validated shape"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_tensor, seeded};
    use crate::svd::TruncationPolicy;
    use crate::tensor::relative_error;
    use alloc::vec;

    #[test]
    fn dense_round_trip() {
        let m = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let layer = CompressedLayer::dense(m.clone()).unwrap();
        assert_eq!(layer.reconstruct(), m);
        assert_eq!(layer.param_count(), 6);
        assert_eq!(layer.compression_ratio(), 1.0);
    }

    #[test]
    fn param_count_examples() {
        let shape = [8, 8, 8, 8];
        let tucker = RankSpec::new(Family::Tucker, vec![4, 4, 4, 4]);
        assert_eq!(tucker.param_count(&shape), 384);
        let tt = RankSpec::new(Family::Tt, vec![4, 4, 4]);
        assert_eq!(tt.param_count(&shape), 320);
        let tr = RankSpec::new(Family::Tr, vec![3, 3, 3, 3]);
        assert_eq!(tr.param_count(&shape), 288);

        // entry-count oracle on actual decompositions
        let t = gaussian_tensor(&mut seeded(1), &shape);
        let layer = tucker_decompose(&t, &[4, 4, 4, 4], 0).unwrap();
        assert_eq!(layer.stored_entries(), 384);
        assert_eq!(layer.param_count(), 384);
        assert!((layer.compression_ratio() - 0.09375).abs() < 1e-15);
        let layer = tt_decompose(&t, &[TruncationPolicy::FixedRank(4)]).unwrap();
        assert_eq!(layer.stored_entries(), 320);
        // (3,3,3,3) needs a first split of 9 > 8; (2,3,3,3) is realisable
        let layer = tr_decompose(&t, &[2, 3, 3, 3]).unwrap();
        assert_eq!(layer.stored_entries(), 240);
        assert_eq!(layer.param_count(), 240);
    }

    #[test]
    fn validation_catches_broken_chains() {
        let bad = Payload::Tt {
            cores: vec![Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[3, 2, 1])],
        };
        assert!(CompressedLayer::from_parts(vec![2, 2], 1, bad).is_err());
        let ring = Payload::Tr {
            cores: vec![Tensor::zeros(&[2, 2, 3]), Tensor::zeros(&[3, 2, 1])],
        };
        assert!(CompressedLayer::from_parts(vec![2, 2], 1, ring).is_err());
    }

    #[test]
    fn row_modes_reshape_dense_payload() {
        let t = gaussian_tensor(&mut seeded(2), &[2, 3, 4]);
        let layer = tt_decompose(&t, &[TruncationPolicy::FixedRank(12)]).unwrap();
        let layer = layer.with_row_modes(2).unwrap();
        assert_eq!((layer.rows(), layer.cols()), (6, 4));
        let m = layer.to_matrix();
        assert!(relative_error(&t.reshape(&[6, 4]).unwrap(), &m).unwrap() < 1e-12);
    }
}
