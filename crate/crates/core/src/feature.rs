//! Spatial feature grids.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `height×width` grid of `channels`-dimensional features.
///
/// Stored channel-major as a `channels × (height·width)` matrix whose column
/// `y·width + x` is the feature vector at row `y`, column `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Tensor) -> Result<Self> {
        let (_, n) = data.dims2()?;
        if n != height * width {
            return Err(Error::Dimension(format!(
                "feature matrix has {n} columns, grid is {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a map from an interleaved `height×width×channels` tensor.
    pub fn from_hwc(t: &Tensor) -> Result<Self> {
        let &[h, w, c] = t.shape() else {
            return Err(Error::Dimension(format!(
                "expected HxWxC tensor, got {:?}",
                t.shape()
            )));
        };
        let n = h * w;
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = t.data()[p * c + ch];
            }
        }
        Self::new(h, w, Tensor::from_vec(&[c, n], out)?)
    }

    pub fn to_hwc(&self) -> Tensor {
        let (c, n) = (self.channels(), self.points());
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                out[p * c + ch] = self.data.data()[ch * n + p];
            }
        }
        Tensor::from_vec(&[self.height, self.width, c], out).expect("extents are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.height * self.width
    }

    /// The `channels × points` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.data
    }

    pub fn into_matrix(self) -> Tensor {
        self.data
    }

    pub fn same_extents(&self, other: &FeatureMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels() == other.channels()
    }
}
