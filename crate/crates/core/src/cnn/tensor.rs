//! Minimal dense channel-major tensor used by the network engine.

use crate::error::{Error, Result};

/// `channels x nz x ny x nx` tensor, spatial data x-fastest to match
/// [`crate::volume::Volume`] layout: `data[((c*nz + z)*ny + y)*nx + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: (usize, usize, usize)) -> Tensor {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims.0 * dims.1 * dims.2],
        }
    }

    /// Single-channel tensor from a flat x-fastest cubic patch.
    pub fn from_patch(patch: Vec<f64>, edge: usize) -> Result<Tensor> {
        if patch.len() != edge * edge * edge {
            return Err(Error::ShapeMismatch(format!(
                "patch has {} values, expected {}^3",
                patch.len(),
                edge
            )));
        }
        Ok(Tensor {
            channels: 1,
            dims: (edge, edge, edge),
            data: patch,
        })
    }

    pub fn from_data(channels: usize, dims: (usize, usize, usize), data: Vec<f64>) -> Result<Tensor> {
        if data.len() != channels * dims.0 * dims.1 * dims.2 {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match {channels} x {dims:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            dims,
            data,
        })
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// One channel's spatial block.
    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }
}
