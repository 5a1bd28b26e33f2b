//! Image slices and slice stacks shared by the phantom, pipeline and IO.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// One 2-D multi-channel image slice, channel-major row-major `f32` data.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageSlice {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageSlice {
            channels,
            height,
            width,
            data: alloc::vec![0.0; channels * height * width],
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Untracked (1,C,H,W) tensor view of this slice.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.data.iter().map(|&v| S::from_f64(v as f64)).collect();
        Tensor::from_vec(&[1, self.channels, self.height, self.width], data)
            .expect("slice dimensions are consistent")
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected batch of 1, got {n}"
            )));
        }
        Ok(ImageSlice {
            channels: c,
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v.to_f64() as f32).collect(),
        })
    }
}

/// An ordered stack of slices: dims `(slices, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub slices: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(slices: usize, channels: usize, height: usize, width: usize) -> Self {
        Volume {
            slices,
            channels,
            height,
            width,
            data: alloc::vec![0.0; slices * channels * height * width],
        }
    }

    pub fn slice_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.slices * self.slice_len()
    }

    pub fn slice_data(&self, idx: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[idx * n..(idx + 1) * n]
    }

    pub fn slice_data_mut(&mut self, idx: usize) -> &mut [f32] {
        let n = self.slice_len();
        &mut self.data[idx * n..(idx + 1) * n]
    }

    pub fn get_slice(&self, idx: usize) -> ImageSlice {
        ImageSlice {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.slice_data(idx).to_vec(),
        }
    }

    /// Stack slices in order; all must agree on shape.
    pub fn from_slices(slices: &[ImageSlice]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Empty("volume from zero slices".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(slices.len() * first.numel());
        for s in slices {
            if (s.channels, s.height, s.width) != (c, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "slice shape ({},{},{}) differs from ({c},{h},{w})",
                    s.channels, s.height, s.width
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Volume {
            slices: slices.len(),
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn to_slices(&self) -> Vec<ImageSlice> {
        (0..self.slices).map(|i| self.get_slice(i)).collect()
    }

    /// Check that every value is 0.0 or 1.0 (mask volumes).
    pub fn validate_binary(&self) -> Result<()> {
        if self.data.iter().all(|&v| v == 0.0 || v == 1.0) {
            Ok(())
        } else {
            Err(Error::NonBinaryMask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_assemble_roundtrip() {
        let mut v = Volume::zeros(3, 2, 4, 4);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = i as f32;
        }
        let rebuilt = Volume::from_slices(&v.to_slices()).unwrap();
        assert_eq!(rebuilt, v);
    }

    #[test]
    fn empty_stack_is_an_error() {
        assert!(Volume::from_slices(&[]).is_err());
    }

    #[test]
    fn heterogeneous_slices_rejected() {
        let a = ImageSlice::zeros(1, 4, 4);
        let b = ImageSlice::zeros(1, 4, 5);
        assert!(Volume::from_slices(&[a, b]).is_err());
    }
}
