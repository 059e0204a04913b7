use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB raster with channel values in `[0, 1]`, stored row-major as `H·W·C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PixelImage {
    pub const CHANNELS: usize = 3;

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Argument(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite pixel value".into()));
        }
        Ok(Self {
            height,
            width,
            channels: Self::CHANNELS,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width * Self::CHANNELS]).expect("valid fill")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data).expect("from_fn values")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Pixels as a `(H·W) × C` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.height * self.width, self.channels), self.data.clone())
            .expect("image matrix shape")
    }

    pub fn from_matrix(height: usize, width: usize, m: &Array2<f64>) -> Result<Self> {
        Self::new(height, width, m.iter().copied().collect())
    }

    /// `max |a − b|` over all channel values.
    pub fn linf_distance(&self, other: &PixelImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &PixelImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_clamped() {
        let img = PixelImage::new(1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(PixelImage::new(2, 2, vec![0.0; 11]).is_err());
        assert!(PixelImage::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
    }
}
