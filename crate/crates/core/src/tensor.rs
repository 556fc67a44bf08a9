//! Latent and image tensors in `(channels, height, width)` layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Real-valued latent grid; also the shape of every noise prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (c, h, w) = shape;
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "{} values for latent shape {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `(channels, height * width)` view used by the network.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.channels, self.height * self.width, self.data.clone())
            .expect("latent shape is consistent")
    }

    pub fn from_matrix(m: Matrix, height: usize, width: usize) -> Result<Self> {
        if m.cols() != height * width {
            return Err(Error::Shape(format!(
                "matrix with {} columns is not a {height}x{width} grid",
                m.cols()
            )));
        }
        let channels = m.rows();
        Self::from_vec((channels, height, width), m.into_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &LatentTensor) -> Result<LatentTensor> {
        self.check_same(other)?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn add(&self, other: &LatentTensor) -> Result<LatentTensor> {
        self.check_same(other)?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn scale(&self, s: f64) -> LatentTensor {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentTensor {
        self.with_data(self.data.iter().map(|&x| f(x)).collect())
    }

    pub(crate) fn zip(&self, other: &LatentTensor, f: impl Fn(f64, f64) -> f64) -> LatentTensor {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn with_data(&self, data: Vec<f64>) -> LatentTensor {
        debug_assert_eq!(data.len(), self.data.len());
        LatentTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn check_same(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "latent {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Image with intensities in `[0, 1]`, stored in single precision as
/// decoded from 8-bit files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (c, h, w) = shape;
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "{} values for image shape {c}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite image intensity"));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let (c, h, w) = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
