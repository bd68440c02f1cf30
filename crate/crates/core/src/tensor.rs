//! Dense buffers shared by the rasterizer, augmentation and critic code.
//!
//! [`Tensor`] is a shape plus a flat row-major `f64` buffer. Images are laid
//! out `[height, width, 3]` with interleaved RGB.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        check_shape(&self.shape, &other.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// An RGB float image, row-major `[height][width][3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(invalid(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, 3]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape().to_vec(),
            data: self.data.clone(),
        }
    }

    /// Interprets a `[h, w, 3]` tensor as an image without range checks.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            [h, w, 3] => Self::new(*w, *h, t.data.clone()),
            other => Err(Error::ShapeMismatch {
                expected: vec![0, 0, 3],
                found: other.to_vec(),
            }),
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Mean squared error per channel value.
    pub fn mse(&self, other: &RasterImage) -> Result<f64> {
        check_shape(&self.shape(), &other.shape())?;
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn max_abs_diff(&self, other: &RasterImage) -> Result<f64> {
        check_shape(&self.shape(), &other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Mean of `1 - luminance`, i.e. how much ink the image carries.
    pub fn darkness(&self, x: usize, y: usize) -> f64 {
        let p = self.pixel(x, y);
        1.0 - (p[0] + p[1] + p[2]) / 3.0
    }
}
