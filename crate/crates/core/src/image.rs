use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// A dense `H x W x C` grid of reals stored row-major with channels
/// innermost. Images use it with intensities in `[-1, 1]`; spectra reuse it
/// for amplitude and phase planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && channels > 0,
            "image dimensions must be positive, got {height}x{width}x{channels}"
        );
        ensure!(
            data.len() == height * width * channels,
            "image data length {} does not match {height}x{width}x{channels}",
            data.len()
        );
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Largest absolute elementwise difference; infinite when dims differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if !self.same_dims(other) {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copies a single channel plane out as a row-major `H x W` vector.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn set_plane(&mut self, c: usize, plane: &[f64]) {
        debug_assert_eq!(plane.len(), self.height * self.width);
        for (i, &v) in plane.iter().enumerate() {
            self.data[i * self.channels + c] = v;
        }
    }
}

/// Stacks equally sized images into an `N x C x H x W` network batch.
pub fn to_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    ensure!(!images.is_empty(), "cannot batch zero images");
    let (h, w, c) = images[0].dims();
    ensure!(images.iter().all(|im| im.dims() == (h, w, c)), "batched images must share dimensions");
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for im in images {
        for ch in 0..c {
            data.extend(im.data.iter().skip(ch).step_by(c));
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Splits an `N x C x H x W` tensor back into `N` images.
pub fn from_batch(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    let [n, c, h, w] = batch.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for s in batch.data().chunks_exact(c * plane) {
        let mut img = ImageTensor::zeros(h, w, c);
        for ch in 0..c {
            img.set_plane(ch, &s[ch * plane..(ch + 1) * plane]);
        }
        out.push(img);
    }
    Ok(out)
}
