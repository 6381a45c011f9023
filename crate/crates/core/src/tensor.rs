//! Dense row-major `f64` tensors and the raw kernels (GEMM, im2col
//! convolution, batch statistics) the autodiff graph is built on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(shape.iter().all(|&d| d > 0), "tensor dimensions must be positive, got {shape:?}");
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), "shape {shape:?} needs {n} values, got {}", data.len());
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor dimensions must be positive");
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must hold at least one value");
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(invalid!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(n == self.data.len(), "cannot reshape {:?} into {shape:?}", self.shape);
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure!(self.shape == other.shape, "shape mismatch: {:?} vs {:?}", self.shape, other.shape);
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Samples `indices` along the batch (first) axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        ensure!(!indices.is_empty(), "batch selection must be non-empty");
        let n = self.shape[0];
        ensure!(indices.iter().all(|&i| i < n), "batch index out of range for batch of {n}");
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(stride * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }
}

/// `c = a·b (+ c)` where `a` is logically `m x k` and `b` is `k x n`, both
/// row-major unless the matching `*_t` flag says the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index reachable from the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[batch, in_channels, height, width] = input else {
            return Err(invalid!("conv2d input must be N x C x H x W, got {input:?}"));
        };
        let &[out_channels, k_in, kh, kw] = kernel else {
            return Err(invalid!("conv2d kernel must be Co x Ci x k x k, got {kernel:?}"));
        };
        ensure!(k_in == in_channels, "kernel expects {k_in} input channels, input has {in_channels}");
        ensure!(kh == kw && kh % 2 == 1, "kernel must be square with odd size, got {kh}x{kw}");
        ensure!(stride >= 1, "stride must be at least 1");
        ensure!(
            height + 2 * padding >= kh && width + 2 * padding >= kh,
            "kernel {kh} does not fit a {height}x{width} input with padding {padding}"
        );
        let out_height = (height + 2 * padding - kh) / stride + 1;
        let out_width = (width + 2 * padding - kh) / stride + 1;
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - padding` lies inside `0..width`.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.width + p <= kx { 0 } else { ((g.width + p - kx - 1) / s + 1).min(g.out_width) };
    (lo, hi.max(lo))
}

/// Unfolds one `C x H x W` sample into a `(C k k) x (Ho Wo)` column matrix.
fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let src = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_height {
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.height {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(iy - p) * g.width..(iy - p + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * s + kx - p;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        for (d, x) in line[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(s)) {
                            *d = *x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto a sample.
fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dst = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_height {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.height {
                        continue;
                    }
                    let dst_row = &mut dst[(iy - p) * g.width..(iy - p + 1) * g.width];
                    let line = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    let start = lo * s + kx - p;
                    if s == 1 {
                        for (d, x) in dst_row[start..start + hi - lo].iter_mut().zip(line) {
                            *d += *x;
                        }
                    } else {
                        for (d, x) in dst_row[start..].iter_mut().step_by(s).zip(line) {
                            *d += *x;
                        }
                    }
                }
            }
        }
    }
}

/// Reusable column buffers, so repeated convolutions do not reallocate.
#[derive(Debug, Default)]
pub(crate) struct ConvScratch {
    cols: Vec<f64>,
    d_cols: Vec<f64>,
}

fn sized(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    &mut buf[..len]
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    scratch: &mut ConvScratch,
) -> Vec<f64> {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let cols = sized(&mut scratch.cols, if g.is_pointwise() { 0 } else { rows * plane });
    for n in 0..g.batch {
        let sample = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dst = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, cols);
            cols
        };
        gemm(g.out_channels, rows, plane, kernel, false, src, false, dst, bias.is_some());
    }
    out
}

/// Gradients of a convolution given the output adjoint.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    scratch: &mut ConvScratch,
) -> ConvGrads {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut d_kernel = vec![0.0; g.out_channels * rows];
    let mut d_bias = vec![0.0; g.out_channels];
    let mut d_input = need_input.then(|| vec![0.0; input.len()]);
    let cols = sized(&mut scratch.cols, if g.is_pointwise() { 0 } else { rows * plane });
    let d_cols = sized(&mut scratch.d_cols, if need_input && !g.is_pointwise() { rows * plane } else { 0 });
    for n in 0..g.batch {
        let sample = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dy = &grad_out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for (o, chunk) in dy.chunks_exact(plane).enumerate() {
            d_bias[o] += chunk.iter().sum::<f64>();
        }
        let src: &[f64] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, cols);
            cols
        };
        // dK += dY · colsᵀ
        gemm(g.out_channels, plane, rows, dy, false, src, true, &mut d_kernel, true);
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            if g.is_pointwise() {
                gemm(rows, g.out_channels, plane, kernel, true, dy, false, dx, true);
            } else {
                gemm(rows, g.out_channels, plane, kernel, true, dy, false, d_cols, false);
                col2im(g, d_cols, dx);
            }
        }
    }
    ConvGrads { input: d_input, kernel: d_kernel, bias: d_bias }
}

/// Per-channel mean and biased variance over `N x H x W` of an NCHW buffer.
pub(crate) fn channel_moments(data: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += data[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(ConvGeometry::new(&[1, 2, 5, 5], &[3, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 2, 5, 5], &[3, 2, 2, 2], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 2, 2, 2], &[3, 2, 5, 5], 1, 0).is_err());
    }

    #[test]
    fn output_geometry() {
        let g = ConvGeometry::new(&[2, 3, 9, 8], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), vec![2, 4, 5, 4]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn select_batch_copies_rows() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = t.select_batch(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.select_batch(&[3]).is_err());
    }
}
