//! 2-D discrete Fourier analysis/synthesis and random amplitude mixup.
//!
//! The forward transform is unnormalized and the inverse carries `1/(HW)`.
//! Power-of-two axis lengths go through an iterative radix-2 FFT; any other
//! length falls back to a direct `O(n^2)` DFT.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{ensure, Result};
use crate::image::ImageTensor;

/// Default low-frequency extent of the mixing mask.
pub const DEFAULT_BETA: f64 = 0.2;

/// Amplitude and phase of a per-channel 2-D DFT, both laid out like the
/// source image (`H x W x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyDecomposition {
    pub amplitude: ImageTensor,
    pub phase: ImageTensor,
}

impl FrequencyDecomposition {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.amplitude.dims()
    }
}

/// Output of [`idft2`]: the real part of the inverse transform plus the
/// largest absolute imaginary part that was discarded.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: ImageTensor,
    pub imag_residue: f64,
}

/// Binary low-frequency selector `M`, centro-symmetric about DC.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    height: usize,
    width: usize,
    ratio: f64,
    mask: Vec<bool>,
}

impl FrequencyMask {
    /// Wraps explicit row-major mask values; they must be centro-symmetric.
    pub fn from_values(height: usize, width: usize, ratio: f64, mask: Vec<bool>) -> Result<Self> {
        ensure!(mask.len() == height * width, "mask holds {} values, expected {height}x{width}", mask.len());
        ensure!((0.0..=1.0).contains(&ratio), "beta must lie in [0, 1], got {ratio}");
        let m = Self { height, width, ratio, mask };
        for u in 0..height {
            for v in 0..width {
                ensure!(m.get(u, v) == m.get((height - u) % height, (width - v) % width), "mask is not centro-symmetric at ({u}, {v})");
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.mask[u * self.width + v]
    }

    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn values(&self) -> &[bool] {
        &self.mask
    }
}

/// Interpolation weight `λ ∈ [0, 1]` between the two amplitude spectra.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct MixRatio(f64);

impl MixRatio {
    pub fn new(lambda: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&lambda), "mix ratio must lie in [0, 1], got {lambda}");
        Ok(Self(lambda))
    }

    /// Draws `λ` uniformly from `[0, 1]`.
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.random_range(0.0..=1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// In-place 1-D transform. `inverse` flips the twiddle sign; no scaling is applied.
fn fft_in_place(buf: &mut [Complex64], inverse: bool, scratch: &mut Vec<Complex64>) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if !n.is_power_of_two() {
        scratch.clear();
        scratch.extend_from_slice(buf);
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, x) in scratch.iter().enumerate() {
                let angle = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                acc += x * Complex64::new(libm::cos(angle), libm::sin(angle));
            }
            *out = acc;
        }
        return;
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let angle = sign * 2.0 * PI * k as f64 / len as f64;
            let w = Complex64::new(libm::cos(angle), libm::sin(angle));
            for start in (0..n).step_by(len) {
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Row-then-column transform of one `h x w` plane.
fn transform_plane(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut scratch = Vec::new();
    for row in plane.chunks_exact_mut(w) {
        fft_in_place(row, inverse, &mut scratch);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = plane[y * w + x];
        }
        fft_in_place(&mut column, inverse, &mut scratch);
        for y in 0..h {
            plane[y * w + x] = column[y];
        }
    }
}

/// Per-channel 2-D DFT, returned as amplitude `|F(x)|` and phase `arg F(x)`.
pub fn dft2(image: &ImageTensor) -> Result<FrequencyDecomposition> {
    ensure!(image.is_finite(), "dft2 input contains non-finite values");
    let (h, w, c) = image.dims();
    let mut amplitude = ImageTensor::zeros(h, w, c);
    let mut phase = ImageTensor::zeros(h, w, c);
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for (dst, v) in plane.iter_mut().zip(image.plane(ch)) {
            *dst = Complex64::new(v, 0.0);
        }
        transform_plane(&mut plane, h, w, false);
        amplitude.set_plane(ch, &plane.iter().map(|z| z.norm()).collect::<Vec<_>>());
        phase.set_plane(ch, &plane.iter().map(|z| z.arg()).collect::<Vec<_>>());
    }
    Ok(FrequencyDecomposition { amplitude, phase })
}

/// Inverse of [`dft2`] from amplitude/phase, keeping the real part.
pub fn idft2(decomp: &FrequencyDecomposition) -> Result<Reconstruction> {
    let FrequencyDecomposition { amplitude, phase } = decomp;
    ensure!(amplitude.same_dims(phase), "amplitude and phase shapes differ");
    ensure!(
        amplitude.data().iter().all(|&a| a >= 0.0 && a.is_finite()),
        "amplitude must be finite and non-negative"
    );
    ensure!(phase.is_finite(), "phase contains non-finite values");
    let (h, w, c) = amplitude.dims();
    let scale = 1.0 / (h * w) as f64;
    let mut image = ImageTensor::zeros(h, w, c);
    let mut imag_residue: f64 = 0.0;
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for ((dst, a), p) in plane.iter_mut().zip(amplitude.plane(ch)).zip(phase.plane(ch)) {
            *dst = Complex64::from_polar(a, p);
        }
        transform_plane(&mut plane, h, w, true);
        let mut real = Vec::with_capacity(h * w);
        for z in &plane {
            real.push(z.re * scale);
            imag_residue = imag_residue.max((z.im * scale).abs());
        }
        image.set_plane(ch, &real);
    }
    Ok(Reconstruction { image, imag_residue })
}

/// Signed frequency of DFT index `u` on an axis of length `n`.
#[inline]
fn signed_frequency(u: usize, n: usize) -> isize {
    if u <= n / 2 {
        u as isize
    } else {
        u as isize - n as isize
    }
}

/// Builds the low-frequency mask for ratio `beta`.
///
/// Along each axis of length `n` the selected band has nominal width
/// `floor(beta * n)`; it is realised as the symmetric set of signed
/// frequencies `|f| <= floor(width / 2)` so that the mask is centro-symmetric
/// (an even width therefore rounds up to the next odd width). `beta = 1`
/// covers every frequency; `beta = 0` selects nothing.
pub fn low_freq_mask(h: usize, w: usize, beta: f64) -> Result<FrequencyMask> {
    ensure!(h >= 1 && w >= 1, "mask dimensions must be positive, got {h}x{w}");
    ensure!((0.0..=1.0).contains(&beta), "beta must lie in [0, 1], got {beta}");
    let side_h = libm::floor(beta * h as f64) as usize;
    let side_w = libm::floor(beta * w as f64) as usize;
    let mut mask = vec![false; h * w];
    if side_h > 0 && side_w > 0 {
        let (rh, rw) = ((side_h / 2) as isize, (side_w / 2) as isize);
        for u in 0..h {
            if signed_frequency(u, h).abs() > rh {
                continue;
            }
            for v in 0..w {
                if signed_frequency(v, w).abs() <= rw {
                    mask[u * w + v] = true;
                }
            }
        }
    }
    Ok(FrequencyMask { height: h, width: w, ratio: beta, mask })
}

/// `A_k * (1 - M) + ((1 - λ) A_k + λ A_n) * M`, with `M` broadcast over channels.
pub fn mix_amplitudes(
    a_k: &ImageTensor,
    a_n: &ImageTensor,
    mask: &FrequencyMask,
    lambda: MixRatio,
) -> Result<ImageTensor> {
    ensure!(a_k.same_dims(a_n), "amplitude shapes differ: {:?} vs {:?}", a_k.dims(), a_n.dims());
    let (h, w, c) = a_k.dims();
    ensure!(
        mask.height == h && mask.width == w,
        "mask is {}x{} but amplitudes are {h}x{w}",
        mask.height,
        mask.width
    );
    let l = lambda.value();
    let mut out = a_k.clone();
    for (i, m) in mask.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..c {
            let j = i * c + ch;
            out.data_mut()[j] = (1.0 - l) * a_k.data()[j] + l * a_n.data()[j];
        }
    }
    Ok(out)
}

/// Random amplitude mixup before clamping: the reconstruction of the mixed
/// amplitude with `x_k`'s phase, together with the imaginary residue.
pub fn ram_augment_unclamped(
    x_k: &ImageTensor,
    x_n: &ImageTensor,
    beta: f64,
    lambda: MixRatio,
) -> Result<Reconstruction> {
    ensure!(x_k.same_dims(x_n), "RAM pair shapes differ: {:?} vs {:?}", x_k.dims(), x_n.dims());
    let fk = dft2(x_k)?;
    let fn_ = dft2(x_n)?;
    let mask = low_freq_mask(x_k.height(), x_k.width(), beta)?;
    let amplitude = mix_amplitudes(&fk.amplitude, &fn_.amplitude, &mask, lambda)?;
    idft2(&FrequencyDecomposition { amplitude, phase: fk.phase })
}

/// Synthesizes `x^{n→k}`: `x_k`'s content with low-frequency style mixed in
/// from `x_n`. Output is clamped to `[-1, 1]`.
pub fn ram_augment(
    x_k: &ImageTensor,
    x_n: &ImageTensor,
    beta: f64,
    lambda: MixRatio,
) -> Result<ImageTensor> {
    Ok(ram_augment_unclamped(x_k, x_n, beta, lambda)?.image.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, vals: &[f64]) -> ImageTensor {
        ImageTensor::new(h, w, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn constant_image_has_dc_only_spectrum() {
        let c = -0.75;
        let f = dft2(&ImageTensor::filled(4, 4, 1, c)).unwrap();
        assert!((f.amplitude.get(0, 0, 0) - 16.0 * c.abs()).abs() < 1e-12);
        let dc_phase = f.phase.get(0, 0, 0);
        // a negative constant has phase π at DC; a positive one has 0
        assert!((dc_phase.abs() - PI).abs() < 1e-12);
        let f = dft2(&ImageTensor::filled(4, 4, 1, 0.5)).unwrap();
        assert_eq!(f.phase.get(0, 0, 0), 0.0);
        for (i, &a) in f.amplitude.data().iter().enumerate().skip(1) {
            assert!(a < 1e-12, "bin {i} = {a}");
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = ImageTensor::zeros(4, 4, 1);
        x.set(0, 0, 0, 1.0);
        let f = dft2(&x).unwrap();
        assert!(f.amplitude.data().iter().all(|&a| (a - 1.0).abs() < 1e-12));
        assert!(f.phase.data().iter().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut x = ImageTensor::zeros(2, 2, 1);
        x.set(1, 1, 0, f64::NAN);
        assert!(matches!(dft2(&x), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn zero_amplitude_gives_zero_image() {
        let d = FrequencyDecomposition {
            amplitude: ImageTensor::zeros(3, 5, 2),
            phase: ImageTensor::filled(3, 5, 2, 1.3),
        };
        let r = idft2(&d).unwrap();
        assert!(r.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_dc_spectrum_inverts_to_ones() {
        let d = FrequencyDecomposition {
            amplitude: grid(2, 2, &[4.0, 0.0, 0.0, 0.0]),
            phase: ImageTensor::zeros(2, 2, 1),
        };
        let r = idft2(&d).unwrap();
        assert!(r.image.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn idft2_rejects_shape_mismatch() {
        let d = FrequencyDecomposition {
            amplitude: ImageTensor::zeros(2, 2, 1),
            phase: ImageTensor::zeros(2, 3, 1),
        };
        assert!(idft2(&d).is_err());
    }

    #[test]
    fn mask_extremes() {
        assert_eq!(low_freq_mask(8, 6, 0.0).unwrap().count_ones(), 0);
        assert_eq!(low_freq_mask(8, 6, 1.0).unwrap().count_ones(), 48);
        assert_eq!(low_freq_mask(7, 5, 1.0).unwrap().count_ones(), 35);
        assert!(low_freq_mask(8, 8, 1.5).is_err());
        assert!(low_freq_mask(8, 8, -0.1).is_err());
    }

    #[test]
    fn quarter_mask_on_8x8_is_block_around_dc() {
        // nominal width floor(0.25 * 8) = 2 → signed frequencies {-1, 0, 1}
        let m = low_freq_mask(8, 8, 0.25).unwrap();
        assert_eq!(m.count_ones(), 9);
        for u in 0..8 {
            for v in 0..8 {
                let inside = [0, 1, 7].contains(&u) && [0, 1, 7].contains(&v);
                assert_eq!(m.get(u, v), inside, "({u},{v})");
            }
        }
    }

    #[test]
    fn mask_is_centro_symmetric() {
        for &(h, w) in &[(8, 8), (7, 10), (16, 5), (1, 4)] {
            for beta in [0.1, 0.2, 0.33, 0.5, 0.9] {
                let m = low_freq_mask(h, w, beta).unwrap();
                for u in 0..h {
                    for v in 0..w {
                        assert_eq!(m.get(u, v), m.get((h - u) % h, (w - v) % w));
                    }
                }
            }
        }
    }

    #[test]
    fn mix_fixture() {
        let a_k = grid(2, 2, &[2.0, 4.0, 6.0, 8.0]);
        let a_n = grid(2, 2, &[10.0, 12.0, 14.0, 16.0]);
        let mask = FrequencyMask::from_values(2, 2, 0.5, vec![true, false, false, true]).unwrap();
        let out = mix_amplitudes(&a_k, &a_n, &mask, MixRatio::new(0.5).unwrap()).unwrap();
        assert_eq!(out.data(), &[6.0, 4.0, 6.0, 12.0]);
    }

    #[test]
    fn explicit_masks_must_be_symmetric() {
        assert!(FrequencyMask::from_values(3, 3, 0.5, vec![false, true, false, false, false, false, false, false, false]).is_err());
        assert!(FrequencyMask::from_values(2, 2, 0.5, vec![true; 3]).is_err());
        assert_eq!(FrequencyMask::from_values(4, 4, 1.0, vec![true; 16]).unwrap(), low_freq_mask(4, 4, 1.0).unwrap());
    }

    #[test]
    fn mix_degenerate_ratios() {
        let a_k = grid(2, 2, &[2.0, 4.0, 6.0, 8.0]);
        let a_n = grid(2, 2, &[10.0, 12.0, 14.0, 16.0]);
        let all = low_freq_mask(2, 2, 1.0).unwrap();
        let some = FrequencyMask { height: 2, width: 2, ratio: 0.5, mask: vec![true, false, true, false] };
        assert_eq!(mix_amplitudes(&a_k, &a_n, &some, MixRatio::new(0.0).unwrap()).unwrap(), a_k);
        assert_eq!(mix_amplitudes(&a_k, &a_n, &all, MixRatio::new(1.0).unwrap()).unwrap(), a_n);
        assert!(mix_amplitudes(&a_k, &grid(1, 4, &[0.0; 4]), &all, MixRatio::new(0.3).unwrap()).is_err());
        assert!(MixRatio::new(1.01).is_err());
    }

    #[test]
    fn ram_rejects_mismatched_pair() {
        let a = ImageTensor::zeros(4, 4, 1);
        let b = ImageTensor::zeros(4, 4, 2);
        assert!(ram_augment(&a, &b, 0.2, MixRatio::new(0.5).unwrap()).is_err());
    }

    #[test]
    fn non_power_of_two_matches_power_of_two_path() {
        // a 6x4 transform mixes the DFT fallback (rows of 4 use radix-2, columns of 6 do not)
        let x = ImageTensor::from_fn(6, 4, 1, |y, x, _| libm::sin(y as f64 * 0.7 - x as f64 * 0.3));
        let back = idft2(&dft2(&x).unwrap()).unwrap();
        assert!(back.image.max_abs_diff(&x) < 1e-12);
        assert!(back.imag_residue < 1e-12);
    }
}
