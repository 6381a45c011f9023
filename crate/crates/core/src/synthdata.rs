//! Procedural multi-domain segmentation data.
//!
//! Every domain draws its geometry from the same family of nested, slightly
//! wobbly ellipses; domains differ only in acquisition style: an intensity
//! curve, a smooth multiplicative bias field, per-channel gain, global
//! contrast/brightness and additive noise. Images are then normalized to
//! `[-1, 1]` individually.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, invalid, Result};
use crate::image::ImageTensor;
use crate::metrics::{domain_centroids, style_descriptor};
use crate::rng::{derive_seed, seeded, Rng};

/// Minimum pairwise distance between per-domain style centroids.
pub const DOMAIN_MARGIN: f64 = 0.1;
/// Fraction of each domain used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// 1: outer structure only. 2: outer and nested inner structure.
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, channels: 1, classes: 1 }
    }
}

impl DataConfig {
    /// Three-channel images with two nested classes.
    pub fn fundus_like() -> Self {
        Self { channels: 3, classes: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.height >= 8 && self.width >= 8, "images must be at least 8x8");
        ensure!(self.channels == 1 || self.channels == 3, "only 1- or 3-channel images are supported");
        ensure!(self.classes == 1 || self.classes == 2, "only 1 or 2 classes are supported");
        Ok(())
    }
}

/// Acquisition style of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub style_seed: u64,
    /// Exponent applied to the clean `[0, 1]` intensities.
    pub gamma: f64,
    pub bias_amplitude: f64,
    /// Bias-field cycles across the image.
    pub bias_frequency: f64,
    /// Bias-field direction in radians.
    pub bias_orientation: f64,
    pub bias_phase: f64,
    pub channel_gain: Vec<f64>,
    pub contrast: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    /// A style that leaves images untouched.
    pub fn identity(id: usize, channels: usize) -> Self {
        Self {
            id,
            style_seed: 0,
            gamma: 1.0,
            bias_amplitude: 0.0,
            bias_frequency: 0.0,
            bias_orientation: 0.0,
            bias_phase: 0.0,
            channel_gain: vec![1.0; channels],
            contrast: 1.0,
            brightness: 0.0,
            noise_sigma: 0.0,
        }
    }

    /// Style for domain `id`. The first four ids follow a fixed palette of
    /// well-separated styles (jittered by `style_seed`); further ids are random.
    pub fn generate(id: usize, style_seed: u64, channels: usize) -> Self {
        // (gamma, bias amplitude, bias frequency, orientation in degrees, contrast, brightness, noise)
        const PALETTE: [(f64, f64, f64, f64, f64, f64, f64); 4] = [
            (1.0, 0.05, 0.5, 0.0, 1.0, 0.0, 0.01),
            (0.3, 0.35, 1.0, 60.0, 0.8, 0.1, 0.035),
            (3.5, 0.60, 0.7, 120.0, 1.2, -0.1, 0.005),
            (2.0, 0.30, 1.5, 210.0, 0.9, 0.05, 0.09),
        ];
        let mut rng = seeded(style_seed);
        let jitter = |rng: &mut Rng, v: f64| v * rng.random_range(0.95..1.05);
        let base = match PALETTE.get(id) {
            Some(&p) => p,
            None => (
                rng.random_range(0.4..2.2),
                rng.random_range(0.05..0.5),
                rng.random_range(0.4..1.6),
                rng.random_range(0.0..360.0),
                rng.random_range(0.7..1.3),
                rng.random_range(-0.15..0.15),
                rng.random_range(0.01..0.07),
            ),
        };
        let channel_gain = if channels == 1 {
            vec![1.0]
        } else {
            (0..channels).map(|_| rng.random_range(0.75..1.25)).collect()
        };
        Self {
            id,
            style_seed,
            gamma: jitter(&mut rng, base.0),
            bias_amplitude: jitter(&mut rng, base.1),
            bias_frequency: jitter(&mut rng, base.2),
            bias_orientation: base.3.to_radians(),
            bias_phase: rng.random_range(0.0..2.0 * PI),
            channel_gain,
            contrast: jitter(&mut rng, base.4),
            brightness: base.5,
            noise_sigma: jitter(&mut rng, base.6),
        }
    }
}

/// An image, its binary label (`H x W x classes`) and its domain id.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub image: ImageTensor,
    pub label: ImageTensor,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub train: Vec<DomainSample>,
    pub test: Vec<DomainSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub config: DataConfig,
    pub seed: u64,
    pub domains: Vec<DomainDataset>,
}

impl Benchmark {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Training samples of every domain except `held_out`.
    pub fn source_train(&self, held_out: usize) -> Vec<&DomainSample> {
        self.domains.iter().filter(|d| d.spec.id != held_out).flat_map(|d| d.train.iter()).collect()
    }
}

/// Soft step used to anti-alias region edges (width in pixels).
fn soft_inside(radius: f64, scale_px: f64) -> f64 {
    let z = (1.0 - radius) * scale_px / 1.2;
    1.0 / (1.0 + libm::exp(-z))
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    wobble_phase: f64,
}

impl Ellipse {
    /// Normalised radius (`< 1` inside) including the boundary wobble.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let r = libm::sqrt(u * u + v * v);
        let theta = libm::atan2(v, u);
        r / (1.0 + self.wobble * libm::sin(self.lobes * theta + self.wobble_phase))
    }

    fn mean_axis(&self) -> f64 {
        0.5 * (self.a + self.b)
    }
}

/// Clean intensity levels `(background, outer, inner)` per channel.
fn levels(channels: usize) -> &'static [[f64; 3]] {
    const GRAY: [[f64; 3]; 1] = [[0.15, 0.6, 0.95]];
    const COLOR: [[f64; 3]; 3] = [[0.35, 0.8, 1.0], [0.15, 0.6, 0.9], [0.1, 0.4, 0.7]];
    if channels == 1 {
        &GRAY
    } else {
        &COLOR
    }
}

/// Renders a clean image in `[0, 1]` and its exact label for a foreground
/// fraction near `area_fraction`.
fn render_shape(rng: &mut Rng, cfg: &DataConfig, area_fraction: f64) -> (ImageTensor, ImageTensor) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let aspect = rng.random_range(0.7..1.0);
    let area = area_fraction * h * w / PI;
    let a = libm::sqrt(area / aspect);
    let b = a * aspect;
    let margin_y = (a.max(b) + 2.0) / h;
    let margin_x = (a.max(b) + 2.0) / w;
    let outer = Ellipse {
        cy: h * rng.random_range(margin_y.min(0.45)..(1.0 - margin_y).max(0.55)),
        cx: w * rng.random_range(margin_x.min(0.45)..(1.0 - margin_x).max(0.55)),
        a,
        b,
        angle: rng.random_range(0.0..PI),
        wobble: rng.random_range(0.0..0.08),
        lobes: rng.random_range(3..=5) as f64,
        wobble_phase: rng.random_range(0.0..2.0 * PI),
    };
    let draw_inner = cfg.classes == 2 || rng.random_bool(0.5);
    let shrink = rng.random_range(0.35..0.6);
    let inner = Ellipse {
        cy: outer.cy + rng.random_range(-0.15..0.15) * outer.b,
        cx: outer.cx + rng.random_range(-0.15..0.15) * outer.a,
        a: outer.a * shrink,
        b: outer.b * shrink * rng.random_range(0.85..1.15),
        angle: outer.angle + rng.random_range(-0.5..0.5),
        wobble: rng.random_range(0.0..0.05),
        lobes: rng.random_range(3..=5) as f64,
        wobble_phase: rng.random_range(0.0..2.0 * PI),
    };

    let lv = levels(cfg.channels);
    let mut image = ImageTensor::zeros(cfg.height, cfg.width, cfg.channels);
    let mut label = ImageTensor::zeros(cfg.height, cfg.width, cfg.classes);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let ro = outer.radius(py, px);
            let ri = inner.radius(py, px);
            let in_outer = ro <= 1.0;
            let in_inner = draw_inner && in_outer && ri <= 1.0;
            let so = soft_inside(ro, outer.mean_axis());
            let si = if draw_inner { soft_inside(ri, inner.mean_axis()).min(so) } else { 0.0 };
            for (c, l) in lv.iter().enumerate() {
                image.set(y, x, c, l[0] + (l[1] - l[0]) * so + (l[2] - l[1]) * si);
            }
            label.set(y, x, 0, f64::from(u8::from(in_outer)));
            if cfg.classes == 2 {
                label.set(y, x, 1, f64::from(u8::from(in_inner)));
            }
        }
    }
    (image, label)
}

/// Renders one random nested-blob image in `[0, 1]` with its exact label.
pub fn generate_shape(rng: &mut Rng, cfg: &DataConfig) -> (ImageTensor, ImageTensor) {
    let f = rng.random_range(0.08..0.3);
    render_shape(rng, cfg, f)
}

/// Applies a domain's acquisition style to a clean image.
pub fn apply_domain_style(clean: &ImageTensor, spec: &DomainSpec, rng: &mut Rng) -> Result<ImageTensor> {
    ensure!(
        spec.channel_gain.len() == clean.channels(),
        "style has {} channel gains for a {}-channel image",
        spec.channel_gain.len(),
        clean.channels()
    );
    let (h, w, c) = clean.dims();
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|_| invalid!("noise sigma must be finite"))?)
    } else {
        None
    };
    let size = h.max(w) as f64;
    let (so, co) = (libm::sin(spec.bias_orientation), libm::cos(spec.bias_orientation));
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 * co + y as f64 * so) / size;
            let bias = 1.0 + spec.bias_amplitude * libm::sin(2.0 * PI * spec.bias_frequency * t + spec.bias_phase);
            for ch in 0..c {
                let v = clean.get(y, x, ch);
                let curved = if spec.gamma == 1.0 { v } else { libm::pow(v.max(0.0), spec.gamma) };
                let mut s = spec.contrast * curved * bias * spec.channel_gain[ch] + spec.brightness;
                if let Some(n) = &noise {
                    s += n.sample(rng);
                }
                out.set(y, x, ch, s);
            }
        }
    }
    Ok(out)
}

/// Affine map of an image's range onto `[-1, 1]`.
pub fn normalize_intensity(image: &ImageTensor) -> Result<ImageTensor> {
    ensure!(image.is_finite(), "cannot normalize an image with non-finite values");
    let (lo, hi) = image.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    ensure!(hi > lo, "cannot normalize a constant image");
    let scale = 2.0 / (hi - lo);
    Ok(image.map(|v| {
        if v == lo {
            -1.0
        } else if v == hi {
            1.0
        } else {
            ((v - lo) * scale - 1.0).clamp(-1.0, 1.0)
        }
    }))
}

/// Stable per-sample seed for sample `index` of domain `domain`.
fn sample_seed(seed: u64, domain: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x5a4d_0000 + domain as u64), index as u64)
}

fn generate_domain(spec: &DomainSpec, n: usize, seed: u64, cfg: &DataConfig) -> Result<Vec<DomainSample>> {
    // stratify the foreground fraction so every domain covers the same size range
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut seeded(derive_seed(seed, 0x57a7 + spec.id as u64)));
    strata
        .iter()
        .enumerate()
        .map(|(i, &stratum)| {
            let mut rng = seeded(sample_seed(seed, spec.id, i));
            let u = (stratum as f64 + rng.random_range(0.0..1.0)) / n as f64;
            let (clean, label) = render_shape(&mut rng, cfg, 0.08 + 0.22 * u);
            let styled = apply_domain_style(&clean, spec, &mut rng)?;
            Ok(DomainSample { image: normalize_intensity(&styled)?, label, domain: spec.id })
        })
        .collect()
}

/// `K` domains of `n_per_domain` samples each, split 80/20 into train/test.
/// A pure function of its arguments.
pub fn build_benchmark(k: usize, n_per_domain: usize, seed: u64, cfg: &DataConfig) -> Result<Benchmark> {
    ensure!(k >= 2, "a benchmark needs at least 2 domains, got {k}");
    ensure!(n_per_domain >= 5, "need at least 5 samples per domain, got {n_per_domain}");
    cfg.validate()?;
    let n_train = libm::round(TRAIN_FRACTION * n_per_domain as f64) as usize;
    let mut domains = Vec::with_capacity(k);
    for id in 0..k {
        let spec = DomainSpec::generate(id, derive_seed(seed, 0xd0_0000 + id as u64), cfg.channels);
        let mut samples = generate_domain(&spec, n_per_domain, seed, cfg)?;
        let test = samples.split_off(n_train);
        domains.push(DomainDataset { spec, train: samples, test });
    }
    let groups: Vec<Vec<&ImageTensor>> = domains
        .iter()
        .map(|d| d.train.iter().chain(&d.test).map(|s| &s.image).collect())
        .collect();
    let centroids = domain_centroids(&groups)?;
    for i in 0..k {
        for j in i + 1..k {
            let d = euclidean(&centroids[i], &centroids[j]);
            ensure!(
                d > DOMAIN_MARGIN,
                "domains {i} and {j} are not separable: style centroid distance {d:.4} <= {DOMAIN_MARGIN}"
            );
        }
    }
    Ok(Benchmark { config: *cfg, seed, domains })
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Foreground fraction of the first label channel.
pub fn foreground_fraction(label: &ImageTensor) -> f64 {
    let plane = label.plane(0);
    plane.iter().filter(|&&v| v > 0.5).count() as f64 / plane.len() as f64
}

/// Style descriptor of every image in `samples`.
pub fn descriptors(samples: &[&DomainSample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| style_descriptor(&s.image)).collect()
}
