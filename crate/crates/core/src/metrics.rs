//! Segmentation metrics and the domain-spread statistic.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;

/// Probability threshold for binarizing predictions.
pub const THRESHOLD: f64 = 0.5;

/// A binary `H x W` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(bits.len() == height * width, "mask of {height}x{width} needs {} bits, got {}", height * width, bits.len());
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    /// Pixels of channel `c` above [`THRESHOLD`].
    pub fn from_channel(image: &ImageTensor, c: usize) -> Result<Self> {
        ensure!(c < image.channels(), "channel {c} out of range for {} channels", image.channels());
        Ok(Self::from_plane(image.height(), image.width(), &image.plane(c)))
    }

    pub fn from_plane(height: usize, width: usize, plane: &[f64]) -> Self {
        Self { height, width, bits: plane.iter().map(|&v| v > THRESHOLD).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Foreground pixels with a background 4-neighbour or on the image edge.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if edge || !self.get(y - 1, x) || !self.get(y + 1, x) || !self.get(y, x - 1) || !self.get(y, x + 1) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        ensure!(
            self.height == other.height && self.width == other.width,
            "mask shapes differ: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        Ok(())
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt)?;
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    let inter = pred.bits.iter().zip(&gt.bits).filter(|(a, b)| **a && **b).count();
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Exact Euclidean distance transform to the nearest seed pixel
/// (Felzenszwalb–Huttenlocher), returned as squared distances.
fn squared_distance_to(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid = vec![INF; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut pass = |f: &[f64], len: usize, d: &mut [f64]| {
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..len {
            let qf = q as f64;
            let mut s;
            loop {
                let p = v[k] as f64;
                s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
                if s > z[k] {
                    break;
                }
                k -= 1;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for q in 0..len {
            let qf = q as f64;
            while z[k + 1] < qf {
                k += 1;
            }
            let p = v[k] as f64;
            d[q] = (qf - p) * (qf - p) + f[v[k]];
        }
    };
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        pass(&f, h, &mut d);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        pass(&f, w, &mut d);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn directed_mean(from: &[(usize, usize)], to_sq: &[f64], w: usize) -> f64 {
    from.iter().map(|&(y, x)| libm::sqrt(to_sq[y * w + x])).sum::<f64>() / from.len() as f64
}

/// Symmetric average surface distance in pixels over 4-connectivity
/// boundaries. Undefined when either mask is empty.
pub fn asd_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::UndefinedMetric("average surface distance needs two non-empty masks".into()));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (h, w) = (pred.height, pred.width);
    let dp = squared_distance_to(&bp, h, w);
    let dg = squared_distance_to(&bg, h, w);
    Ok(0.5 * (directed_mean(&bp, &dg, w) + directed_mean(&bg, &dp, w)))
}

/// Per-channel mean followed by per-channel (population) std.
pub fn style_descriptor(image: &ImageTensor) -> Vec<f64> {
    let c = image.channels();
    let mut out = vec![0.0; 2 * c];
    for ch in 0..c {
        let plane = image.plane(ch);
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out[ch] = mean;
        out[c + ch] = libm::sqrt(var);
    }
    out
}

/// Mean style descriptor of each group.
pub fn domain_centroids(groups: &[Vec<&ImageTensor>]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            ensure!(!g.is_empty(), "domain group {k} is empty");
            let mut acc = vec![0.0; 2 * g[0].channels()];
            for img in g {
                let d = style_descriptor(img);
                ensure!(d.len() == acc.len(), "domain group {k} mixes channel counts");
                acc.iter_mut().zip(&d).for_each(|(a, v)| *a += v);
            }
            Ok(acc.into_iter().map(|a| a / g.len() as f64).collect())
        })
        .collect()
}

/// Mean pairwise Euclidean distance between per-domain style centroids.
pub fn domain_spread(groups: &[Vec<&ImageTensor>]) -> Result<f64> {
    ensure!(groups.len() >= 2, "domain spread needs at least 2 domains, got {}", groups.len());
    for (k, g) in groups.iter().enumerate() {
        ensure!(g.len() >= 2, "domain group {k} needs at least 2 images, got {}", g.len());
    }
    let c = domain_centroids(groups)?;
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            total += crate::synthdata::euclidean(&c[i], &c[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Dice (in `[0, 1]`) and ASD of one sample per class channel. ASD is `None`
/// when undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub dice: Vec<f64>,
    pub asd: Vec<Option<f64>>,
}

/// Scores a probability map against a binary label, channel by channel.
pub fn score_sample(prob: &ImageTensor, label: &ImageTensor) -> Result<SampleScores> {
    ensure!(prob.same_dims(label), "prediction {:?} and label {:?} differ in shape", prob.dims(), label.dims());
    let mut dice = Vec::with_capacity(label.channels());
    let mut asd = Vec::with_capacity(label.channels());
    for c in 0..label.channels() {
        let p = Mask::from_channel(prob, c)?;
        let g = Mask::from_channel(label, c)?;
        dice.push(dice_metric(&p, &g)?);
        asd.push(match asd_metric(&p, &g) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        });
    }
    Ok(SampleScores { dice, asd })
}

/// Mean Dice and mean defined ASD per class over many samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub dice: f64,
    pub asd: Option<f64>,
    pub asd_excluded: usize,
}

pub fn summarize(scores: &[SampleScores]) -> Result<Vec<ClassSummary>> {
    ensure!(!scores.is_empty(), "nothing to summarize");
    let classes = scores[0].dice.len();
    (0..classes)
        .map(|c| {
            let dice = scores.iter().map(|s| s.dice[c]).sum::<f64>() / scores.len() as f64;
            let defined: Vec<f64> = scores.iter().filter_map(|s| s.asd[c]).collect();
            let asd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            Ok(ClassSummary { dice, asd, asd_excluded: scores.len() - defined.len() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(y, x) in on {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn dice_fixtures() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_metric(&a, &b).unwrap(), 0.0);
        let g = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (2, 0), (2, 1), (2, 2)]);
        assert_eq!(dice_metric(&a, &g).unwrap(), 0.6);
        assert_eq!(dice_metric(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 1.0);
        assert!(dice_metric(&a, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn asd_fixtures() {
        let p = mask(5, 8, &[(2, 1)]);
        let g = mask(5, 8, &[(2, 4)]);
        assert_eq!(asd_metric(&p, &g).unwrap(), 3.0);
        assert_eq!(asd_metric(&p, &p).unwrap(), 0.0);
        assert!(matches!(asd_metric(&p, &Mask::empty(5, 8)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn boundary_of_square() {
        let on: Vec<_> = (1..4).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
        let m = mask(5, 5, &on);
        let b = m.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn spread_of_constant_domains() {
        let a = ImageTensor::filled(2, 2, 3, -0.5);
        let b = ImageTensor::filled(2, 2, 3, 0.5);
        let s = domain_spread(&[vec![&a, &a], vec![&b, &b]]).unwrap();
        assert!((s - libm::sqrt(3.0)).abs() < 1e-12);
        assert_eq!(domain_spread(&[vec![&a, &a], vec![&a, &a]]).unwrap(), 0.0);
        assert!(domain_spread(&[vec![&a, &a]]).is_err());
    }
}
