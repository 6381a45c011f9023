//! The training objective: cross-entropy, soft Dice, symmetric KL
//! consistency, L2 restoration and their weighted per-domain average.
//!
//! Each loss has a value function (used for reporting and by the graph's
//! forward pass) and an analytic adjoint used by the graph's backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;
/// Default Dice smooth factor.
pub const DEFAULT_DICE_EPS: f64 = 1e-5;

/// Weights of the four objective terms and the Dice smooth factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Segmentation loss on original images.
    pub seg: f64,
    /// Segmentation loss on amplitude-mixed images.
    pub seg_aug: f64,
    /// Restoration loss.
    pub rec: f64,
    /// Consistency loss.
    pub consist: f64,
    /// Dice smooth factor.
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 1.0, seg_aug: 1.0, rec: 0.1, consist: 0.5, dice_eps: DEFAULT_DICE_EPS }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("seg", self.seg), ("seg_aug", self.seg_aug), ("rec", self.rec), ("consist", self.consist)] {
            ensure!(w >= 0.0 && w.is_finite(), "loss weight {name} must be a finite non-negative number, got {w}");
        }
        ensure!(self.dice_eps > 0.0 && self.dice_eps.is_finite(), "Dice smooth factor must be positive");
        Ok(())
    }
}

/// The four loss terms of one source domain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DomainLosses {
    pub seg: f64,
    pub seg_aug: f64,
    pub rec: f64,
    pub consist: f64,
}

impl DomainLosses {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.seg * self.seg + w.seg_aug * self.seg_aug + w.rec * self.rec + w.consist * self.consist
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    ensure!(a.shape() == b.shape(), "loss inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape());
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Derivative of the clamp: zero where the clamp is active.
#[inline]
fn clamp_pass(p: f64) -> f64 {
    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy `−[y log ŷ + (1−y) log(1−ŷ)]`.
pub fn ce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
        })
        .sum();
    Ok(s / pred.numel() as f64)
}

pub(crate) fn ce_loss_grad(pred: &Tensor, target: &Tensor, upstream: f64) -> Result<Tensor> {
    same_shape(pred, target)?;
    let scale = upstream / pred.numel() as f64;
    pred.zip_map(target, |p, y| {
        let c = clamp_prob(p);
        scale * clamp_pass(p) * (-(y / c) + (1.0 - y) / (1.0 - c))
    })
}

/// Splits a prediction into `(classes, elements per class, plane)`: rank-4
/// NCHW tensors are per channel, anything else is a single class.
fn class_layout(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        &[n, c, h, w] => (c, n, h * w),
        _ => (1, 1, t.numel()),
    }
}

/// Per-class `(Σŷy, Σŷ + Σy)`.
fn dice_sums(pred: &Tensor, target: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (classes, n, plane) = class_layout(pred);
    let mut inter = vec![0.0; classes];
    let mut total = vec![0.0; classes];
    for s in 0..n {
        for c in 0..classes {
            let base = (s * classes + c) * plane;
            for i in base..base + plane {
                let (p, y) = (pred.data()[i], target.data()[i]);
                inter[c] += p * y;
                total[c] += p + y;
            }
        }
    }
    (inter, total)
}

/// Soft Dice loss `1 − 2Σŷy / (Σŷ + Σy + ε)` per class, averaged over classes.
pub fn dice_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    same_shape(pred, target)?;
    ensure!(eps > 0.0, "Dice smooth factor must be positive, got {eps}");
    let (inter, total) = dice_sums(pred, target);
    let classes = inter.len() as f64;
    Ok(inter.iter().zip(&total).map(|(i, t)| 1.0 - 2.0 * i / (t + eps)).sum::<f64>() / classes)
}

pub(crate) fn dice_loss_grad(pred: &Tensor, target: &Tensor, eps: f64, upstream: f64) -> Result<Tensor> {
    same_shape(pred, target)?;
    let (inter, total) = dice_sums(pred, target);
    let (classes, n, plane) = class_layout(pred);
    let scale = upstream / classes as f64;
    let mut g = Tensor::zeros(pred.shape());
    for s in 0..n {
        for c in 0..classes {
            let denom = total[c] + eps;
            let base = (s * classes + c) * plane;
            for i in base..base + plane {
                let y = target.data()[i];
                g.data_mut()[i] = scale * (-2.0 * y / denom + 2.0 * inter[c] / (denom * denom));
            }
        }
    }
    Ok(g)
}

/// Sum of CE and Dice.
pub fn seg_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    Ok(ce_loss(pred, target)? + dice_loss(pred, target, eps)?)
}

#[inline]
fn logit(p: f64) -> f64 {
    libm::log(p) - libm::log(1.0 - p)
}

/// Per-element `KL(p‖q) + KL(q‖p)` over the two-outcome distributions
/// `(p, 1−p)` and `(q, 1−q)`, which simplifies to `(p − q)(logit p − logit q)`.
#[inline]
fn sym_kl_elem(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    (p - q) * (logit(p) - logit(q))
}

/// Mean symmetric binary KL divergence between two probability maps.
pub fn kl_consistency_loss(p: &Tensor, q: &Tensor) -> Result<f64> {
    same_shape(p, q)?;
    let s: f64 = p.data().iter().zip(q.data()).map(|(&a, &b)| sym_kl_elem(a, b)).sum();
    Ok(s / p.numel() as f64)
}

pub(crate) fn kl_consistency_loss_grad(p: &Tensor, q: &Tensor, upstream: f64) -> Result<(Tensor, Tensor)> {
    same_shape(p, q)?;
    let scale = upstream / p.numel() as f64;
    let gp = p.zip_map(q, |a, b| {
        let (ca, cb) = (clamp_prob(a), clamp_prob(b));
        scale * clamp_pass(a) * ((logit(ca) - logit(cb)) + (ca - cb) / (ca * (1.0 - ca)))
    })?;
    let gq = q.zip_map(p, |b, a| {
        let (ca, cb) = (clamp_prob(a), clamp_prob(b));
        scale * clamp_pass(b) * ((logit(cb) - logit(ca)) + (cb - ca) / (cb * (1.0 - cb)))
    })?;
    Ok((gp, gq))
}

/// Mean squared error between a reconstruction and the original image.
pub fn restoration_loss(restored: &Tensor, original: &Tensor) -> Result<f64> {
    same_shape(restored, original)?;
    let s: f64 = restored.data().iter().zip(original.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / restored.numel() as f64)
}

pub(crate) fn restoration_loss_grad(restored: &Tensor, original: &Tensor, upstream: f64) -> Result<Tensor> {
    same_shape(restored, original)?;
    let scale = 2.0 * upstream / restored.numel() as f64;
    restored.zip_map(original, |a, b| scale * (a - b))
}

/// `(1/K) Σ_k (λ1 L_seg + λ2 L_seg_aug + λ3 L_rec + λ4 L_consist)`.
pub fn total_loss(parts: &[DomainLosses], weights: &LossWeights) -> Result<f64> {
    ensure!(!parts.is_empty(), "total loss needs at least one source domain");
    weights.validate()?;
    Ok(parts.iter().map(|p| p.weighted(weights)).sum::<f64>() / parts.len() as f64)
}
