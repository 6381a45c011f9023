//! Training: amplitude-mixup synthesis, domain-specific restoration, and
//! segmentation with a consistency term, optimised with Adam under a
//! polynomial learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::error::{ensure, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::image::{from_batch, to_batch, ImageTensor};
use crate::losses::LossWeights;
use crate::metrics::{score_sample, SampleScores};
use crate::model::{ModelConfig, Network};
use crate::nn::{Mode, StatUpdates};
use crate::optim::{poly_lr, Adam, DEFAULT_POLY_POWER};
use crate::rng::{derive_seed, seeded, Rng};
use crate::spectral::{ram_augment, MixRatio, DEFAULT_BETA};
use crate::synthdata::{Benchmark, DomainSample};

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ablation {
    /// Segmentation loss on amplitude-mixed images.
    pub ram_aug: bool,
    /// Restoration of the original from the mixed image.
    pub dsir: bool,
    /// Symmetric KL between predictions on original and mixed images.
    pub consistency: bool,
}

impl Ablation {
    pub const FULL: Self = Self { ram_aug: true, dsir: true, consistency: true };
    pub const BASELINE: Self = Self { ram_aug: false, dsir: false, consistency: false };

    /// All eight flag combinations, baseline first and full method last.
    pub fn all() -> [Self; 8] {
        core::array::from_fn(|i| Self { ram_aug: i & 4 != 0, dsir: i & 2 != 0, consistency: i & 1 != 0 })
    }

    pub fn needs_augmentation(&self) -> bool {
        self.ram_aug || self.dsir || self.consistency
    }

    /// Short row name, e.g. `ram+dsir`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.ram_aug, "ram"), (self.dsir, "dsir"), (self.consistency, "consist")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub weights: LossWeights,
    pub beta: f64,
    /// Mixing ratio used for every pair instead of sampling `U[0, 1]`.
    pub fixed_lambda: Option<f64>,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs (0 disables); the final epoch always does.
    pub checkpoint_every: usize,
    pub ablation: Ablation,
    /// Batch-norm mode of the forward passes inside a training step.
    pub norm_mode: Mode,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 1e-3,
            poly_power: DEFAULT_POLY_POWER,
            weights: LossWeights::default(),
            beta: DEFAULT_BETA,
            fixed_lambda: None,
            seed: 0,
            checkpoint_every: 10,
            ablation: Ablation::FULL,
            norm_mode: Mode::Train,
            base_channels: 8,
            depth: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs > 0, "epochs must be positive");
        ensure!(self.batch_size > 0, "batch size must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!(self.poly_power > 0.0 && self.poly_power.is_finite(), "poly power must be positive");
        ensure!((0.0..=1.0).contains(&self.beta), "RAM beta must lie in [0, 1], got {}", self.beta);
        if let Some(l) = self.fixed_lambda {
            MixRatio::new(l)?;
        }
        ensure!(
            !self.ablation.needs_augmentation() || self.batch_size >= 2,
            "amplitude mixup needs batches of at least 2 samples"
        );
        self.weights.validate()
    }

    /// Network shape for the given data.
    pub fn model_config(&self, in_channels: usize, classes: usize, domains: usize) -> ModelConfig {
        ModelConfig { in_channels, classes, base_channels: self.base_channels, depth: self.depth, domains }
    }
}

/// Source-domain averages of the four terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg_orig: f64,
    pub seg_aug: f64,
    pub rec: f64,
    pub consist: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.seg_orig, self.seg_aug, self.rec, self.consist, self.total].iter().all(|v| v.is_finite())
    }
}

/// Forward/backward products of one step, before the optimiser runs.
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub gradients: Gradients,
    pub updates: StatUpdates,
}

/// Amplitude-mixed copy of every sample, each with a random partner of another domain.
pub fn augment_batch(batch: &[&DomainSample], beta: f64, fixed_lambda: Option<f64>, rng: &mut Rng) -> Result<Vec<ImageTensor>> {
    batch
        .iter()
        .map(|s| {
            let partners: Vec<&&DomainSample> = batch.iter().filter(|p| p.domain != s.domain).collect();
            let partner = partners
                .choose(rng)
                .ok_or_else(|| crate::error::invalid!("batch holds a single domain; amplitude mixup needs a partner from another domain"))?;
            let lambda = match fixed_lambda {
                Some(l) => MixRatio::new(l)?,
                None => MixRatio::sample(rng),
            };
            ram_augment(&s.image, &partner.image, beta, lambda)
        })
        .collect()
}

/// Batch indices grouped by domain id, in ascending domain order.
fn domain_groups(batch: &[&DomainSample]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in batch.iter().enumerate() {
        groups.entry(s.domain).or_default().push(i);
    }
    groups
}

/// Records the objective for one batch and back-propagates it.
pub fn step_gradients(net: &Network, batch: &[&DomainSample], cfg: &TrainConfig, rng: &mut Rng) -> Result<StepOutput> {
    ensure!(!batch.is_empty(), "empty batch");
    let flags = cfg.ablation;
    let w = cfg.weights;
    let groups = domain_groups(batch);
    let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
    let labels: Vec<&ImageTensor> = batch.iter().map(|s| &s.label).collect();
    let x = to_batch(&images)?;
    let y = to_batch(&labels)?;

    let mut g = Graph::new();
    let mut up = StatUpdates::default();
    let xv = g.constant(x.clone());
    let feats = net.encode(&mut g, xv, cfg.norm_mode, &mut up)?;
    let pred = net.decode_seg(&mut g, &feats, cfg.norm_mode, &mut up)?;

    let mut pred_aug: Option<Var> = None;
    let mut bottleneck_aug: Option<Var> = None;
    if flags.needs_augmentation() {
        let aug = augment_batch(batch, cfg.beta, cfg.fixed_lambda, rng)?;
        let aug_refs: Vec<&ImageTensor> = aug.iter().collect();
        let xa = g.constant(to_batch(&aug_refs)?);
        let fa = net.encode(&mut g, xa, cfg.norm_mode, &mut up)?;
        bottleneck_aug = Some(fa.bottleneck);
        if flags.ram_aug || flags.consistency {
            pred_aug = Some(net.decode_seg(&mut g, &fa, cfg.norm_mode, &mut up)?);
        }
    }

    let k = groups.len() as f64;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut losses = LossBreakdown::default();
    for (&domain, idx) in &groups {
        let yk = y.select_batch(idx)?;
        let p = g.select_batch(pred, idx)?;
        let ce = g.bce(p, &yk)?;
        let dice = g.dice(p, &yk, w.dice_eps)?;
        terms.push((ce, w.seg / k));
        terms.push((dice, w.seg / k));
        losses.seg_orig += (g.value(ce).item() + g.value(dice).item()) / k;

        if let Some(pa) = pred_aug {
            let pa = g.select_batch(pa, idx)?;
            if flags.ram_aug {
                let ce = g.bce(pa, &yk)?;
                let dice = g.dice(pa, &yk, w.dice_eps)?;
                terms.push((ce, w.seg_aug / k));
                terms.push((dice, w.seg_aug / k));
                losses.seg_aug += (g.value(ce).item() + g.value(dice).item()) / k;
            }
            if flags.consistency {
                let kl = g.sym_kl(p, pa)?;
                terms.push((kl, w.consist / k));
                losses.consist += g.value(kl).item() / k;
            }
        }
        if let (true, Some(b)) = (flags.dsir, bottleneck_aug) {
            let bk = g.select_batch(b, idx)?;
            let restored = net.decode_rec(&mut g, bk, domain, cfg.norm_mode, &mut up)?;
            let mse = g.mse(restored, &x.select_batch(idx)?)?;
            terms.push((mse, w.rec / k));
            losses.rec += g.value(mse).item() / k;
        }
    }
    let total = g.weighted_sum(&terms)?;
    losses.total = g.value(total).item();
    ensure!(losses.is_finite(), "non-finite loss: {losses:?}");
    let gradients = g.backward(total)?;
    Ok(StepOutput { losses, gradients, updates: up })
}

/// One optimisation step: forward, backward, Adam update, running statistics.
pub fn train_step(
    net: &mut Network,
    adam: &mut Adam,
    batch: &[&DomainSample],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let out = step_gradients(net, batch, cfg, rng)?;
    adam.step(net.params_mut(), |id| out.gradients.param(id), lr)?;
    if cfg.norm_mode == Mode::Train {
        net.apply_updates(&out.updates);
    }
    Ok(out.losses)
}

/// Per-epoch means of the step losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Passed to the observer after every epoch.
pub struct EpochEvent<'a> {
    pub log: &'a EpochLog,
    pub network: &'a Network,
    /// Whether the checkpoint cadence asks for a snapshot now.
    pub checkpoint: bool,
}

pub struct FitResult {
    pub network: Network,
    pub log: Vec<EpochLog>,
}

/// Splits a shuffled pool into batches, repairing single-domain batches by
/// swapping with other batches when mixup needs cross-domain partners.
fn make_batches<'a>(pool: &[&'a DomainSample], batch_size: usize, need_pairs: bool, rng: &mut Rng) -> Result<Vec<Vec<&'a DomainSample>>> {
    let mut order: Vec<&DomainSample> = pool.to_vec();
    order.shuffle(rng);
    let mut n_batches = order.len() / batch_size;
    let rest = order.len() % batch_size;
    if rest >= 2 || (rest == 1 && !need_pairs) {
        n_batches += 1;
    }
    let len = order.len();
    let bounds = |b: usize| (b * batch_size, ((b + 1) * batch_size).min(len));
    if need_pairs {
        let single = |order: &[&DomainSample], b: usize| {
            let (lo, hi) = bounds(b);
            order[lo..hi].iter().all(|s| s.domain == order[lo].domain)
        };
        let mut guard = 0;
        while let Some(b) = (0..n_batches).find(|&b| single(&order, b)) {
            guard += 1;
            ensure!(guard <= order.len(), "could not form cross-domain batches");
            let (lo, hi) = bounds(b);
            let d = order[lo].domain;
            let j = (0..order.len())
                .find(|&j| (j < lo || j >= hi) && order[j].domain != d)
                .ok_or_else(|| crate::error::invalid!("training pool holds a single domain"))?;
            order.swap(hi - 1, j);
        }
    }
    Ok((0..n_batches).map(|b| {
        let (lo, hi) = bounds(b);
        order[lo..hi].to_vec()
    }).collect())
}

/// Trains a fresh network on `pool` (source-domain samples only).
/// `domains` is the total number of domain ids in the benchmark.
pub fn fit_pool(
    pool: &[&DomainSample],
    domains: usize,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochEvent) -> Result<()>,
) -> Result<FitResult> {
    cfg.validate()?;
    ensure!(!pool.is_empty(), "empty training pool");
    let mut distinct: Vec<usize> = pool.iter().map(|s| s.domain).collect();
    distinct.sort_unstable();
    distinct.dedup();
    ensure!(
        !cfg.ablation.needs_augmentation() || distinct.len() >= 2,
        "amplitude mixup needs at least 2 source domains, got {}",
        distinct.len()
    );
    ensure!(distinct.iter().all(|&d| d < domains), "sample domain id out of range");
    let first = pool[0];
    let model = cfg.model_config(first.image.channels(), first.label.channels(), domains);
    let mut net = Network::new(model, derive_seed(cfg.seed, 1))?;
    let mut adam = Adam::new();
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_power)?;
        let batches = make_batches(pool, cfg.batch_size, cfg.ablation.needs_augmentation(), &mut rng)?;
        let mut sum = LossBreakdown::default();
        for batch in &batches {
            let l = train_step(&mut net, &mut adam, batch, cfg, lr, &mut rng)?;
            sum.seg_orig += l.seg_orig;
            sum.seg_aug += l.seg_aug;
            sum.rec += l.rec;
            sum.consist += l.consist;
            sum.total += l.total;
        }
        let n = batches.len() as f64;
        let losses = LossBreakdown {
            seg_orig: sum.seg_orig / n,
            seg_aug: sum.seg_aug / n,
            rec: sum.rec / n,
            consist: sum.consist / n,
            total: sum.total / n,
        };
        let entry = EpochLog { epoch, lr, losses };
        let checkpoint = epoch + 1 == cfg.epochs || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0);
        observer(&EpochEvent { log: &entry, network: &net, checkpoint })?;
        log.push(entry);
    }
    Ok(FitResult { network: net, log })
}

/// Leave-one-domain-out training on every domain except `held_out`.
pub fn fit(
    benchmark: &Benchmark,
    held_out: usize,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochEvent) -> Result<()>,
) -> Result<FitResult> {
    let k = benchmark.num_domains();
    ensure!(held_out < k, "held-out domain {held_out} out of range for {k} domains");
    ensure!(k - 1 >= 2, "leave-one-out training needs at least 2 source domains, got {}", k - 1);
    fit_pool(&benchmark.source_train(held_out), k, cfg, observer)
}

/// Per-class foreground probabilities for every image, in eval mode.
pub fn predict(net: &Network, images: &[&ImageTensor], batch_size: usize) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        out.extend(from_batch(&net.predict_seg(&to_batch(chunk)?)?)?);
    }
    Ok(out)
}

/// Dice and ASD of every sample.
pub fn evaluate(net: &Network, samples: &[&DomainSample], batch_size: usize) -> Result<Vec<SampleScores>> {
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    let probs = predict(net, &images, batch_size)?;
    probs.iter().zip(samples).map(|(p, s)| score_sample(p, &s.label)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_benchmark, DataConfig};

    #[test]
    fn ablation_matrix() {
        let all = Ablation::all();
        assert_eq!(all[0], Ablation::BASELINE);
        assert_eq!(all[7], Ablation::FULL);
        let mut labels: Vec<String> = all.iter().map(Ablation::label).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn single_domain_batch_rejected_only_with_mixup() {
        let cfg = DataConfig { height: 16, width: 16, ..DataConfig::default() };
        let b = build_benchmark(3, 5, 1, &cfg).unwrap();
        let batch: Vec<&DomainSample> = b.domains[0].train.iter().collect();
        let train = TrainConfig { depth: 2, base_channels: 4, ..TrainConfig::default() };
        let net = Network::new(train.model_config(1, 1, 3), 0).unwrap();
        let mut rng = seeded(0);
        assert!(step_gradients(&net, &batch, &train, &mut rng).is_err());
        let base = TrainConfig { ablation: Ablation::BASELINE, ..train };
        assert!(step_gradients(&net, &batch, &base, &mut rng).is_ok());
    }

    #[test]
    fn batches_are_cross_domain() {
        let cfg = DataConfig { height: 16, width: 16, ..DataConfig::default() };
        let b = build_benchmark(3, 10, 2, &cfg).unwrap();
        let pool = b.source_train(0);
        for seed in 0..50 {
            let batches = make_batches(&pool, 4, true, &mut seeded(seed)).unwrap();
            assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), pool.len());
            for batch in &batches {
                assert!(batch.iter().any(|s| s.domain != batch[0].domain));
            }
        }
    }
}
