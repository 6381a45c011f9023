//! Leave-one-domain-out runs, the ablation grid and domain-spread comparisons.

use anyhow::Result;
use ramdsir_core::image::ImageTensor;
use ramdsir_core::metrics::domain_spread;
use ramdsir_core::model::Network;
use ramdsir_core::rng::{derive_seed, seeded};
use ramdsir_core::spectral::{ram_augment, MixRatio};
use ramdsir_core::synthdata::{Benchmark, DomainSample};
use ramdsir_core::trainer::{evaluate, fit, Ablation, EpochLog, TrainConfig};
use rand::seq::IndexedRandom;

/// Batch size used for inference.
pub const EVAL_BATCH: usize = 16;

/// Mean Dice (%) over samples and classes.
pub fn mean_dice(net: &Network, samples: &[&DomainSample]) -> Result<f64> {
    let scores = evaluate(net, samples, EVAL_BATCH)?;
    let per_sample: Vec<f64> = scores.iter().map(|s| s.dice.iter().sum::<f64>() / s.dice.len() as f64).collect();
    Ok(100.0 * per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Every image of a domain; none of them is seen in training when it is held out.
pub fn domain_samples(benchmark: &Benchmark, domain: usize) -> Vec<&DomainSample> {
    benchmark.domains[domain].train.iter().chain(&benchmark.domains[domain].test).collect()
}

#[derive(Clone, Debug)]
pub struct LodoRun {
    pub ablation: Ablation,
    pub seed: u64,
    pub held_out: usize,
    /// Held-out Dice in percent.
    pub dice: f64,
    pub log: Vec<EpochLog>,
    pub network: Network,
}

/// Trains on every domain but `held_out` and scores the held-out domain.
pub fn run_lodo(benchmark: &Benchmark, held_out: usize, cfg: &TrainConfig) -> Result<LodoRun> {
    let fitted = fit(benchmark, held_out, cfg, |_| Ok(()))?;
    let dice = mean_dice(&fitted.network, &domain_samples(benchmark, held_out))?;
    Ok(LodoRun { ablation: cfg.ablation, seed: cfg.seed, held_out, dice, log: fitted.log, network: fitted.network })
}

/// One amplitude-mixed copy of every source training image, grouped by
/// source domain, each mixed with a random image of another source domain.
pub fn augmented_pool(benchmark: &Benchmark, held_out: usize, beta: f64, seed: u64) -> Result<Vec<Vec<ImageTensor>>> {
    let mut rng = seeded(derive_seed(seed, 0xa06));
    let sources: Vec<usize> = (0..benchmark.num_domains()).filter(|&d| d != held_out).collect();
    let mut out = Vec::with_capacity(sources.len());
    for &d in &sources {
        let partners: Vec<&DomainSample> =
            sources.iter().filter(|&&o| o != d).flat_map(|&o| benchmark.domains[o].train.iter()).collect();
        let mut group = Vec::with_capacity(benchmark.domains[d].train.len());
        for s in &benchmark.domains[d].train {
            let p = partners.choose(&mut rng).ok_or_else(|| anyhow::anyhow!("no partner domain available"))?;
            group.push(ram_augment(&s.image, &p.image, beta, MixRatio::sample(&mut rng))?);
        }
        out.push(group);
    }
    Ok(out)
}

/// Domain spread of the source training pool before and after amplitude mixup.
pub fn spread_before_after(benchmark: &Benchmark, held_out: usize, beta: f64, seed: u64) -> Result<(f64, f64)> {
    let original: Vec<Vec<&ImageTensor>> = (0..benchmark.num_domains())
        .filter(|&d| d != held_out)
        .map(|d| benchmark.domains[d].train.iter().map(|s| &s.image).collect())
        .collect();
    let aug = augmented_pool(benchmark, held_out, beta, seed)?;
    let aug_refs: Vec<Vec<&ImageTensor>> = aug.iter().map(|g| g.iter().collect()).collect();
    Ok((domain_spread(&original)?, domain_spread(&aug_refs)?))
}
