//! Encoder, segmentation decoder and the domain-specific restoration decoder.
//!
//! Encoder: a stem block at full resolution, then `depth` stages that halve
//! the resolution with a stride-2 block and refine with a second block. Every
//! stage before the bottleneck leaves a skip tensor behind.
//!
//! Segmentation decoder: per stage, nearest upsampling, concatenation with the
//! matching skip, one conv/BN/ReLU block; a 1x1 head with per-class sigmoids.
//!
//! Restoration decoder: per stage, nearest upsampling followed by one conv
//! whose weights are shared by every domain and a batch-norm layer chosen by
//! domain id; a 1x1 head with `tanh`. It only sees the bottleneck.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::nn::{check_channels, BatchNormState, Conv, Mode, NormRef, ParamStore, StatUpdates};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Number of batch-norm statistic sets in the restoration decoder.
    pub domains: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 1, classes: 1, base_channels: 8, depth: 3, domains: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels > 0 && self.classes > 0, "channel counts must be positive");
        ensure!(self.base_channels > 0, "base channel count must be positive");
        ensure!(self.depth > 0, "depth must be at least 1");
        ensure!(self.domains > 0, "at least one restoration domain is required");
        Ok(())
    }

    /// Width of encoder stage `s` (0 = stem).
    pub fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial sizes must survive `depth` halvings exactly.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        ensure!(c == self.in_channels, "model expects {} input channels, got {c}", self.in_channels);
        let f = 1 << self.depth;
        ensure!(
            h % f == 0 && w % f == 0,
            "spatial dims {h}x{w} must be divisible by 2^depth = {f}"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: Conv,
    norm: NormRef,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    down: Block,
    refine: Block,
}

#[derive(Clone, Debug, PartialEq)]
struct RecStage {
    conv: Conv,
    norms: Vec<NormRef>,
}

/// Encoder output: the bottleneck and one skip tensor per stage.
#[derive(Clone, Debug)]
pub struct Features {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
}

/// Encoder `E`, segmentation decoder `D_seg` and restoration decoder `D_rec`
/// over one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ModelConfig,
    params: ParamStore,
    norms: Vec<BatchNormState>,
    stem: Block,
    encoder: Vec<EncoderStage>,
    seg_stages: Vec<Block>,
    seg_head: Conv,
    rec_stages: Vec<RecStage>,
    rec_head: Conv,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    norms: &'a mut Vec<BatchNormState>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn norm(&mut self, name: &str, channels: usize) -> NormRef {
        self.norms.push(BatchNormState::new(self.params, name, channels));
        NormRef(self.norms.len() - 1)
    }

    fn block(&mut self, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Block {
        let conv = Conv::new(self.params, self.rng, &format!("{name}.conv"), in_ch, out_ch, 3, stride, false);
        let norm = self.norm(&format!("{name}.bn"), out_ch);
        Block { conv, norm }
    }
}

impl Network {
    /// Builds a freshly initialised network; weights are drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let mut norms = Vec::new();
        let mut b = Builder { params: &mut params, norms: &mut norms, rng: &mut rng };

        let stem = b.block("enc.stem", config.in_channels, config.width(0), 1);
        let encoder = (1..=config.depth)
            .map(|s| EncoderStage {
                down: b.block(&format!("enc.{s}.down"), config.width(s - 1), config.width(s), 2),
                refine: b.block(&format!("enc.{s}.refine"), config.width(s), config.width(s), 1),
            })
            .collect();
        let seg_stages = (1..=config.depth)
            .rev()
            .map(|s| {
                let in_ch = config.width(s) + config.width(s - 1);
                b.block(&format!("seg.{s}"), in_ch, config.width(s - 1), 1)
            })
            .collect();
        let seg_head = Conv::new(b.params, b.rng, "seg.head", config.width(0), config.classes, 1, 1, true);
        let rec_stages = (1..=config.depth)
            .rev()
            .map(|s| {
                let conv = Conv::new(
                    b.params,
                    b.rng,
                    &format!("rec.{s}.conv"),
                    config.width(s),
                    config.width(s - 1),
                    3,
                    1,
                    false,
                );
                let norms = (0..config.domains).map(|k| b.norm(&format!("rec.{s}.bn.d{k}"), config.width(s - 1))).collect();
                RecStage { conv, norms }
            })
            .collect();
        let rec_head = Conv::new(b.params, b.rng, "rec.head", config.width(0), config.in_channels, 1, 1, true);

        Ok(Self { config, params, norms, stem, encoder, seg_stages, seg_head, rec_stages, rec_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norms(&self) -> &[BatchNormState] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.norms
    }

    pub fn norm(&self, r: NormRef) -> &BatchNormState {
        &self.norms[r.0]
    }

    /// Name prefix of a batch-norm layer (the part before `.gamma`).
    pub fn norm_name(&self, r: NormRef) -> &str {
        let n = self.params.name(self.norms[r.0].gamma);
        n.strip_suffix(".gamma").unwrap_or(n)
    }

    /// Batch-norm layers used by the restoration decoder for `domain`.
    pub fn restoration_norms(&self, domain: usize) -> Vec<NormRef> {
        self.rec_stages.iter().filter_map(|s| s.norms.get(domain).copied()).collect()
    }

    /// Parameter ids of the (domain-shared) restoration convolution weights.
    pub fn restoration_weights(&self) -> Vec<crate::nn::ParamId> {
        let mut ids: Vec<_> = self.rec_stages.iter().map(|s| s.conv.weight).collect();
        ids.push(self.rec_head.weight);
        ids.extend(self.rec_head.bias);
        ids
    }

    /// Parameter ids of the encoder.
    pub fn encoder_params(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = Vec::new();
        for b in core::iter::once(&self.stem).chain(self.encoder.iter().flat_map(|s| [&s.down, &s.refine])) {
            ids.push(b.conv.weight);
            ids.push(self.norms[b.norm.0].gamma);
            ids.push(self.norms[b.norm.0].beta);
        }
        ids
    }

    /// Folds train-mode batch statistics into the running statistics, in order.
    pub fn apply_updates(&mut self, updates: &StatUpdates) {
        for (r, stats) in &updates.0 {
            self.norms[r.0].update_running(stats);
        }
    }

    fn block(&self, g: &mut Graph, b: &Block, x: Var, mode: Mode, up: &mut StatUpdates) -> Result<Var> {
        let y = b.conv.forward(g, &self.params, x)?;
        let (y, stats) = self.norms[b.norm.0].forward(g, &self.params, y, mode)?;
        up.push(b.norm, stats);
        Ok(g.relu(y))
    }

    /// Records `E(x)` on `g`.
    pub fn encode(&self, g: &mut Graph, x: Var, mode: Mode, up: &mut StatUpdates) -> Result<Features> {
        self.config.check_input(g.value(x))?;
        let mut h = self.block(g, &self.stem, x, mode, up)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for stage in &self.encoder {
            skips.push(h);
            h = self.block(g, &stage.down, h, mode, up)?;
            h = self.block(g, &stage.refine, h, mode, up)?;
        }
        Ok(Features { bottleneck: h, skips })
    }

    /// Records `D_seg(features)`, returning per-class probabilities.
    pub fn decode_seg(&self, g: &mut Graph, f: &Features, mode: Mode, up: &mut StatUpdates) -> Result<Var> {
        let mut h = f.bottleneck;
        for (stage, skip) in self.seg_stages.iter().zip(f.skips.iter().rev()) {
            h = g.upsample2x(h)?;
            h = g.concat_channels(h, *skip)?;
            h = self.block(g, stage, h, mode, up)?;
        }
        let logits = self.seg_head.forward(g, &self.params, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Records `D_rec^k(bottleneck)`, returning an image in `[-1, 1]`.
    pub fn decode_rec(
        &self,
        g: &mut Graph,
        bottleneck: Var,
        domain: usize,
        mode: Mode,
        up: &mut StatUpdates,
    ) -> Result<Var> {
        ensure!(
            domain < self.config.domains,
            "domain id {domain} out of range for {} restoration domains",
            self.config.domains
        );
        let mut h = bottleneck;
        for stage in &self.rec_stages {
            h = g.upsample2x(h)?;
            h = stage.conv.forward(g, &self.params, h)?;
            let r = stage.norms[domain];
            let (y, stats) = self.norms[r.0].forward(g, &self.params, h, mode)?;
            up.push(r, stats);
            h = g.relu(y);
        }
        let out = self.rec_head.forward(g, &self.params, h)?;
        Ok(g.tanh(out))
    }

    /// Runs `E` in eval mode and returns bottleneck features and skips.
    pub fn encode_eval(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.encode(&mut g, xv, Mode::Eval, &mut StatUpdates::default())?;
        let skips = f.skips.iter().map(|s| g.value(*s).clone()).collect();
        Ok((g.value(f.bottleneck).clone(), skips))
    }

    /// `D_seg(E(x))` with running statistics. `x` is `N x C x H x W`.
    pub fn predict_seg(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut up = StatUpdates::default();
        let f = self.encode(&mut g, xv, Mode::Eval, &mut up)?;
        let y = self.decode_seg(&mut g, &f, Mode::Eval, &mut up)?;
        check_channels(g.value(y), self.config.classes)?;
        Ok(g.value(y).clone())
    }

    /// `D_rec^k(E(x))`. In train mode the batch statistics update the shared
    /// encoder layers and restoration set `domain` only.
    pub fn restore(&mut self, x: &Tensor, domain: usize, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut up = StatUpdates::default();
        let f = self.encode(&mut g, xv, mode, &mut up)?;
        let y = self.decode_rec(&mut g, f.bottleneck, domain, mode, &mut up)?;
        self.apply_updates(&up);
        Ok(g.value(y).clone())
    }
}
