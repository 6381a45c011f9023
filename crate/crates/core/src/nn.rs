//! Parameter storage and the layer building blocks shared by the networks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::graph::{BatchStats, Graph, NormStats, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Batch-norm running-statistic momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Layers refer to them by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Whether a forward pass trains (batch statistics) or evaluates (running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One batch-normalization layer: affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(alloc::format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(alloc::format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Records the normalization on `graph`. Train mode returns the batch
    /// statistics so the caller can fold them in with [`Self::update_running`].
    pub fn forward(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = graph.param(store, self.gamma);
        let beta = graph.param(store, self.beta);
        let stats = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running { mean: &self.running_mean, var: &self.running_var },
        };
        graph.batchnorm(x, gamma, beta, self.eps, stats)
    }

    /// Exponential moving average of the batch mean and unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * stats.mean[ch];
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * stats.var[ch] * unbias;
        }
    }
}

/// Convolution weights (`Co x Ci x k x k`) with an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal initialised convolution with "same" padding for stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("positive std");
        let data = (0..out_ch * in_ch * kernel * kernel).map(|_| normal.sample(rng)).collect();
        let weight = store.add(
            alloc::format!("{name}.weight"),
            Tensor::new(vec![out_ch, in_ch, kernel, kernel], data).expect("consistent shape"),
        );
        let bias = with_bias.then(|| store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self { weight, bias, stride, padding: kernel / 2 }
    }

    pub fn forward(&self, graph: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = graph.param(store, self.weight);
        let b = self.bias.map(|b| graph.param(store, b));
        graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Reference to one batch-norm layer inside a network, used to route
/// running-statistic updates back after a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormRef(pub usize);

/// Running-statistic updates collected during a train-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct StatUpdates(pub Vec<(NormRef, BatchStats)>);

impl StatUpdates {
    pub fn push(&mut self, r: NormRef, stats: Option<BatchStats>) {
        if let Some(s) = stats {
            self.0.push((r, s));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn touched(&self) -> impl Iterator<Item = NormRef> + '_ {
        self.0.iter().map(|(r, _)| *r)
    }
}

pub(crate) fn check_channels(t: &Tensor, expected: usize) -> Result<()> {
    let [_, c, _, _] = t.dims4()?;
    ensure!(c == expected, "expected {expected} channels, got {c}");
    Ok(())
}
