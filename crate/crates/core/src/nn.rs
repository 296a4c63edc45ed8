//! Named parameter storage and the per-pass forward context.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::ops::{self, BatchStats, NormMode};
use crate::tensor::Tensor;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable parameters and non-trainable buffers, keyed by stable dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Exponential moving update of `<prefix>.running_mean` / `<prefix>.running_var`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats) {
        for (suffix, new) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let key = format!("{prefix}.{suffix}");
            if let Some(buf) = self.buffers.get_mut(&key) {
                for (r, v) in buf.data_mut().iter_mut().zip(new) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init_uniform(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert_param(name, Tensor::from_vec(shape, data));
    }

    pub fn init_conv(&mut self, rng: &mut ChaCha8Rng, prefix: &str, cout: usize, cin: usize, kernel: usize, bias: bool) {
        let fan_in = cin * kernel;
        self.init_uniform(rng, &format!("{prefix}.weight"), &[cout, cin, kernel], fan_in);
        if bias {
            self.init_uniform(rng, &format!("{prefix}.bias"), &[cout], fan_in);
        }
    }

    pub fn init_linear(&mut self, rng: &mut ChaCha8Rng, prefix: &str, dout: usize, din: usize, bias: bool) {
        self.init_uniform(rng, &format!("{prefix}.weight"), &[dout, din], din);
        if bias {
            self.init_uniform(rng, &format!("{prefix}.bias"), &[dout], din);
        }
    }

    pub fn init_batch_norm(&mut self, prefix: &str, c: usize) {
        self.insert_param(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
        self.insert_param(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
    }
}

/// One forward pass: the tape plus the parameters bound into it.
pub struct Forward {
    pub graph: Graph,
    bound: BTreeMap<String, Var>,
    train: bool,
    bn_stats: Vec<(String, BatchStats)>,
}

impl Forward {
    pub fn new(train: bool) -> Self {
        Self {
            graph: Graph::new(),
            bound: BTreeMap::new(),
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Binds parameter `name` from `store` as a trainable leaf (once per pass).
    ///
    /// Panics if the store has no such parameter; parameter layouts are fixed
    /// by the architecture code that calls this.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = store
            .param(name)
            .unwrap_or_else(|| panic!("parameter {name} is not initialized"))
            .clone();
        let v = self.graph.param(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Batch norm over `[B, C, T]` using batch statistics when training and
    /// the stored running statistics otherwise.
    pub fn batch_norm(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Var {
        let gamma = self.param(store, &format!("{prefix}.gamma"));
        let beta = self.param(store, &format!("{prefix}.beta"));
        if self.train {
            let (y, stats) = ops::batch_norm(&mut self.graph, x, gamma, beta, NormMode::Train);
            if let Some(stats) = stats {
                self.bn_stats.push((prefix.to_string(), stats));
            }
            y
        } else {
            let mean = store
                .buffer(&format!("{prefix}.running_mean"))
                .expect("missing running mean")
                .data();
            let var = store
                .buffer(&format!("{prefix}.running_var"))
                .expect("missing running var")
                .data();
            ops::batch_norm(&mut self.graph, x, gamma, beta, NormMode::Eval { mean, var }).0
        }
    }

    /// `conv → ReLU → batch norm`, the frame-level building block of both encoders.
    pub fn tdnn_block(
        &mut self,
        store: &ParamStore,
        prefix: &str,
        x: Var,
        dilation: usize,
        padding: usize,
    ) -> Var {
        let w = self.param(store, &format!("{prefix}.conv.weight"));
        let b = self.param(store, &format!("{prefix}.conv.bias"));
        let y = ops::conv1d(&mut self.graph, x, w, Some(b), dilation, padding);
        let y = ops::relu(&mut self.graph, y);
        self.batch_norm(store, &format!("{prefix}.bn"), y)
    }

    pub fn linear(&mut self, store: &ParamStore, prefix: &str, x: Var, bias: bool) -> Var {
        let w = self.param(store, &format!("{prefix}.weight"));
        let b = bias.then(|| self.param(store, &format!("{prefix}.bias")));
        ops::linear(&mut self.graph, x, w, b)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of `root` keyed by parameter name. Parameters that did not
    /// influence `root` get zero tensors.
    pub fn param_grads(&self, root: Var) -> BTreeMap<String, Tensor> {
        let mut grads: Gradients = self.graph.backward(root);
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
