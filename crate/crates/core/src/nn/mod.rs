//! Minimal f64 layer stack with hand-written backward passes.
//!
//! Layers are immutable during the forward pass; everything needed for the
//! backward pass lives in an explicit per-call [`Cache`], so a frozen model
//! can run clean and adversarial passes concurrently without interior
//! mutability. Parameter gradients accumulate into a [`GradStore`] indexed by
//! slots assigned at network construction, which keeps reduction order fixed
//! and results bit-reproducible.

pub mod adam;
mod blocks;
mod conv;
mod linear;
mod norm;
pub mod pad;
mod pool;

pub use blocks::{DenseBlock, DenseCache, ResBlock, ResCache};
pub use conv::{Conv2d, ConvCache, PadMode};
pub use linear::{Linear, LinearCache};
pub use norm::{InstanceNorm, Normalize, NormCache};
pub use pool::{squeeze_logits as pool_squeeze, unsqueeze_grad as pool_unsqueeze, MaxPoolCache};

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Rank-4 activation / image tensor, layout (count, channels, height, width).
pub type Tensor4 = Array4<f64>;

/// One network layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(InstanceNorm),
    Preprocess(Normalize),
    Linear(Linear),
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    GlobalAvgPool,
    Res(ResBlock),
    Dense(DenseBlock),
}

/// Per-call forward state consumed by the matching layer's backward pass.
#[derive(Debug)]
pub enum Cache {
    Conv(ConvCache),
    Norm(NormCache),
    Preprocess,
    Linear(LinearCache),
    /// Forward output; the mask is `y > 0`.
    Relu(Tensor4),
    /// Forward output; the local derivative is `y * (1 - y)`.
    Sigmoid(Tensor4),
    MaxPool2(MaxPoolCache),
    Upsample2,
    GlobalAvgPool { h: usize, w: usize },
    Res(Box<ResCache>),
    Dense(Box<DenseCache>),
}

/// Slot-indexed parameter gradients for one backward pass.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<ndarray::ArrayD<f64>>,
}

impl GradStore {
    pub fn zeros_like(shapes: &[IxDyn]) -> Self {
        GradStore {
            grads: shapes.iter().map(|s| ndarray::ArrayD::zeros(s.clone())).collect(),
        }
    }

    pub fn slot_mut(&mut self, slot: usize) -> &mut ndarray::ArrayD<f64> {
        &mut self.grads[slot]
    }

    pub fn slot(&self, slot: usize) -> &ndarray::ArrayD<f64> {
        &self.grads[slot]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ndarray::ArrayD<f64>> {
        self.grads.iter()
    }

    /// Global l2 norm over every slot, for optional clipping.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

impl Layer {
    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Norm(n) => n.forward(x),
            Layer::Preprocess(p) => p.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu => x.mapv(|v| v.max(0.0)),
            Layer::Sigmoid => x.mapv(sigmoid),
            Layer::MaxPool2 => pool::maxpool2(x).0,
            Layer::Upsample2 => pool::upsample2(x),
            Layer::GlobalAvgPool => pool::global_avg_pool(x),
            Layer::Res(b) => b.forward(x),
            Layer::Dense(d) => d.forward(x),
        }
    }

    pub fn forward_cached(&self, x: &Tensor4) -> (Tensor4, Cache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward_cached(x);
                (y, Cache::Conv(cache))
            }
            Layer::Norm(n) => {
                let (y, cache) = n.forward_cached(x);
                (y, Cache::Norm(cache))
            }
            Layer::Preprocess(p) => (p.forward(x), Cache::Preprocess),
            Layer::Linear(l) => {
                let (y, cache) = l.forward_cached(x);
                (y, Cache::Linear(cache))
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y.clone(), Cache::Relu(y))
            }
            Layer::Sigmoid => {
                let y = x.mapv(sigmoid);
                (y.clone(), Cache::Sigmoid(y))
            }
            Layer::MaxPool2 => {
                let (y, cache) = pool::maxpool2(x);
                (y, Cache::MaxPool2(cache))
            }
            Layer::Upsample2 => (pool::upsample2(x), Cache::Upsample2),
            Layer::GlobalAvgPool => {
                let (_, _, h, w) = x.dim();
                (pool::global_avg_pool(x), Cache::GlobalAvgPool { h, w })
            }
            Layer::Res(b) => {
                let (y, cache) = b.forward_cached(x);
                (y, Cache::Res(Box::new(cache)))
            }
            Layer::Dense(d) => {
                let (y, cache) = d.forward_cached(x);
                (y, Cache::Dense(Box::new(cache)))
            }
        }
    }

    /// Propagate `grad_out` back through this layer. Parameter gradients are
    /// accumulated into `grads` when present; pass `None` for frozen layers.
    pub fn backward(
        &self,
        cache: &Cache,
        grad_out: &Tensor4,
        grads: Option<&mut GradStore>,
    ) -> Tensor4 {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv(cc)) => c.backward(cc, grad_out, grads),
            (Layer::Norm(n), Cache::Norm(nc)) => n.backward(nc, grad_out, grads),
            (Layer::Preprocess(p), Cache::Preprocess) => p.backward(grad_out),
            (Layer::Linear(l), Cache::Linear(lc)) => l.backward(lc, grad_out, grads),
            (Layer::Relu, Cache::Relu(y)) => {
                let mut dx = grad_out.clone();
                dx.zip_mut_with(y, |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                dx
            }
            (Layer::Sigmoid, Cache::Sigmoid(y)) => {
                let mut dx = grad_out.clone();
                dx.zip_mut_with(y, |d, &v| *d *= v * (1.0 - v));
                dx
            }
            (Layer::MaxPool2, Cache::MaxPool2(mc)) => pool::maxpool2_backward(mc, grad_out),
            (Layer::Upsample2, Cache::Upsample2) => pool::upsample2_backward(grad_out),
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { h, w }) => {
                pool::global_avg_pool_backward(grad_out, *h, *w)
            }
            (Layer::Res(b), Cache::Res(rc)) => b.backward(rc, grad_out, grads),
            (Layer::Dense(d), Cache::Dense(dc)) => d.backward(dc, grad_out, grads),
            _ => unreachable!("layer/cache variant mismatch"),
        }
    }

    pub(crate) fn assign_slots(&mut self, next: &mut usize) {
        match self {
            Layer::Conv(c) => c.assign_slots(next),
            Layer::Norm(n) => n.assign_slots(next),
            Layer::Linear(l) => l.assign_slots(next),
            Layer::Res(b) => b.assign_slots(next),
            Layer::Dense(d) => d.assign_slots(next),
            _ => {}
        }
    }

    pub(crate) fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        match self {
            Layer::Conv(c) => c.init_params(rng),
            Layer::Norm(n) => n.init_params(),
            Layer::Linear(l) => l.init_params(rng),
            Layer::Res(b) => b.init_params(rng),
            Layer::Dense(d) => d.init_params(rng),
            _ => {}
        }
    }

    pub(crate) fn collect_params<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    ) {
        match self {
            Layer::Conv(c) => c.collect_params(prefix, out),
            Layer::Norm(n) => n.collect_params(prefix, out),
            Layer::Linear(l) => l.collect_params(prefix, out),
            Layer::Res(b) => b.collect_params(prefix, out),
            Layer::Dense(d) => d.collect_params(prefix, out),
            _ => {}
        }
    }

    pub(crate) fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        match self {
            Layer::Conv(c) => c.collect_params_mut(prefix, out),
            Layer::Norm(n) => n.collect_params_mut(prefix, out),
            Layer::Linear(l) => l.collect_params_mut(prefix, out),
            Layer::Res(b) => b.collect_params_mut(prefix, out),
            Layer::Dense(d) => d.collect_params_mut(prefix, out),
            _ => {}
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// An ordered stack of named layers.
#[derive(Debug, Clone)]
pub struct Sequential {
    entries: Vec<(String, Layer)>,
    n_slots: usize,
}

impl Sequential {
    pub fn new(entries: Vec<(String, Layer)>) -> Self {
        let mut entries = entries;
        let mut next = 0usize;
        for (_, layer) in &mut entries {
            layer.assign_slots(&mut next);
        }
        Sequential { entries, n_slots: next }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.entries[idx].1
    }

    /// Draw fresh parameters for every layer, in a fixed traversal order.
    pub fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        for (_, layer) in &mut self.entries {
            layer.init_params(rng);
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        self.forward_range(x, 0, self.entries.len())
    }

    /// Run layers `start..end` without caching.
    pub fn forward_range(&self, x: &Tensor4, start: usize, end: usize) -> Tensor4 {
        let mut cur = x.clone();
        for (_, layer) in &self.entries[start..end] {
            cur = layer.forward(&cur);
        }
        cur
    }

    /// Run layers `start..end`, collecting a cache per layer.
    pub fn forward_cached_range(
        &self,
        x: &Tensor4,
        start: usize,
        end: usize,
    ) -> (Tensor4, Vec<Cache>) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(end - start);
        for (_, layer) in &self.entries[start..end] {
            let (y, cache) = layer.forward_cached(&cur);
            caches.push(cache);
            cur = y;
        }
        (cur, caches)
    }

    /// Backward through layers `start..end` (matching a prior
    /// `forward_cached_range` call), returning the gradient at the input.
    pub fn backward_range(
        &self,
        caches: &[Cache],
        grad_out: &Tensor4,
        start: usize,
        end: usize,
        mut grads: Option<&mut GradStore>,
    ) -> Tensor4 {
        assert_eq!(caches.len(), end - start, "cache count mismatch");
        let mut grad = grad_out.clone();
        for (offset, (_, layer)) in self.entries[start..end].iter().enumerate().rev() {
            grad = layer.backward(&caches[offset], &grad, grads.as_deref_mut());
        }
        grad
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    /// Fresh zeroed gradient store shaped like this network's parameters.
    pub fn grad_store(&self) -> GradStore {
        let shapes: Vec<IxDyn> = self.params().iter().map(|(_, v)| v.raw_dim()).collect();
        GradStore::zeros_like(&shapes)
    }

    /// Named parameter views in slot order.
    pub fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.entries {
            layer.collect_params(name, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (name, layer) in &mut self.entries {
            layer.collect_params_mut(name, &mut out);
        }
        out
    }

    /// Index of the layer named `name`, if present.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Mean cross-entropy over softmaxed logits, with the gradient already
/// divided by the batch size.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "label count mismatch");
    let mut grad = Array2::zeros((n, k));
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[labels[i]];
        for j in 0..k {
            let p = exps[j] / sum;
            grad[[i, j]] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Argmax per row with ties broken by the lowest index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}
