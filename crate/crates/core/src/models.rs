//! Substitute and target classifiers with named intermediate-feature taps.
//!
//! Three desk-scale architectures are registered: a plain convolutional net, a
//! residual net and a densely connected net. Each exposes three named
//! downsampling stages (`stage1`..`stage3`, shallow to deep) whose outputs can
//! be tapped, and ends in a pooled linear head. Per-channel standardization is
//! the first layer, so preprocessing is part of every forward pass.

use crate::data::{to_batch, DatasetHandle, NormStats, Split};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::{
    argmax_rows, pool_squeeze, pool_unsqueeze, softmax_cross_entropy, Cache, Conv2d, DenseBlock,
    GradStore, Layer, Linear, Normalize, PadMode, ResBlock, Sequential, Tensor4,
};
use crate::rng::RngHub;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Names a stage whose output is exposed for feature attacks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LayerTap {
    pub layer_id: String,
}

impl LayerTap {
    pub fn new(layer_id: impl Into<String>) -> Self {
        LayerTap { layer_id: layer_id.into() }
    }
}

impl std::fmt::Display for LayerTap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.layer_id)
    }
}

/// A classifier with named stages and internal preprocessing.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch_id: String,
    pub class_count: usize,
    pub preprocess: NormStats,
    pub input_resolution: (usize, usize),
    pub stride_product: usize,
    net: Sequential,
    /// (stage name, index of the stage's last layer), shallow to deep.
    stage_ends: Vec<(String, usize)>,
}

pub const ARCH_IDS: [&str; 3] = ["smallconv", "smallres", "smalldense"];

/// Build and initialize a registered architecture.
pub fn build_classifier(
    arch_id: &str,
    class_count: usize,
    input_resolution: (usize, usize),
    preprocess: NormStats,
    rng: &mut ChaCha8Rng,
) -> Result<Classifier> {
    preprocess.validate()?;
    let entries = match arch_id {
        "smallconv" => smallconv_entries(class_count, preprocess),
        "smallres" => smallres_entries(class_count, preprocess),
        "smalldense" => smalldense_entries(class_count, preprocess),
        other => return Err(Error::UnknownArch(other.to_string())),
    };
    let mut net = Sequential::new(entries);
    net.init_params(rng);
    let stage_ends = ["stage1", "stage2", "stage3"]
        .iter()
        .map(|s| {
            let idx = net
                .names()
                .enumerate()
                .filter(|(_, n)| n.starts_with(&format!("{s}.")))
                .map(|(i, _)| i)
                .max()
                .expect("every arch has three stages");
            (s.to_string(), idx)
        })
        .collect();
    Ok(Classifier {
        arch_id: arch_id.to_string(),
        class_count,
        preprocess,
        input_resolution,
        stride_product: 8,
        net,
        stage_ends,
    })
}

fn smallconv_entries(classes: usize, stats: NormStats) -> Vec<(String, Layer)> {
    let conv = |cin, cout| Layer::Conv(Conv2d::new(cin, cout, 3, 1, 1, PadMode::Zero));
    vec![
        ("preprocess".into(), Layer::Preprocess(Normalize::new(stats))),
        ("stage1.conv".into(), conv(3, 16)),
        ("stage1.relu".into(), Layer::Relu),
        ("stage1.pool".into(), Layer::MaxPool2),
        ("stage2.conv".into(), conv(16, 32)),
        ("stage2.relu".into(), Layer::Relu),
        ("stage2.pool".into(), Layer::MaxPool2),
        ("stage3.conv".into(), conv(32, 64)),
        ("stage3.relu".into(), Layer::Relu),
        ("stage3.pool".into(), Layer::MaxPool2),
        ("head.pool".into(), Layer::GlobalAvgPool),
        ("head.fc".into(), Layer::Linear(Linear::new(64, classes))),
    ]
}

fn smallres_entries(classes: usize, stats: NormStats) -> Vec<(String, Layer)> {
    vec![
        ("preprocess".into(), Layer::Preprocess(Normalize::new(stats))),
        ("stem.conv".into(), Layer::Conv(Conv2d::new(3, 16, 3, 1, 1, PadMode::Zero))),
        ("stem.relu".into(), Layer::Relu),
        ("stage1.res".into(), Layer::Res(ResBlock::new(16, 16, PadMode::Zero, true))),
        ("stage1.pool".into(), Layer::MaxPool2),
        ("stage2.res".into(), Layer::Res(ResBlock::new(16, 32, PadMode::Zero, true))),
        ("stage2.pool".into(), Layer::MaxPool2),
        ("stage3.res".into(), Layer::Res(ResBlock::new(32, 64, PadMode::Zero, true))),
        ("stage3.pool".into(), Layer::MaxPool2),
        ("head.pool".into(), Layer::GlobalAvgPool),
        ("head.fc".into(), Layer::Linear(Linear::new(64, classes))),
    ]
}

fn smalldense_entries(classes: usize, stats: NormStats) -> Vec<(String, Layer)> {
    let trans = |cin, cout| Layer::Conv(Conv2d::new(cin, cout, 1, 1, 0, PadMode::Zero));
    vec![
        ("preprocess".into(), Layer::Preprocess(Normalize::new(stats))),
        ("stem.conv".into(), Layer::Conv(Conv2d::new(3, 12, 3, 1, 1, PadMode::Zero))),
        ("stem.relu".into(), Layer::Relu),
        ("stage1.dense".into(), Layer::Dense(DenseBlock::new(12, 8, 2, PadMode::Zero))),
        ("stage1.trans".into(), trans(28, 16)),
        ("stage1.relu".into(), Layer::Relu),
        ("stage1.pool".into(), Layer::MaxPool2),
        ("stage2.dense".into(), Layer::Dense(DenseBlock::new(16, 8, 2, PadMode::Zero))),
        ("stage2.trans".into(), trans(32, 24)),
        ("stage2.relu".into(), Layer::Relu),
        ("stage2.pool".into(), Layer::MaxPool2),
        ("stage3.dense".into(), Layer::Dense(DenseBlock::new(24, 8, 2, PadMode::Zero))),
        ("stage3.trans".into(), trans(40, 32)),
        ("stage3.relu".into(), Layer::Relu),
        ("stage3.pool".into(), Layer::MaxPool2),
        ("head.pool".into(), Layer::GlobalAvgPool),
        ("head.fc".into(), Layer::Linear(Linear::new(32, classes))),
    ]
}

impl Classifier {
    fn check_resolution(&self, x: &Tensor4) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        if h % self.stride_product != 0 || w % self.stride_product != 0 {
            return Err(Error::ResolutionNotDivisible { h, w, stride: self.stride_product });
        }
        Ok(())
    }

    fn tap_end(&self, tap: &LayerTap) -> Result<usize> {
        self.stage_ends
            .iter()
            .find(|(name, _)| *name == tap.layer_id)
            .map(|(_, idx)| idx + 1)
            .ok_or_else(|| Error::UnknownTap {
                tap: tap.layer_id.clone(),
                available: self.list_taps(),
            })
    }

    /// Ordered tap names, shallow to deep. The head is never a tap.
    pub fn list_taps(&self) -> Vec<String> {
        self.stage_ends.iter().map(|(n, _)| n.clone()).collect()
    }

    /// The middle stage, the default attack point.
    pub fn default_tap(&self) -> LayerTap {
        LayerTap::new("stage2")
    }

    /// Class scores for a pixel batch in [0,1].
    pub fn forward(&self, x: &Tensor4) -> Result<Array2<f64>> {
        self.check_resolution(x)?;
        let out = self.net.forward(x);
        Ok(pool_squeeze(&out))
    }

    pub fn predict(&self, x: &Tensor4) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }

    /// Forward with caches for a full backward pass during training.
    pub fn forward_cached(&self, x: &Tensor4) -> Result<(Array2<f64>, Vec<Cache>)> {
        self.check_resolution(x)?;
        let (out, caches) = self.net.forward_cached_range(x, 0, self.net.len());
        Ok((pool_squeeze(&out), caches))
    }

    /// Backward from a logits gradient, accumulating parameter gradients.
    pub fn backward_params(&self, caches: &[Cache], grad_logits: &Array2<f64>, grads: &mut GradStore) {
        let g4 = pool_unsqueeze(grad_logits);
        self.net.backward_range(caches, &g4, 0, self.net.len(), Some(grads));
    }

    /// Activation at the tap layer, without gradient bookkeeping.
    pub fn extract_features(&self, tap: &LayerTap, x: &Tensor4) -> Result<Tensor4> {
        self.check_resolution(x)?;
        let end = self.tap_end(tap)?;
        Ok(self.net.forward_range(x, 0, end))
    }

    /// Activation at the tap layer plus the caches needed to push a feature
    /// gradient back to the input batch.
    pub fn features_cached(&self, tap: &LayerTap, x: &Tensor4) -> Result<(Tensor4, Vec<Cache>)> {
        self.check_resolution(x)?;
        let end = self.tap_end(tap)?;
        Ok(self.net.forward_cached_range(x, 0, end))
    }

    /// Gradient of some scalar loss with respect to the input batch, given its
    /// gradient at the tap features. Model parameters stay frozen.
    pub fn grad_input_from_features(
        &self,
        tap: &LayerTap,
        caches: &[Cache],
        grad_features: &Tensor4,
    ) -> Result<Tensor4> {
        let end = self.tap_end(tap)?;
        Ok(self.net.backward_range(caches, grad_features, 0, end, None))
    }

    /// Replay the remainder of the network on tapped activations.
    pub fn forward_from_features(&self, tap: &LayerTap, features: &Tensor4) -> Result<Array2<f64>> {
        let end = self.tap_end(tap)?;
        let out = self.net.forward_range(features, end, self.net.len());
        Ok(pool_squeeze(&out))
    }

    /// Cross-entropy loss and its gradient with respect to the input batch.
    /// Used by label-driven baselines; parameters stay frozen.
    pub fn ce_grad_input(&self, x: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
        self.check_resolution(x)?;
        let (out, caches) = self.net.forward_cached_range(x, 0, self.net.len());
        let logits = pool_squeeze(&out);
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels);
        let g4 = pool_unsqueeze(&dlogits);
        let dx = self.net.backward_range(&caches, &g4, 0, self.net.len(), None);
        Ok((loss, dx))
    }

    pub fn params(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, f64>)> {
        self.net.params_mut()
    }

    pub fn grad_store(&self) -> GradStore {
        self.net.grad_store()
    }

    /// Top-1 accuracy over a full split, in percent.
    pub fn top1_accuracy(&self, handle: &DatasetHandle, batch_size: usize) -> Result<f64> {
        let mut correct = 0usize;
        for indices in handle.sequential_batches(batch_size) {
            let (x, labels) = to_batch(handle, &indices)?;
            let preds = self.predict(&x)?;
            correct += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
        }
        Ok(100.0 * correct as f64 / handle.len() as f64)
    }
}

/// Train a classifier with cross-entropy and adaptive-moment updates; returns
/// the top-1 test accuracy. Deterministic given the hub seed.
pub fn train_classifier(
    model: &mut Classifier,
    train: &DatasetHandle,
    test: &DatasetHandle,
    epochs: usize,
    lr: f64,
    hub: &RngHub,
) -> Result<f64> {
    if train.split != Split::Train {
        return Err(Error::InvalidParameter("training requires the train split".into()));
    }
    let mut batch_rng = hub.stream(&format!("classifier-batches/{}", model.arch_id));
    let mut grads = model.grad_store();
    let mut adam = Adam::new(lr, 0.9, 0.999, &grads);
    let batch_size = 32;
    let mut step = 0usize;
    for _ in 0..epochs {
        for indices in train.epoch_batches(batch_size, &mut batch_rng) {
            let (x, labels) = to_batch(train, &indices)?;
            let (logits, caches) = model.forward_cached(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: loss });
            }
            grads.zero();
            model.backward_params(&caches, &dlogits, &mut grads);
            let mut params = model.params_mut();
            adam.step(&mut params, &grads);
            step += 1;
        }
    }
    model.top1_accuracy(test, 64)
}
