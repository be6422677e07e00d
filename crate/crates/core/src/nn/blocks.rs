//! Composite blocks: residual and densely connected.

use super::conv::{Conv2d, ConvCache, PadMode};
use super::norm::{InstanceNorm, NormCache};
use super::{GradStore, Tensor4};
use ndarray::{s, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

/// Two 3x3 convolutions with an additive skip connection.
///
/// `proj` carries the skip path when the channel count changes. With
/// `post_relu` the block ends in an activation (classifier style); without it
/// the sum is returned raw (image-to-image style).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
    pub proj: Option<Conv2d>,
    pub post_relu: bool,
}

#[derive(Debug)]
pub struct ResCache {
    c1: ConvCache,
    n1: NormCache,
    relu1: Tensor4,
    c2: ConvCache,
    n2: NormCache,
    proj: Option<ConvCache>,
    out_pre_relu: Option<Tensor4>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, pad_mode: PadMode, post_relu: bool) -> Self {
        ResBlock {
            conv1: Conv2d::new(cin, cout, 3, 1, 1, pad_mode),
            norm1: InstanceNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, pad_mode),
            norm2: InstanceNorm::new(cout),
            proj: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0, PadMode::Zero)),
            post_relu,
        }
    }

    pub(crate) fn assign_slots(&mut self, next: &mut usize) {
        self.conv1.assign_slots(next);
        self.norm1.assign_slots(next);
        self.conv2.assign_slots(next);
        self.norm2.assign_slots(next);
        if let Some(p) = &mut self.proj {
            p.assign_slots(next);
        }
    }

    pub(crate) fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        self.conv1.init_params(rng);
        self.norm1.init_params();
        self.conv2.init_params(rng);
        self.norm2.init_params();
        if let Some(p) = &mut self.proj {
            p.init_params(rng);
        }
    }

    pub(crate) fn collect_params<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    ) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        if let Some(p) = &self.proj {
            p.collect_params(&format!("{prefix}.proj"), out);
        }
    }

    pub(crate) fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.conv1.collect_params_mut(&format!("{prefix}.conv1"), out);
        self.norm1.collect_params_mut(&format!("{prefix}.norm1"), out);
        self.conv2.collect_params_mut(&format!("{prefix}.conv2"), out);
        self.norm2.collect_params_mut(&format!("{prefix}.norm2"), out);
        if let Some(p) = &mut self.proj {
            p.collect_params_mut(&format!("{prefix}.proj"), out);
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let y = self.norm1.forward(&self.conv1.forward(x)).mapv(|v| v.max(0.0));
        let z = self.norm2.forward(&self.conv2.forward(&y));
        let skip = match &self.proj {
            Some(p) => p.forward(x),
            None => x.clone(),
        };
        let mut out = z + skip;
        if self.post_relu {
            out.mapv_inplace(|v| v.max(0.0));
        }
        out
    }

    pub fn forward_cached(&self, x: &Tensor4) -> (Tensor4, ResCache) {
        let (a, c1) = self.conv1.forward_cached(x);
        let (b, n1) = self.norm1.forward_cached(&a);
        let relu1 = b.mapv(|v| v.max(0.0));
        let (d, c2) = self.conv2.forward_cached(&relu1);
        let (z, n2) = self.norm2.forward_cached(&d);
        let (skip, proj_cache) = match &self.proj {
            Some(p) => {
                let (s, pc) = p.forward_cached(x);
                (s, Some(pc))
            }
            None => (x.clone(), None),
        };
        let mut out = z + skip;
        let out_pre_relu = if self.post_relu {
            let pre = out.clone();
            out.mapv_inplace(|v| v.max(0.0));
            Some(pre)
        } else {
            None
        };
        let cache = ResCache { c1, n1, relu1, c2, n2, proj: proj_cache, out_pre_relu };
        (out, cache)
    }

    pub fn backward(
        &self,
        cache: &ResCache,
        grad_out: &Tensor4,
        mut grads: Option<&mut GradStore>,
    ) -> Tensor4 {
        let mut g = grad_out.clone();
        if let Some(pre) = &cache.out_pre_relu {
            g.zip_mut_with(pre, |d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        // main branch
        let gz = self.norm2.backward(&cache.n2, &g, grads.as_deref_mut());
        let mut gr = self.conv2.backward(&cache.c2, &gz, grads.as_deref_mut());
        gr.zip_mut_with(&cache.relu1, |d, &v| {
            if v <= 0.0 {
                *d = 0.0;
            }
        });
        let gb = self.norm1.backward(&cache.n1, &gr, grads.as_deref_mut());
        let mut dx = self.conv1.backward(&cache.c1, &gb, grads.as_deref_mut());
        // skip branch
        match (&self.proj, &cache.proj) {
            (Some(p), Some(pc)) => {
                dx += &p.backward(pc, &g, grads);
            }
            (None, None) => {
                dx += &g;
            }
            _ => unreachable!("proj cache mismatch"),
        }
        dx
    }
}

/// Dense connectivity: each 3x3 convolution consumes the concatenation of the
/// block input and all previous conv outputs and contributes `growth` new
/// channels.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub convs: Vec<Conv2d>,
    pub growth: usize,
}

#[derive(Debug)]
pub struct DenseCache {
    conv_caches: Vec<ConvCache>,
    relu_outs: Vec<Tensor4>,
    in_channels: usize,
}

impl DenseBlock {
    pub fn new(cin: usize, growth: usize, n_convs: usize, pad_mode: PadMode) -> Self {
        let convs = (0..n_convs)
            .map(|i| Conv2d::new(cin + i * growth, growth, 3, 1, 1, pad_mode))
            .collect();
        DenseBlock { convs, growth }
    }

    pub fn out_channels(&self, cin: usize) -> usize {
        cin + self.convs.len() * self.growth
    }

    pub(crate) fn assign_slots(&mut self, next: &mut usize) {
        for c in &mut self.convs {
            c.assign_slots(next);
        }
    }

    pub(crate) fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        for c in &mut self.convs {
            c.init_params(rng);
        }
    }

    pub(crate) fn collect_params<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    ) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect_params(&format!("{prefix}.conv{}", i + 1), out);
        }
    }

    pub(crate) fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.collect_params_mut(&format!("{prefix}.conv{}", i + 1), out);
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let mut cat = x.clone();
        for conv in &self.convs {
            let y = conv.forward(&cat).mapv(|v| v.max(0.0));
            cat = concat_channels(&cat, &y);
        }
        cat
    }

    pub fn forward_cached(&self, x: &Tensor4) -> (Tensor4, DenseCache) {
        let mut cat = x.clone();
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut relu_outs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cc) = conv.forward_cached(&cat);
            let y = pre.mapv(|v| v.max(0.0));
            conv_caches.push(cc);
            relu_outs.push(y.clone());
            cat = concat_channels(&cat, &y);
        }
        let cache = DenseCache { conv_caches, relu_outs, in_channels: x.dim().1 };
        (cat, cache)
    }

    pub fn backward(
        &self,
        cache: &DenseCache,
        grad_out: &Tensor4,
        mut grads: Option<&mut GradStore>,
    ) -> Tensor4 {
        // Walk convs in reverse, splitting the concatenated gradient into the
        // part for the running prefix and the part for the conv output.
        let mut g = grad_out.clone();
        for (idx, conv) in self.convs.iter().enumerate().rev() {
            let split = cache.in_channels + idx * self.growth;
            let g_prefix = g.slice(s![.., 0..split, .., ..]).to_owned();
            let mut g_new = g.slice(s![.., split.., .., ..]).to_owned();
            g_new.zip_mut_with(&cache.relu_outs[idx], |d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
            let g_through = conv.backward(&cache.conv_caches[idx], &g_new, grads.as_deref_mut());
            g = g_prefix + g_through;
        }
        g
    }
}

fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let cat = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat");
    cat.as_standard_layout().into_owned()
}
