//! The fully convolutional perturbation generator and the epsilon-ball
//! projection that constrains its output.

use crate::error::{Error, Result};
use crate::nn::{
    pad, Cache, Conv2d, GradStore, InstanceNorm, Layer, PadMode, ResBlock, Sequential, Tensor4,
};
use rand_chacha::ChaCha8Rng;

/// Architecture description: downsampling, residual and upsampling stages
/// around a fixed stem and a bounded output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorSpec {
    pub down_blocks: usize,
    pub residual_blocks: usize,
    pub up_blocks: usize,
    pub base_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { down_blocks: 2, residual_blocks: 6, up_blocks: 2, base_channels: 16 }
    }
}

impl GeneratorSpec {
    /// Total downsampling factor; inputs must be divisible by this.
    pub fn stride_product(&self) -> usize {
        1 << self.down_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_blocks != self.up_blocks {
            return Err(Error::InvalidParameter(format!(
                "down_blocks ({}) must equal up_blocks ({})",
                self.down_blocks, self.up_blocks
            )));
        }
        if self.residual_blocks < 1 {
            return Err(Error::InvalidParameter("residual_blocks must be >= 1".into()));
        }
        if self.down_blocks < 1 {
            return Err(Error::InvalidParameter("down_blocks must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidParameter("base_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Maximum perturbation, stated on the 8-bit scale and carried in normalized
/// [0,1] units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackBudget {
    pub epsilon_8bit: u32,
    pub epsilon: f64,
}

impl AttackBudget {
    pub fn from_8bit(epsilon_8bit: u32) -> Result<Self> {
        if epsilon_8bit > 255 {
            return Err(Error::InvalidParameter(format!(
                "epsilon_8bit {epsilon_8bit} outside [0,255]"
            )));
        }
        Ok(AttackBudget { epsilon_8bit, epsilon: epsilon_8bit as f64 / 255.0 })
    }
}

/// Image-to-image perturbation network with a sigmoid-bounded output.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    net: Sequential,
    /// (block id, index of the block's last layer).
    block_ends: Vec<(String, usize)>,
}

/// Build and initialize a generator for `spec`.
pub fn build_generator(spec: GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Generator> {
    spec.validate()?;
    let b = spec.base_channels;
    let mut entries: Vec<(String, Layer)> = vec![
        ("stem.conv".into(), Layer::Conv(Conv2d::new(3, b, 3, 1, 1, PadMode::Reflect))),
        ("stem.norm".into(), Layer::Norm(InstanceNorm::new(b))),
        ("stem.relu".into(), Layer::Relu),
    ];
    let mut c = b;
    for i in 1..=spec.down_blocks {
        entries.push((format!("down{i}.conv"), Layer::Conv(Conv2d::new(c, c * 2, 3, 2, 1, PadMode::Reflect))));
        entries.push((format!("down{i}.norm"), Layer::Norm(InstanceNorm::new(c * 2))));
        entries.push((format!("down{i}.relu"), Layer::Relu));
        c *= 2;
    }
    for k in 1..=spec.residual_blocks {
        entries.push((format!("res{k}"), Layer::Res(ResBlock::new(c, c, PadMode::Reflect, false))));
    }
    for i in 1..=spec.up_blocks {
        entries.push((format!("up{i}.upsample"), Layer::Upsample2));
        entries.push((format!("up{i}.conv"), Layer::Conv(Conv2d::new(c, c / 2, 3, 1, 1, PadMode::Reflect))));
        entries.push((format!("up{i}.norm"), Layer::Norm(InstanceNorm::new(c / 2))));
        entries.push((format!("up{i}.relu"), Layer::Relu));
        c /= 2;
    }
    entries.push(("final.conv".into(), Layer::Conv(Conv2d::new(b, 3, 3, 1, 1, PadMode::Reflect))));
    entries.push(("final.act".into(), Layer::Sigmoid));

    let mut net = Sequential::new(entries);
    net.init_params(rng);

    let mut block_ends = Vec::new();
    let idx = |net: &Sequential, name: &str| net.index_of(name).expect("block layer exists");
    block_ends.push(("down".to_string(), idx(&net, &format!("down{}.relu", spec.down_blocks))));
    for k in 1..=spec.residual_blocks {
        block_ends.push((format!("residual_{k}"), idx(&net, &format!("res{k}"))));
    }
    block_ends.push(("up".to_string(), idx(&net, &format!("up{}.relu", spec.up_blocks))));

    Ok(Generator { spec, net, block_ends })
}

impl Generator {
    fn check_divisible(&self, x: &Tensor4) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let s = self.spec.stride_product();
        if h % s != 0 || w % s != 0 {
            return Err(Error::ResolutionNotDivisible { h, w, stride: s });
        }
        Ok(())
    }

    /// Raw bounded candidate for a batch whose resolution divides the stride
    /// product. Values land in [0,1] through the final activation.
    pub fn generate(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_divisible(x)?;
        Ok(self.net.forward(x))
    }

    /// Any-resolution inference: reflect-pad to the next divisible size, run,
    /// center-crop back. Divisible inputs take the exact path.
    pub fn generate_any_size(&self, x: &Tensor4) -> Result<Tensor4> {
        let (_, _, h, w) = x.dim();
        let s = self.spec.stride_product();
        if h % s == 0 && w % s == 0 {
            return self.generate(x);
        }
        let th = h.div_ceil(s) * s;
        let tw = w.div_ceil(s) * s;
        let (ph, pw) = (th - h, tw - w);
        if ph >= h || pw >= w {
            return Err(Error::ResolutionNotDivisible { h, w, stride: s });
        }
        let padded = pad::pad_hw(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2, true);
        let out = self.net.forward(&padded);
        Ok(pad::center_crop(&out, h, w))
    }

    /// Forward with caches for training.
    pub fn forward_cached(&self, x: &Tensor4) -> Result<(Tensor4, Vec<Cache>)> {
        self.check_divisible(x)?;
        Ok(self.net.forward_cached_range(x, 0, self.net.len()))
    }

    /// Backward from a gradient on the raw candidate into parameter space.
    pub fn backward(&self, caches: &[Cache], grad_raw: &Tensor4, grads: &mut GradStore) {
        self.net.backward_range(caches, grad_raw, 0, self.net.len(), Some(grads));
    }

    /// Intermediate activation of a named block: `down`, `residual_k`, `up`.
    pub fn tap_block(&self, block_id: &str, x: &Tensor4) -> Result<Tensor4> {
        self.check_divisible(x)?;
        let end = self
            .block_ends
            .iter()
            .find(|(name, _)| name == block_id)
            .map(|(_, idx)| idx + 1)
            .ok_or_else(|| Error::UnknownBlock(block_id.to_string()))?;
        Ok(self.net.forward_range(x, 0, end))
    }

    pub fn block_ids(&self) -> Vec<String> {
        self.block_ends.iter().map(|(n, _)| n.clone()).collect()
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

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }
}

/// Clamp `candidate` into the epsilon-ball around `x`, then into valid pixel
/// range: `min(x+eps, max(candidate, x-eps))` followed by a [0,1] clamp.
pub fn project(candidate: &Tensor4, x: &Tensor4, epsilon: f64) -> Result<Tensor4> {
    if candidate.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!(
            "candidate {:?} vs x {:?}",
            candidate.dim(),
            x.dim()
        )));
    }
    let mut out = candidate.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|c, &xv| {
        *c = (xv + epsilon).min((xv - epsilon).max(*c)).clamp(0.0, 1.0);
    });
    Ok(out)
}

/// Projection plus the pass-through mask for backpropagation: 1.0 where the
/// candidate sits strictly inside both the epsilon band and [0,1], else 0.0.
pub fn project_with_mask(candidate: &Tensor4, x: &Tensor4, epsilon: f64) -> Result<(Tensor4, Tensor4)> {
    let out = project(candidate, x, epsilon)?;
    let mut mask = Tensor4::zeros(candidate.raw_dim());
    ndarray::Zip::from(&mut mask).and(candidate).and(x).for_each(|m, &c, &xv| {
        let inside_band = c > xv - epsilon && c < xv + epsilon;
        let v = (xv + epsilon).min((xv - epsilon).max(c));
        let inside_range = v > 0.0 && v < 1.0;
        *m = if inside_band && inside_range { 1.0 } else { 0.0 };
    });
    Ok((out, mask))
}
