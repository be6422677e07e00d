//! The generator training loop, checkpointing and the loss trace.

use crate::checkpoint::{assign_params, Container};
use crate::data::{augment, to_batch, AugmentPolicy, DatasetHandle};
use crate::error::{Error, Result};
use crate::generator::{build_generator, project_with_mask, AttackBudget, Generator, GeneratorSpec};
use crate::models::{Classifier, LayerTap};
use crate::nn::adam::Adam;
use crate::objectives::{ensemble_with_grad_opts, ObjectiveKind, RnDraw};
use crate::rng::seed_everything;
use std::collections::BTreeMap;
use std::path::Path;

/// Generator training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub moment_decays: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub budget: AttackBudget,
    pub augment: AugmentPolicy,
    /// Draw one (mu', sigma') pair per image instead of per step.
    pub rn_per_image: bool,
    /// Compute attention from normalization-applied clean features (default)
    /// or from the raw clean features.
    pub attention_from_rn: bool,
    /// Use the exact projection subgradient (zero outside the band) instead
    /// of the default pass-through gradient. The exact rule silences every
    /// clipped pixel, which stalls optimization at desk scale.
    pub hard_projection_grad: bool,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveKind, budget: AttackBudget, seed: u64) -> Self {
        TrainConfig {
            lr: 2e-4,
            moment_decays: (0.5, 0.999),
            batch_size: 16,
            epochs: 1,
            seed,
            objective,
            budget,
            augment: AugmentPolicy::disabled(),
            rn_per_image: false,
            attention_from_rn: true,
            hard_projection_grad: false,
            grad_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::InvalidParameter("learning rate must be non-negative".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        self.objective.validate()?;
        self.augment.validate()
    }
}

/// Per-step objective values from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace(pub Vec<f64>);

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, v) in self.0.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.0[range];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// Train the generator against one or more frozen substitutes.
///
/// Each step draws a batch, crafts the projected adversarial batch, evaluates
/// the configured objective and applies one adaptive-moment update to the
/// generator parameters. Substitute weights are never touched. Returns the
/// per-step loss trace; on a non-finite loss the loop aborts before applying
/// the offending update, so the generator retains its last good parameters.
pub fn train_generator(
    generator: &mut Generator,
    substitutes: &[(&Classifier, LayerTap)],
    dataset: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    if substitutes.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let hub = seed_everything(cfg.seed);
    let mut batch_rng = hub.stream("train-batches");
    let mut rn_rng = hub.stream("rn-draws");
    let mut augment_rng = hub.stream("train-augment");

    let mut grads = generator.grad_store();
    let mut adam = Adam::new(cfg.lr, cfg.moment_decays.0, cfg.moment_decays.1, &grads);
    let mut trace = Vec::new();
    let mut step = 0usize;
    let eps = cfg.budget.epsilon;

    for _ in 0..cfg.epochs {
        for indices in dataset.epoch_batches(cfg.batch_size, &mut batch_rng) {
            let (raw_batch, _) = to_batch(dataset, &indices)?;
            let x = augment(&raw_batch, &cfg.augment, &mut augment_rng)?;

            let (candidate, gen_caches) = generator.forward_cached(&x)?;
            let (x_adv, mask) = project_with_mask(&candidate, &x, eps)?;
            debug_assert!(x_adv.iter().all(|&v| (0.0..=1.0).contains(&v)));

            let rn_draw = match (&cfg.objective.rn, cfg.objective.variant.uses_rn()) {
                (Some(rn), true) => Some(if cfg.rn_per_image {
                    let pairs = (0..x.dim().0)
                        .map(|_| rn.draw(&mut rn_rng))
                        .collect::<Result<Vec<_>>>()?;
                    RnDraw::PerImage(pairs)
                } else {
                    let (mu, sigma) = rn.draw(&mut rn_rng)?;
                    RnDraw::Shared(mu, sigma)
                }),
                _ => None,
            };

            let (loss, grad_x_adv) = ensemble_with_grad_opts(
                substitutes,
                cfg.objective.variant,
                rn_draw,
                cfg.attention_from_rn,
                &x_adv,
                &x,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: loss });
            }
            trace.push(loss);

            let mut grad_candidate = grad_x_adv;
            if cfg.hard_projection_grad {
                grad_candidate.zip_mut_with(&mask, |g, &m| *g *= m);
            }
            grads.zero();
            generator.backward(&gen_caches, &grad_candidate, &mut grads);
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            let mut params = generator.params_mut();
            adam.step(&mut params, &grads);
            step += 1;
        }
    }
    Ok(LossTrace(trace))
}

/// Serialize a generator into the shared container format.
pub fn save_checkpoint(
    generator: &Generator,
    path: &Path,
    metadata: &[(String, String)],
) -> Result<()> {
    let mut c = Container::new();
    for (name, view) in generator.params() {
        c.arrays.push((name, view.to_owned()));
    }
    c.metadata.insert("kind".into(), "generator".into());
    c.metadata.insert("spec.down_blocks".into(), generator.spec.down_blocks.to_string());
    c.metadata
        .insert("spec.residual_blocks".into(), generator.spec.residual_blocks.to_string());
    c.metadata.insert("spec.up_blocks".into(), generator.spec.up_blocks.to_string());
    c.metadata.insert("spec.base_channels".into(), generator.spec.base_channels.to_string());
    for (k, v) in metadata {
        c.metadata.insert(k.clone(), v.clone());
    }
    c.save(path)
}

/// Rebuild a generator (and its metadata) from a checkpoint, verifying that
/// the stored arrays match the declared spec.
pub fn load_checkpoint(path: &Path) -> Result<(Generator, BTreeMap<String, String>)> {
    let c = Container::load(path)?;
    if c.meta("kind")? != "generator" {
        return Err(Error::CheckpointMismatch(format!(
            "expected kind=generator, found {}",
            c.meta("kind")?
        )));
    }
    let spec = GeneratorSpec {
        down_blocks: c.meta_parse("spec.down_blocks")?,
        residual_blocks: c.meta_parse("spec.residual_blocks")?,
        up_blocks: c.meta_parse("spec.up_blocks")?,
        base_channels: c.meta_parse("spec.base_channels")?,
    };
    let mut rng = seed_everything(0).stream("checkpoint-rebuild");
    let mut generator = build_generator(spec, &mut rng)?;
    let mut params = generator.params_mut();
    assign_params(&mut params, &c, "generator checkpoint")?;
    drop(params);
    Ok((generator, c.metadata))
}
