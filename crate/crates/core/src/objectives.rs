//! Training objectives: feature-space cosine disruption, random input
//! normalization, channel-pooled attention weighting, their combination, and
//! ensemble averaging.
//!
//! Every objective returns the batch-mean cosine similarity between clean and
//! adversarial features at a tap layer; training minimizes it. Values
//! therefore always lie in [-1, 1].

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::models::{Classifier, LayerTap};
use crate::nn::Tensor4;
use ndarray::{s, Array4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Hard floor on drawn sigma values; division by near-zero scales is refused.
pub const SIGMA_FLOOR: f64 = 0.05;
const SIGMA_REDRAWS: usize = 100;

/// Parameters of the two Gaussians behind the random-normalization draws,
/// plus the recorded sample once drawn.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RnParams {
    pub mu_mean: f64,
    pub mu_std: f64,
    pub sigma_mean: f64,
    pub sigma_std: f64,
    /// The (mu', sigma') pair shared by the paired clean and adversarial
    /// passes of one step. Populated on first use when absent.
    pub sample: Option<(f64, f64)>,
}

impl Default for RnParams {
    fn default() -> Self {
        RnParams { mu_mean: 0.50, mu_std: 0.08, sigma_mean: 0.75, sigma_std: 0.08, sample: None }
    }
}

impl RnParams {
    pub fn with_means(mu_mean: f64, sigma_mean: f64) -> Self {
        RnParams { mu_mean, sigma_mean, ..Default::default() }
    }

    /// Draw one (mu', sigma') pair, redrawing sigma until it clears the
    /// positivity floor.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let mu_dist = Normal::new(self.mu_mean, self.mu_std)
            .map_err(|e| Error::InvalidParameter(format!("mu distribution: {e}")))?;
        let sigma_dist = Normal::new(self.sigma_mean, self.sigma_std)
            .map_err(|e| Error::InvalidParameter(format!("sigma distribution: {e}")))?;
        let mu = mu_dist.sample(rng);
        for _ in 0..SIGMA_REDRAWS {
            let sigma = sigma_dist.sample(rng);
            if sigma > SIGMA_FLOOR {
                return Ok((mu, sigma));
            }
        }
        Err(Error::SigmaGuard(SIGMA_REDRAWS))
    }
}

/// Re-standardize pixels with a randomly drawn scalar mean and scale:
/// channel c becomes `std_c * (x - mu') / sigma' + mean_c`.
///
/// When `rn.sample` is absent a pair is drawn once and recorded, so the same
/// draw is reused for the paired clean and adversarial batches of one step.
pub fn random_normalize(
    x: &Tensor4,
    stats: &NormStats,
    rn: &mut RnParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4> {
    stats.validate()?;
    let (mu, sigma) = match rn.sample {
        Some(pair) => pair,
        None => {
            let pair = rn.draw(rng)?;
            rn.sample = Some(pair);
            pair
        }
    };
    Ok(rn_apply(x, stats, mu, sigma))
}

/// The deterministic core of [`random_normalize`] for a fixed draw.
pub fn rn_apply(x: &Tensor4, stats: &NormStats, mu: f64, sigma: f64) -> Tensor4 {
    let mut out = x.clone();
    for c in 0..3 {
        let scale = stats.std[c] / sigma;
        let shift = stats.mean[c];
        // the map is the identity when the drawn pair equals the channel
        // stats; keep that case exact
        if scale == 1.0 && mu == shift {
            continue;
        }
        out.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| scale * (v - mu) + shift);
    }
    out
}

/// Chain rule through [`rn_apply`]: per channel, multiply by `std_c / sigma`.
pub fn rn_backward(grad_out: &Tensor4, stats: &NormStats, sigma: f64) -> Tensor4 {
    let mut dx = grad_out.clone();
    for c in 0..3 {
        let scale = stats.std[c] / sigma;
        dx.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v * scale);
    }
    dx
}

/// Single-channel non-negative weighting map pooled across feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Tensor4);

impl AttentionMap {
    /// Cross-channel average pooling: `|sum over channels| / C` per location.
    /// The result is treated as a constant; no gradient flows through it.
    pub fn from_features(f_clean: &Tensor4) -> Self {
        let (n, c, h, w) = f_clean.dim();
        let mut a = Array4::zeros((n, 1, h, w));
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for ch in 0..c {
                        sum += f_clean[[i, ch, y, x]];
                    }
                    a[[i, 0, y, x]] = sum.abs() / c as f64;
                }
            }
        }
        AttentionMap(a)
    }

    pub fn from_values(values: Tensor4) -> Result<Self> {
        if values.dim().1 != 1 {
            return Err(Error::ShapeMismatch("attention map must have one channel".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("attention values must be non-negative".into()));
        }
        Ok(AttentionMap(values))
    }

    pub fn values(&self) -> &Tensor4 {
        &self.0
    }

    /// Hadamard-weight a feature tensor, broadcasting over channels.
    pub fn weight(&self, f: &Tensor4) -> Tensor4 {
        let (n, c, h, w) = f.dim();
        let mut out = f.clone();
        for i in 0..n {
            for ch in 0..c {
                let mut plane = out.slice_mut(s![i, ch, .., ..]);
                plane.zip_mut_with(&self.0.slice(s![i, 0, .., ..]), |o, &a| *o *= a);
            }
        }
        debug_assert_eq!(out.dim(), (n, c, h, w));
        out
    }
}

/// Cross-channel average pooling of clean features (Hadamard weights for the
/// attended objective).
pub fn attention_map(f_clean: &Tensor4) -> AttentionMap {
    AttentionMap::from_features(f_clean)
}

/// Batch-mean cosine similarity between flattened per-sample features, plus
/// its gradient with respect to `f_adv`.
///
/// A sample whose clean feature vector is all zero is degenerate and errors;
/// a vanished adversarial vector contributes similarity 0 with zero gradient.
pub fn cosine_with_grad(f_adv: &Tensor4, f_clean: &Tensor4) -> Result<(f64, Tensor4)> {
    if f_adv.dim() != f_clean.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature shapes differ: {:?} vs {:?}",
            f_adv.dim(),
            f_clean.dim()
        )));
    }
    let n = f_adv.dim().0;
    let mut grad = Tensor4::zeros(f_adv.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let u = f_adv.slice(s![i, .., .., ..]);
        let v = f_clean.slice(s![i, .., .., ..]);
        let nv2 = v.iter().map(|x| x * x).sum::<f64>();
        if nv2 == 0.0 {
            return Err(Error::DegenerateFeature(i));
        }
        let nu2 = u.iter().map(|x| x * x).sum::<f64>();
        if nu2 == 0.0 {
            continue;
        }
        let dot: f64 = u.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        // dot / sqrt(nu2 * nv2) gives exactly 1.0 for bitwise-identical
        // inputs under round-to-nearest
        let denom = (nu2 * nv2).sqrt();
        let cos = dot / denom;
        total += cos;
        let mut g = grad.slice_mut(s![i, .., .., ..]);
        ndarray::Zip::from(&mut g).and(&u).and(&v).for_each(|gi, &ui, &vi| {
            *gi = (vi / denom - cos * ui / nu2) / n as f64;
        });
    }
    Ok((total / n as f64, grad))
}

/// Batch-mean cosine similarity of flattened features; the quantity training
/// minimizes.
pub fn cosine_feature_loss(f_adv: &Tensor4, f_clean: &Tensor4) -> Result<f64> {
    cosine_with_grad(f_adv, f_clean).map(|(loss, _)| loss)
}

/// Attention-weighted cosine similarity, with the map applied to both sides
/// as a constant.
pub fn attended_loss(f_adv: &Tensor4, f_clean: &Tensor4, a: &AttentionMap) -> Result<f64> {
    attended_with_grad(f_adv, f_clean, a).map(|(loss, _)| loss)
}

/// [`attended_loss`] plus the gradient with respect to `f_adv`.
pub fn attended_with_grad(
    f_adv: &Tensor4,
    f_clean: &Tensor4,
    a: &AttentionMap,
) -> Result<(f64, Tensor4)> {
    let (n, _, h, w) = f_clean.dim();
    let av = a.values();
    if av.dim().0 != n || av.dim().2 != h || av.dim().3 != w {
        return Err(Error::ShapeMismatch(format!(
            "attention {:?} does not broadcast over features {:?}",
            av.dim(),
            f_clean.dim()
        )));
    }
    for i in 0..n {
        if av.slice(s![i, .., .., ..]).iter().all(|&v| v == 0.0) {
            return Err(Error::AttentionCollapsed(i));
        }
    }
    let wa = a.weight(f_adv);
    let wc = a.weight(f_clean);
    let (loss, grad_weighted) = cosine_with_grad(&wa, &wc)?;
    // d(a*f)/df = a
    let grad = a.weight(&grad_weighted);
    Ok((loss, grad))
}

/// Which objective trains the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ObjectiveVariant {
    Bia,
    BiaRn,
    BiaDa,
    BiaRnDa,
}

impl ObjectiveVariant {
    pub fn uses_rn(&self) -> bool {
        matches!(self, ObjectiveVariant::BiaRn | ObjectiveVariant::BiaRnDa)
    }

    pub fn uses_da(&self) -> bool {
        matches!(self, ObjectiveVariant::BiaDa | ObjectiveVariant::BiaRnDa)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveVariant::Bia => "bia",
            ObjectiveVariant::BiaRn => "bia_rn",
            ObjectiveVariant::BiaDa => "bia_da",
            ObjectiveVariant::BiaRnDa => "bia_rn_da",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bia" => Some(ObjectiveVariant::Bia),
            "bia_rn" => Some(ObjectiveVariant::BiaRn),
            "bia_da" => Some(ObjectiveVariant::BiaDa),
            "bia_rn_da" => Some(ObjectiveVariant::BiaRnDa),
            _ => None,
        }
    }

    pub fn all() -> [ObjectiveVariant; 4] {
        [ObjectiveVariant::Bia, ObjectiveVariant::BiaRn, ObjectiveVariant::BiaDa, ObjectiveVariant::BiaRnDa]
    }
}

/// Objective selection: variant, tap and (when used) the RN hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveKind {
    pub variant: ObjectiveVariant,
    pub tap: LayerTap,
    pub rn: Option<RnParams>,
}

impl ObjectiveKind {
    pub fn new(variant: ObjectiveVariant, tap: LayerTap) -> Self {
        let rn = variant.uses_rn().then(RnParams::default);
        ObjectiveKind { variant, tap, rn }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.uses_rn() != self.rn.is_some() {
            return Err(Error::InvalidParameter(
                "rn parameters must be present exactly when the variant uses RN".into(),
            ));
        }
        Ok(())
    }
}

/// One random-normalization draw for a step: a pair shared across the batch,
/// or one pair per image.
#[derive(Debug, Clone, PartialEq)]
pub enum RnDraw {
    Shared(f64, f64),
    PerImage(Vec<(f64, f64)>),
}

impl RnDraw {
    fn apply(&self, x: &Tensor4, stats: &NormStats) -> Tensor4 {
        match self {
            RnDraw::Shared(mu, sigma) => rn_apply(x, stats, *mu, *sigma),
            RnDraw::PerImage(pairs) => {
                let mut out = x.clone();
                for (i, (mu, sigma)) in pairs.iter().enumerate() {
                    let one = rn_apply(&x.slice(s![i..i + 1, .., .., ..]).to_owned(), stats, *mu, *sigma);
                    out.slice_mut(s![i..i + 1, .., .., ..]).assign(&one);
                }
                out
            }
        }
    }

    fn backward(&self, grad: &Tensor4, stats: &NormStats) -> Tensor4 {
        match self {
            RnDraw::Shared(_, sigma) => rn_backward(grad, stats, *sigma),
            RnDraw::PerImage(pairs) => {
                let mut out = grad.clone();
                for (i, (_, sigma)) in pairs.iter().enumerate() {
                    let one =
                        rn_backward(&grad.slice(s![i..i + 1, .., .., ..]).to_owned(), stats, *sigma);
                    out.slice_mut(s![i..i + 1, .., .., ..]).assign(&one);
                }
                out
            }
        }
    }
}

/// Fully specified, draw-resolved objective evaluation against one model.
#[derive(Debug, Clone)]
pub struct ObjectiveEval<'a> {
    pub model: &'a Classifier,
    pub tap: LayerTap,
    pub variant: ObjectiveVariant,
    /// The fixed (mu, sigma) vectors of the normalization formula.
    pub stats: NormStats,
    /// Resolved draw; required when the variant uses RN.
    pub rn_draw: Option<RnDraw>,
    /// Compute attention from RN-applied clean features (default) or from the
    /// raw clean features.
    pub attention_from_rn: bool,
}

impl<'a> ObjectiveEval<'a> {
    pub fn new(model: &'a Classifier, kind: &ObjectiveKind, rn_draw: Option<RnDraw>) -> Self {
        ObjectiveEval {
            model,
            tap: kind.tap.clone(),
            variant: kind.variant,
            stats: model.preprocess,
            rn_draw,
            attention_from_rn: true,
        }
    }

    /// Objective value and its gradient with respect to `x_adv`.
    pub fn loss_and_grad(&self, x_adv: &Tensor4, x_clean: &Tensor4) -> Result<(f64, Tensor4)> {
        if self.variant.uses_rn() && self.rn_draw.is_none() {
            return Err(Error::InvalidParameter("RN variant requires a resolved draw".into()));
        }
        let (x_in_adv, x_in_clean) = match (&self.rn_draw, self.variant.uses_rn()) {
            (Some(draw), true) => (draw.apply(x_adv, &self.stats), draw.apply(x_clean, &self.stats)),
            _ => (x_adv.clone(), x_clean.clone()),
        };
        let f_clean = self.model.extract_features(&self.tap, &x_in_clean)?;
        let (f_adv, caches) = self.model.features_cached(&self.tap, &x_in_adv)?;

        let (loss, grad_f) = if self.variant.uses_da() {
            let a = if self.attention_from_rn || !self.variant.uses_rn() {
                attention_map(&f_clean)
            } else {
                let f_raw = self.model.extract_features(&self.tap, x_clean)?;
                attention_map(&f_raw)
            };
            attended_with_grad(&f_adv, &f_clean, &a)?
        } else {
            cosine_with_grad(&f_adv, &f_clean)?
        };

        let grad_in = self.model.grad_input_from_features(&self.tap, &caches, &grad_f)?;
        let grad_x_adv = match (&self.rn_draw, self.variant.uses_rn()) {
            (Some(draw), true) => draw.backward(&grad_in, &self.stats),
            _ => grad_in,
        };
        Ok((loss, grad_x_adv))
    }

    pub fn loss(&self, x_adv: &Tensor4, x_clean: &Tensor4) -> Result<f64> {
        self.loss_and_grad(x_adv, x_clean).map(|(l, _)| l)
    }
}

/// One full combined-objective evaluation: draw (or reuse) a pair, normalize
/// both batches, weight by attention from the normalized clean features, and
/// return the attended cosine value.
pub fn combined_loss(
    x_adv: &Tensor4,
    x_clean: &Tensor4,
    model: &Classifier,
    tap: &LayerTap,
    stats: &NormStats,
    rn: &mut RnParams,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (mu, sigma) = match rn.sample {
        Some(pair) => pair,
        None => {
            let pair = rn.draw(rng)?;
            rn.sample = Some(pair);
            pair
        }
    };
    let eval = ObjectiveEval {
        model,
        tap: tap.clone(),
        variant: ObjectiveVariant::BiaRnDa,
        stats: *stats,
        rn_draw: Some(RnDraw::Shared(mu, sigma)),
        attention_from_rn: true,
    };
    eval.loss(x_adv, x_clean)
}

/// Unweighted mean of the per-model objective values.
pub fn ensemble_loss(
    models: &[(&Classifier, LayerTap)],
    variant: ObjectiveVariant,
    rn_draw: Option<RnDraw>,
    x_adv: &Tensor4,
    x_clean: &Tensor4,
) -> Result<f64> {
    ensemble_with_grad_opts(models, variant, rn_draw, true, x_adv, x_clean).map(|(l, _)| l)
}

/// [`ensemble_loss`] plus the averaged gradient with respect to `x_adv`.
pub fn ensemble_with_grad(
    models: &[(&Classifier, LayerTap)],
    variant: ObjectiveVariant,
    rn_draw: Option<RnDraw>,
    x_adv: &Tensor4,
    x_clean: &Tensor4,
) -> Result<(f64, Tensor4)> {
    ensemble_with_grad_opts(models, variant, rn_draw, true, x_adv, x_clean)
}

/// Ensemble objective with the attention-source flag exposed.
pub fn ensemble_with_grad_opts(
    models: &[(&Classifier, LayerTap)],
    variant: ObjectiveVariant,
    rn_draw: Option<RnDraw>,
    attention_from_rn: bool,
    x_adv: &Tensor4,
    x_clean: &Tensor4,
) -> Result<(f64, Tensor4)> {
    if models.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut total = 0.0;
    let mut grad = Tensor4::zeros(x_adv.raw_dim());
    for (model, tap) in models {
        let eval = ObjectiveEval {
            model,
            tap: tap.clone(),
            variant,
            stats: model.preprocess,
            rn_draw: rn_draw.clone(),
            attention_from_rn,
        };
        let (loss, g) = eval.loss_and_grad(x_adv, x_clean)?;
        total += loss;
        grad += &g;
    }
    let k = models.len() as f64;
    grad.mapv_inplace(|v| v / k);
    Ok((total / k, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_everything;
    use ndarray::Array4;

    fn feat(values: &[f64], shape: (usize, usize, usize, usize)) -> Tensor4 {
        Array4::from_shape_vec(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_identities() {
        let f = feat(&[1.0, 2.0, -1.0, 0.5], (1, 4, 1, 1));
        assert!((cosine_feature_loss(&f, &f).unwrap() - 1.0).abs() < 1e-12);
        let neg = f.mapv(|v| -v);
        assert!((cosine_feature_loss(&neg, &f).unwrap() + 1.0).abs() < 1e-12);
        let a = feat(&[1.0, 0.0, 0.0, 0.0], (1, 4, 1, 1));
        let b = feat(&[0.0, 1.0, 0.0, 0.0], (1, 4, 1, 1));
        assert_eq!(cosine_feature_loss(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_positive_scale_invariance() {
        let f = feat(&[0.3, -0.7, 1.1, 0.05, 2.0, -0.4], (1, 6, 1, 1));
        for alpha in [0.1, 3.0, 100.0] {
            let scaled = f.mapv(|v| alpha * v);
            assert!((cosine_feature_loss(&scaled, &f).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_clean_feature_errors() {
        let f = feat(&[1.0, 2.0], (1, 2, 1, 1));
        let zero = Tensor4::zeros((1, 2, 1, 1));
        assert!(matches!(cosine_feature_loss(&f, &zero), Err(Error::DegenerateFeature(0))));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let f_clean = feat(&[0.4, -1.2, 0.8, 0.1, -0.5, 1.5], (2, 3, 1, 1));
        let f_adv = feat(&[1.0, 0.3, -0.2, 0.9, 0.4, -1.1], (2, 3, 1, 1));
        let (_, grad) = cosine_with_grad(&f_adv, &f_clean).unwrap();
        let eps = 1e-7;
        for idx in [(0, 0, 0, 0), (0, 2, 0, 0), (1, 1, 0, 0)] {
            let mut fp = f_adv.clone();
            fp[idx] += eps;
            let lp = cosine_feature_loss(&fp, &f_clean).unwrap();
            fp[idx] -= 2.0 * eps;
            let lm = cosine_feature_loss(&fp, &f_clean).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-6, "fd={fd} an={}", grad[idx]);
        }
    }

    #[test]
    fn rn_worked_example() {
        let stats = NormStats::imagenet();
        let x = Array4::from_elem((1, 3, 1, 1), 0.8);
        let out = rn_apply(&x, &stats, 0.4, 0.8);
        assert!((out[[0, 0, 0, 0]] - 0.5995).abs() < 1e-9);
    }

    #[test]
    fn rn_zero_numerator_gives_channel_means() {
        let stats = NormStats::imagenet();
        let x = Array4::from_elem((2, 3, 2, 2), 0.5);
        let out = rn_apply(&x, &stats, 0.5, 0.75);
        for c in 0..3 {
            assert!(out
                .slice(s![.., c, .., ..])
                .iter()
                .all(|&v| (v - stats.mean[c]).abs() < 1e-12));
        }
    }

    #[test]
    fn rn_identity_case() {
        let stats = NormStats { mean: [0.3; 3], std: [0.9; 3] };
        let x = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, i, j)| (c + i + j) as f64 / 10.0);
        let out = rn_apply(&x, &stats, 0.3, 0.9);
        let diff = (&out - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn rn_records_and_reuses_sample() {
        let stats = NormStats::imagenet();
        let mut rn = RnParams::default();
        let mut rng = seed_everything(3).stream("rn");
        let x = Array4::from_elem((1, 3, 2, 2), 0.6);
        let a = random_normalize(&x, &stats, &mut rn, &mut rng).unwrap();
        assert!(rn.sample.is_some());
        let b = random_normalize(&x, &stats, &mut rn, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sigma_guard_trips_on_hopeless_distribution() {
        let rn = RnParams { sigma_mean: -50.0, sigma_std: 0.001, ..Default::default() };
        let mut rng = seed_everything(4).stream("rn");
        assert!(matches!(rn.draw(&mut rng), Err(Error::SigmaGuard(_))));
    }

    #[test]
    fn attention_worked_example() {
        let f = feat(&[1.0, 2.0, 3.0, 4.0, -1.0, 2.0, 1.0, 0.0], (1, 2, 2, 2));
        let a = attention_map(&f);
        let expect = feat(&[0.0, 2.0, 2.0, 2.0], (1, 1, 2, 2));
        assert_eq!(a.values(), &expect);
    }

    #[test]
    fn attention_single_channel_is_abs() {
        let f = feat(&[-1.0, 0.5, 2.0, -0.25], (1, 1, 2, 2));
        let a = attention_map(&f);
        let expect = feat(&[1.0, 0.5, 2.0, 0.25], (1, 1, 2, 2));
        assert_eq!(a.values(), &expect);
    }

    #[test]
    fn attended_unit_weights_reduce_to_plain_cosine() {
        let f_clean = feat(&[0.4, -1.2, 0.8, 0.1, -0.5, 1.5, 0.2, 0.7], (1, 2, 2, 2));
        let f_adv = feat(&[1.0, 0.3, -0.2, 0.9, 0.4, -1.1, 0.6, -0.3], (1, 2, 2, 2));
        let ones = AttentionMap::from_values(Array4::ones((1, 1, 2, 2))).unwrap();
        let attended = attended_loss(&f_adv, &f_clean, &ones).unwrap();
        let plain = cosine_feature_loss(&f_adv, &f_clean).unwrap();
        assert!((attended - plain).abs() < 1e-12);
    }

    #[test]
    fn attended_antipodal_is_minus_one() {
        let f_clean = feat(&[0.4, -1.2, 0.8, 0.1], (1, 2, 1, 2));
        let f_adv = f_clean.mapv(|v| -v);
        let a = AttentionMap::from_values(feat(&[0.5, 2.0], (1, 1, 1, 2))).unwrap();
        assert!((attended_loss(&f_adv, &f_clean, &a).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn attended_single_pixel_support_is_columnwise_cosine() {
        // attention nonzero at exactly one location: the value equals the
        // cosine of the two channel vectors there.
        let f_clean = feat(&[1.0, 0.2, 2.0, -0.3], (1, 2, 1, 2));
        let f_adv = feat(&[0.5, 0.9, 1.0, 0.4], (1, 2, 1, 2));
        let a = AttentionMap::from_values(feat(&[1.0, 0.0], (1, 1, 1, 2))).unwrap();
        let got = attended_loss(&f_adv, &f_clean, &a).unwrap();
        let u: [f64; 2] = [0.5, 1.0];
        let v: [f64; 2] = [1.0, 2.0];
        let cos = (u[0] * v[0] + u[1] * v[1])
            / ((u[0] * u[0] + u[1] * u[1]).sqrt() * (v[0] * v[0] + v[1] * v[1]).sqrt());
        assert!((got - cos).abs() < 1e-12);
    }

    #[test]
    fn collapsed_attention_errors() {
        let f = feat(&[1.0, 2.0], (1, 2, 1, 1));
        let a = AttentionMap::from_values(Array4::zeros((1, 1, 1, 1))).unwrap();
        assert!(matches!(attended_loss(&f, &f, &a), Err(Error::AttentionCollapsed(0))));
    }

    #[test]
    fn draw_statistics_center_on_mu_mean() {
        let rn = RnParams::default();
        let mut rng = seed_everything(6).stream("rn-stats");
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += rn.draw(&mut rng).unwrap().0;
        }
        let mean = sum / n as f64;
        let stderr = 0.08 / (n as f64).sqrt();
        assert!((mean - 0.50).abs() < 4.0 * stderr, "mean {mean} too far from 0.50");
    }
}
