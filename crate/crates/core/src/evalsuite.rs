//! Transferability evaluation, ablation sweeps, block visualization and
//! multi-seed statistics.

use crate::baselines::{
    dim_attack, dr_attack, gaussian_noise_with_std, gaussian_smooth, pgd_attack, ssp_attack,
    IterConfig,
};
use crate::data::{to_batch, DatasetHandle};
use crate::error::{Error, Result};
use crate::generator::{build_generator, project, AttackBudget, Generator, GeneratorSpec};
use crate::models::{Classifier, LayerTap};
use crate::nn::Tensor4;
use crate::objectives::{attention_map, ObjectiveKind, ObjectiveVariant, RnParams};
use crate::rng::seed_everything;
use crate::training::{train_generator, TrainConfig};
use ndarray::s;
use std::path::{Path, PathBuf};

/// One evaluation cell: an attack applied to one target model on one dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalRow {
    pub attack_id: String,
    pub source_arch: String,
    pub target_model: String,
    pub dataset: String,
    pub clean_top1: f64,
    pub attacked_top1: f64,
    /// Fraction of test items whose prediction changed under attack.
    pub flip_rate: f64,
    pub seed: u64,
}

/// Mean and sample standard deviation across the seeds of one cell group.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub attack_id: String,
    pub source_arch: String,
    pub target_model: String,
    pub dataset: String,
    pub mean_clean_top1: f64,
    pub mean_attacked_top1: f64,
    /// Absent (not zero) when only one seed contributed.
    pub std_attacked_top1: Option<f64>,
    pub seeds: usize,
}

impl Aggregate {
    /// Table-layout string, e.g. `52.70±0.42`.
    pub fn attacked_pm(&self) -> String {
        format_pm(self.mean_attacked_top1, self.std_attacked_top1)
    }
}

/// `mean±std` with two decimals; bare mean when std is absent.
pub fn format_pm(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.2}\u{b1}{s:.2}"),
        None => format!("{mean:.2}"),
    }
}

/// Rows plus per-group aggregates, recomputable from the rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut groups: Vec<(String, String, String, String)> = Vec::new();
        for r in &rows {
            let key = (
                r.attack_id.clone(),
                r.source_arch.clone(),
                r.target_model.clone(),
                r.dataset.clone(),
            );
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        let aggregates = groups
            .into_iter()
            .map(|(attack_id, source_arch, target_model, dataset)| {
                let members: Vec<&EvalRow> = rows
                    .iter()
                    .filter(|r| {
                        r.attack_id == attack_id
                            && r.source_arch == source_arch
                            && r.target_model == target_model
                            && r.dataset == dataset
                    })
                    .collect();
                let n = members.len();
                let mean = |f: fn(&EvalRow) -> f64| {
                    members.iter().map(|r| f(r)).sum::<f64>() / n as f64
                };
                let mean_attacked = mean(|r| r.attacked_top1);
                let std_attacked = if n >= 2 {
                    let ss = members
                        .iter()
                        .map(|r| (r.attacked_top1 - mean_attacked).powi(2))
                        .sum::<f64>();
                    Some((ss / (n - 1) as f64).sqrt())
                } else {
                    None
                };
                Aggregate {
                    attack_id,
                    source_arch,
                    target_model,
                    dataset,
                    mean_clean_top1: mean(|r| r.clean_top1),
                    mean_attacked_top1: mean_attacked,
                    std_attacked_top1: std_attacked,
                    seeds: n,
                }
            })
            .collect();
        EvalReport { rows, aggregates }
    }

    pub fn merged(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        let rows = reports.into_iter().flat_map(|r| r.rows).collect();
        EvalReport::from_rows(rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "attack_id,source_arch,target_model,dataset,clean_top1,attacked_top1,flip_rate,seed\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.attack_id,
                r.source_arch,
                r.target_model,
                r.dataset,
                r.clean_top1,
                r.attacked_top1,
                r.flip_rate,
                r.seed
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }

    /// Mean attacked top-1 over all rows (sweep cell summary).
    pub fn mean_attacked(&self) -> f64 {
        self.rows.iter().map(|r| r.attacked_top1).sum::<f64>() / self.rows.len() as f64
    }

    pub fn aggregate_for(&self, attack_id: &str, target_model: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.attack_id == attack_id && a.target_model == target_model)
    }
}

/// An attack addressable by the evaluation loop.
pub enum Attack<'a> {
    /// Returns the clean image; the control row.
    Identity,
    /// Trained generator; `smooth` post-processes with the 3x3 Gaussian
    /// before projection.
    Generator { generator: &'a Generator, source_arch: String, smooth: bool },
    Pgd { model: &'a Classifier, cfg: IterConfig },
    Dim { model: &'a Classifier, cfg: IterConfig },
    Dr { model: &'a Classifier, tap: LayerTap, cfg: IterConfig },
    Ssp { model: &'a Classifier, tap: LayerTap, cfg: IterConfig },
    /// Gaussian noise at `std_frac * epsilon` per-pixel standard deviation.
    Noise { std_frac: f64 },
}

impl<'a> Attack<'a> {
    pub fn id(&self) -> &'static str {
        match self {
            Attack::Identity => "identity",
            Attack::Generator { smooth: false, .. } => "gen",
            Attack::Generator { smooth: true, .. } => "gs",
            Attack::Pgd { .. } => "pgd",
            Attack::Dim { .. } => "dim",
            Attack::Dr { .. } => "dr",
            Attack::Ssp { .. } => "ssp",
            Attack::Noise { .. } => "noise",
        }
    }

    pub fn source_arch(&self) -> String {
        match self {
            Attack::Identity | Attack::Noise { .. } => "none".into(),
            Attack::Generator { source_arch, .. } => source_arch.clone(),
            Attack::Pgd { model, .. } | Attack::Dim { model, .. } => model.arch_id.clone(),
            Attack::Dr { model, .. } | Attack::Ssp { model, .. } => model.arch_id.clone(),
        }
    }

    /// Craft the adversarial batch for `x` within `budget`.
    pub fn apply(
        &self,
        x: &Tensor4,
        labels: &[usize],
        budget: &AttackBudget,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Tensor4> {
        match self {
            Attack::Identity => Ok(x.clone()),
            Attack::Generator { generator, smooth, .. } => {
                let candidate = generator.generate_any_size(x)?;
                let candidate = if *smooth { gaussian_smooth(&candidate) } else { candidate };
                project(&candidate, x, budget.epsilon)
            }
            Attack::Pgd { model, cfg } => pgd_attack(model, x, labels, cfg, rng),
            Attack::Dim { model, cfg } => dim_attack(model, x, labels, cfg, rng),
            Attack::Dr { model, tap, cfg } => dr_attack(model, tap, x, cfg),
            Attack::Ssp { model, tap, cfg } => ssp_attack(model, tap, x, cfg, rng),
            Attack::Noise { std_frac } => {
                gaussian_noise_with_std(x, budget, std_frac * budget.epsilon, rng)
            }
        }
    }
}

/// Independent recheck that an adversarial batch stays inside the ball and
/// the pixel range.
pub fn audit_epsilon(x_adv: &Tensor4, x: &Tensor4, epsilon: f64) -> Result<()> {
    let linf = (x_adv - x).iter().map(|v| v.abs()).fold(0.0, f64::max);
    if linf > epsilon + 1e-6 {
        return Err(Error::AuditFailed(format!("l_inf {linf} exceeds epsilon {epsilon}")));
    }
    if x_adv.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::AuditFailed("pixel outside [0,1]".into()));
    }
    Ok(())
}

/// Attack every target's full test split and report clean / attacked top-1
/// accuracy. Every crafted batch is epsilon-audited before scoring.
pub fn evaluate_attack(
    attack: &Attack<'_>,
    targets: &[(&Classifier, &DatasetHandle)],
    budget: &AttackBudget,
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    let hub = seed_everything(seed);
    let mut rows = Vec::new();
    for (cell, (model, handle)) in targets.iter().enumerate() {
        if model.class_count != handle.class_count {
            return Err(Error::InvalidParameter(format!(
                "target {} expects {} classes but dataset {} has {}",
                model.arch_id, model.class_count, handle.name, handle.class_count
            )));
        }
        let mut rng = hub.stream_indexed("eval-cell", cell as u64);
        let mut clean_correct = 0usize;
        let mut attacked_correct = 0usize;
        let mut flipped = 0usize;
        for indices in handle.sequential_batches(batch_size) {
            let (x, labels) = to_batch(handle, &indices)?;
            let x_adv = attack.apply(&x, &labels, budget, &mut rng)?;
            audit_epsilon(&x_adv, &x, budget.epsilon)?;
            let clean_preds = model.predict(&x)?;
            let adv_preds = model.predict(&x_adv)?;
            for ((cp, ap), label) in clean_preds.iter().zip(adv_preds.iter()).zip(labels.iter()) {
                clean_correct += (cp == label) as usize;
                attacked_correct += (ap == label) as usize;
                flipped += (cp != ap) as usize;
            }
        }
        let n = handle.len() as f64;
        rows.push(EvalRow {
            attack_id: attack.id().to_string(),
            source_arch: attack.source_arch(),
            target_model: model.arch_id.clone(),
            dataset: handle.name.clone(),
            clean_top1: 100.0 * clean_correct as f64 / n,
            attacked_top1: 100.0 * attacked_correct as f64 / n,
            flip_rate: flipped as f64 / n,
            seed,
        });
    }
    Ok(EvalReport::from_rows(rows))
}

/// Train one generator per tap under identical seeds and compare transfer.
pub fn layer_sweep(
    spec: GeneratorSpec,
    substitute: &Classifier,
    taps: &[LayerTap],
    source: &DatasetHandle,
    targets: &[(&Classifier, &DatasetHandle)],
    cfg: &TrainConfig,
) -> Result<Vec<(LayerTap, EvalReport)>> {
    if taps.is_empty() {
        return Err(Error::InvalidParameter("layer sweep needs at least one tap".into()));
    }
    let mut out = Vec::new();
    for tap in taps {
        let mut cell_cfg = cfg.clone();
        cell_cfg.objective.tap = tap.clone();
        let mut generator =
            build_generator(spec, &mut seed_everything(cfg.seed).stream("gen-init"))?;
        train_generator(&mut generator, &[(substitute, tap.clone())], source, &cell_cfg)?;
        let attack = Attack::Generator {
            generator: &generator,
            source_arch: substitute.arch_id.clone(),
            smooth: false,
        };
        let report = evaluate_attack(&attack, targets, &cfg.budget, cfg.seed, 64)?;
        out.push((tap.clone(), report));
    }
    Ok(out)
}

/// Axis definitions for the normalization-parameter sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepGrid {
    pub mu_means: Vec<f64>,
    pub sigma_means: Vec<f64>,
}

impl SweepGrid {
    /// The published three-by-three grid: 0.25 to 0.75 at granularity 0.25.
    pub fn standard() -> Self {
        SweepGrid { mu_means: vec![0.25, 0.50, 0.75], sigma_means: vec![0.25, 0.50, 0.75] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_means.is_empty() || self.sigma_means.is_empty() {
            return Err(Error::InvalidParameter("sweep grid axes must be non-empty".into()));
        }
        Ok(())
    }
}

/// Heatmap over (mu_mean, sigma_mean): per-cell average attacked top-1 plus
/// the underlying reports, row-major.
#[derive(Debug, Clone)]
pub struct HeatmapTable {
    pub grid: SweepGrid,
    /// cells[i][j] pairs mu_means[i] with sigma_means[j].
    pub cells: Vec<Vec<f64>>,
    pub reports: Vec<Vec<EvalReport>>,
}

impl HeatmapTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu_mean\\sigma_mean");
        for s in &self.grid.sigma_means {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
        for (i, mu) in self.grid.mu_means.iter().enumerate() {
            out.push_str(&mu.to_string());
            for j in 0..self.grid.sigma_means.len() {
                out.push_str(&format!(",{}", self.cells[i][j]));
            }
            out.push('\n');
        }
        out
    }
}

/// Sweep the normalization Gaussians' means; the standard deviations stay at
/// their 0.08 default.
#[allow(clippy::too_many_arguments)]
pub fn rn_param_sweep(
    grid: &SweepGrid,
    spec: GeneratorSpec,
    substitute: &Classifier,
    source: &DatasetHandle,
    targets: &[(&Classifier, &DatasetHandle)],
    cfg: &TrainConfig,
) -> Result<HeatmapTable> {
    grid.validate()?;
    let mut cells = Vec::new();
    let mut reports = Vec::new();
    for &mu_mean in &grid.mu_means {
        let mut row = Vec::new();
        let mut row_reports = Vec::new();
        for &sigma_mean in &grid.sigma_means {
            let mut cell_cfg = cfg.clone();
            cell_cfg.objective.variant = ObjectiveVariant::BiaRn;
            cell_cfg.objective.rn = Some(RnParams::with_means(mu_mean, sigma_mean));
            let mut generator =
                build_generator(spec, &mut seed_everything(cfg.seed).stream("gen-init"))?;
            train_generator(
                &mut generator,
                &[(substitute, cell_cfg.objective.tap.clone())],
                source,
                &cell_cfg,
            )?;
            let attack = Attack::Generator {
                generator: &generator,
                source_arch: substitute.arch_id.clone(),
                smooth: false,
            };
            let report = evaluate_attack(&attack, targets, &cfg.budget, cfg.seed, 64)?;
            row.push(report.mean_attacked());
            row_reports.push(report);
        }
        cells.push(row);
        reports.push(row_reports);
    }
    Ok(HeatmapTable { grid: grid.clone(), cells, reports })
}

/// Run `run_one` per seed and merge rows into one multi-seed report.
pub fn multi_seed<F>(seeds: &[u64], mut run_one: F) -> Result<EvalReport>
where
    F: FnMut(u64) -> Result<EvalReport>,
{
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("multi_seed needs at least one seed".into()));
    }
    let mut reports = Vec::new();
    for &seed in seeds {
        reports.push(run_one(seed)?);
    }
    Ok(EvalReport::merged(reports))
}

/// Binary map marking where generator `a`'s pooled downsampling activation
/// exceeds generator `b`'s: 1.0 where `A_a - A_b > 0`, else 0.0.
pub fn block_diff_map(a: &Generator, b: &Generator, x: &Tensor4) -> Result<Tensor4> {
    if a.spec != b.spec {
        return Err(Error::ShapeMismatch(format!(
            "generator specs differ: {:?} vs {:?}",
            a.spec, b.spec
        )));
    }
    let pooled_a = attention_map(&a.tap_block("down", x)?);
    let pooled_b = attention_map(&b.tap_block("down", x)?);
    let mut diff = pooled_a.values().clone();
    diff.zip_mut_with(pooled_b.values(), |d, &bv| *d = if *d - bv > 0.0 { 1.0 } else { 0.0 });
    Ok(diff)
}

/// Write one grayscale image per generator block: channel-pooled activation,
/// min-max scaled to 8 bits. Returns the written paths.
pub fn visualize_blocks(generator: &Generator, x: &Tensor4, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for block in generator.block_ids() {
        let act = generator.tap_block(&block, x)?;
        let pooled = attention_map(&act);
        let plane = pooled.values().slice(s![0, 0, .., ..]).to_owned();
        let (h, w) = plane.dim();
        let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let img = image::GrayImage::from_fn(w as u32, h as u32, |px, py| {
            let v = plane[[py as usize, px as usize]];
            let scaled = if max > min { (v - min) / (max - min) * 255.0 } else { 128.0 };
            image::Luma([scaled.round() as u8])
        });
        let path = out_dir.join(format!("{block}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Train the three comparison arms (plain, augmented, random-normalized)
/// under matched seeds and evaluate each on the same targets.
pub fn augmentation_comparison(
    spec: GeneratorSpec,
    substitute: &Classifier,
    source: &DatasetHandle,
    targets: &[(&Classifier, &DatasetHandle)],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let arms: [(&str, ObjectiveVariant, bool); 3] = [
        ("bia", ObjectiveVariant::Bia, false),
        ("bia_aug", ObjectiveVariant::Bia, true),
        ("bia_rn", ObjectiveVariant::BiaRn, false),
    ];
    let mut reports = Vec::new();
    for (arm_id, variant, augmented) in arms {
        let mut arm_cfg = cfg.clone();
        arm_cfg.objective = ObjectiveKind::new(variant, cfg.objective.tap.clone());
        arm_cfg.augment = if augmented {
            crate::data::AugmentPolicy::standard()
        } else {
            crate::data::AugmentPolicy::disabled()
        };
        let mut generator =
            build_generator(spec, &mut seed_everything(cfg.seed).stream("gen-init"))?;
        train_generator(
            &mut generator,
            &[(substitute, arm_cfg.objective.tap.clone())],
            source,
            &arm_cfg,
        )?;
        let attack = Attack::Generator {
            generator: &generator,
            source_arch: substitute.arch_id.clone(),
            smooth: false,
        };
        let mut report = evaluate_attack(&attack, targets, &cfg.budget, cfg.seed, 64)?;
        for row in &mut report.rows {
            row.attack_id = arm_id.to_string();
        }
        reports.push(EvalReport::from_rows(report.rows));
    }
    Ok(EvalReport::merged(reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSpec, NormStats, Split, SynthFamily};
    use crate::models::build_classifier;
    use ndarray::Array4;

    fn dataset(size: usize, family: SynthFamily) -> DatasetHandle {
        load_dataset(&DatasetSpec::Synthetic {
            family,
            split: Split::Test,
            size,
            resolution: 16,
            seed: 1,
        })
        .unwrap()
    }

    fn model(seed: u64) -> Classifier {
        build_classifier("smallconv", 10, (16, 16), NormStats::coarse(), &mut seed_everything(seed).stream("init"))
            .unwrap()
    }

    #[test]
    fn identity_attack_reproduces_clean_accuracy() {
        let m = model(1);
        let data = dataset(40, SynthFamily::Shapes);
        let budget = AttackBudget::from_8bit(10).unwrap();
        let report = evaluate_attack(&Attack::Identity, &[(&m, &data)], &budget, 7, 16).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].clean_top1, report.rows[0].attacked_top1);
        assert_eq!(report.rows[0].flip_rate, 0.0);
    }

    #[test]
    fn mismatched_class_counts_error() {
        let mut rng = seed_everything(2).stream("init");
        let m = build_classifier("smallconv", 4, (16, 16), NormStats::coarse(), &mut rng).unwrap();
        let data = dataset(10, SynthFamily::Shapes);
        let budget = AttackBudget::from_8bit(10).unwrap();
        assert!(evaluate_attack(&Attack::Identity, &[(&m, &data)], &budget, 7, 16).is_err());
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows = vec![
            EvalRow {
                attack_id: "gen".into(),
                source_arch: "smallconv".into(),
                target_model: "smallres".into(),
                dataset: "digits-test".into(),
                clean_top1: 90.0,
                attacked_top1: 57.16,
                flip_rate: 0.4,
                seed: 1,
            },
            EvalRow {
                attack_id: "gen".into(),
                source_arch: "smallconv".into(),
                target_model: "smallres".into(),
                dataset: "digits-test".into(),
                clean_top1: 90.0,
                attacked_top1: 52.70,
                flip_rate: 0.45,
                seed: 2,
            },
        ];
        let report = EvalReport::from_rows(rows);
        let agg = &report.aggregates[0];
        assert!((agg.mean_attacked_top1 - 54.93).abs() < 1e-9);
        let expect_std = ((57.16f64 - 54.93).powi(2) + (52.70f64 - 54.93).powi(2)).sqrt();
        assert!((agg.std_attacked_top1.unwrap() - expect_std).abs() < 1e-9);
        assert_eq!(agg.seeds, 2);
    }

    #[test]
    fn duplicate_seeds_give_zero_std() {
        let budget = AttackBudget::from_8bit(10).unwrap();
        let m = model(3);
        let data = dataset(20, SynthFamily::Digits);
        let report = multi_seed(&[1, 1], |seed| {
            evaluate_attack(&Attack::Identity, &[(&m, &data)], &budget, seed, 16)
        })
        .unwrap();
        assert_eq!(report.aggregates[0].std_attacked_top1, Some(0.0));
    }

    #[test]
    fn single_seed_reports_absent_std() {
        let budget = AttackBudget::from_8bit(10).unwrap();
        let m = model(4);
        let data = dataset(20, SynthFamily::Digits);
        let report = multi_seed(&[5], |seed| {
            evaluate_attack(&Attack::Identity, &[(&m, &data)], &budget, seed, 16)
        })
        .unwrap();
        assert_eq!(report.aggregates[0].std_attacked_top1, None);
        assert!(!report.aggregates[0].attacked_pm().contains('\u{b1}'));
    }

    #[test]
    fn pm_layout_matches_published_style() {
        assert_eq!(format_pm(52.7012, Some(0.4249)), "52.70\u{b1}0.42");
    }

    #[test]
    fn diff_map_is_binary_and_zero_for_identical_generators() {
        let spec = GeneratorSpec { down_blocks: 1, residual_blocks: 1, up_blocks: 1, base_channels: 4 };
        let ga = build_generator(spec, &mut seed_everything(5).stream("gen-init")).unwrap();
        let gb = ga.clone();
        let x = Array4::from_elem((1, 3, 16, 16), 0.3);
        let diff = block_diff_map(&ga, &gb, &x).unwrap();
        assert!(diff.iter().all(|&v| v == 0.0));

        let gc = build_generator(spec, &mut seed_everything(6).stream("gen-init")).unwrap();
        let diff = block_diff_map(&ga, &gc, &x).unwrap();
        assert!(diff.iter().all(|&v| v == 0.0 || v == 1.0));

        let other_spec = GeneratorSpec { base_channels: 8, ..spec };
        let gd = build_generator(other_spec, &mut seed_everything(7).stream("gen-init")).unwrap();
        assert!(block_diff_map(&ga, &gd, &x).is_err());
    }

    #[test]
    fn diff_map_worked_example() {
        // elementwise comparison oracle on a mixed 2x2 case
        let a = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 2.0, 2.0]).unwrap();
        let b = Array4::from_shape_vec((1, 1, 2, 2), vec![0.0, 1.0, 2.0, 1.0]).unwrap();
        let mut diff = a.clone();
        diff.zip_mut_with(&b, |d, &bv| *d = if *d - bv > 0.0 { 1.0 } else { 0.0 });
        let expect = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(diff, expect);
    }

    #[test]
    fn visualize_writes_one_image_per_block() {
        let dir = std::env::temp_dir().join(format!("bia-viz-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = GeneratorSpec { down_blocks: 1, residual_blocks: 2, up_blocks: 1, base_channels: 4 };
        let g = build_generator(spec, &mut seed_everything(8).stream("gen-init")).unwrap();
        let x = Array4::from_shape_fn((1, 3, 16, 16), |(_, c, i, j)| {
            ((c * 29 + i * 5 + j) % 13) as f64 / 13.0
        });
        let paths = visualize_blocks(&g, &x, &dir).unwrap();
        // 1 down + 2 residual + 1 up
        assert_eq!(paths.len(), 4);
        for p in &paths {
            assert!(p.exists());
        }
        let _ = std::fs::remove_dir_all(&dir);
    }
}
