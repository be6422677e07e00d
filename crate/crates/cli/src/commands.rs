//! Command implementations: train, attack, eval, sweep, viz.

use crate::config::{ConfigError, RunConfig};
use bia_core::baselines::IterConfig;
use bia_core::checkpoint::{load_classifier, save_classifier};
use bia_core::data::{
    load_dataset, AugmentPolicy, DatasetHandle, DatasetSpec, NormStats, Split, SynthFamily,
};
use bia_core::evalsuite::{
    evaluate_attack, layer_sweep, multi_seed, rn_param_sweep, visualize_blocks, Attack, EvalReport,
    SweepGrid,
};
use bia_core::generator::{build_generator, AttackBudget, Generator, GeneratorSpec};
use bia_core::models::{build_classifier, train_classifier, Classifier, LayerTap};
use bia_core::objectives::{ObjectiveKind, ObjectiveVariant, RnParams};
use bia_core::rng::seed_everything;
use bia_core::training::{load_checkpoint, save_checkpoint, train_generator, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Command failure, split by exit class: configuration problems exit 2,
/// runtime problems exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<bia_core::Error> for CliError {
    fn from(e: bia_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub type CmdResult = Result<(), CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Materialize one split of a dataset descriptor (`shapes`, `digits`, or a
/// directory path).
fn load_split(cfg: &RunConfig, desc: &str, split: Split) -> Result<DatasetHandle, CliError> {
    let size = match split {
        Split::Train => cfg.get_usize("data.train_size")?,
        Split::Test => cfg.get_usize("data.test_size")?,
    };
    let spec = match SynthFamily::parse(desc) {
        Some(family) => DatasetSpec::Synthetic {
            family,
            split,
            size,
            resolution: cfg.get_usize("data.resolution")?,
            seed: cfg.get_u64("data.seed")?,
        },
        None => DatasetSpec::Folder { root: PathBuf::from(desc), split, resize: None },
    };
    Ok(load_dataset(&spec)?)
}

fn preprocess_stats(name: &str) -> Result<NormStats, CliError> {
    match name {
        "imagenet" => Ok(NormStats::imagenet()),
        "coarse" => Ok(NormStats::coarse()),
        other => Err(CliError::Config(format!(
            "unknown preprocess `{other}` (expected imagenet or coarse)"
        ))),
    }
}

fn generator_spec(cfg: &RunConfig) -> Result<GeneratorSpec, CliError> {
    Ok(GeneratorSpec {
        down_blocks: cfg.get_usize("generator.down_blocks")?,
        residual_blocks: cfg.get_usize("generator.residual_blocks")?,
        up_blocks: cfg.get_usize("generator.up_blocks")?,
        base_channels: cfg.get_usize("generator.base_channels")?,
    })
}

fn objective_kind(cfg: &RunConfig) -> Result<ObjectiveKind, CliError> {
    let variant = ObjectiveVariant::parse(cfg.get("objective.variant")).ok_or_else(|| {
        CliError::Config(format!("unknown objective variant `{}`", cfg.get("objective.variant")))
    })?;
    let tap = LayerTap::new(cfg.get("objective.tap"));
    let rn = variant.uses_rn().then(|| RnParams {
        mu_mean: cfg.get_f64("objective.mu_mean").unwrap_or(0.5),
        mu_std: cfg.get_f64("objective.mu_std").unwrap_or(0.08),
        sigma_mean: cfg.get_f64("objective.sigma_mean").unwrap_or(0.75),
        sigma_std: cfg.get_f64("objective.sigma_std").unwrap_or(0.08),
        sample: None,
    });
    Ok(ObjectiveKind { variant, tap, rn })
}

fn augment_policy(cfg: &RunConfig) -> Result<AugmentPolicy, CliError> {
    Ok(AugmentPolicy {
        enabled: cfg.get_bool("data.augment")?,
        crop_scale_range: (cfg.get_f64("data.crop_low")?, cfg.get_f64("data.crop_high")?),
        horizontal_flip_prob: cfg.get_f64("data.flip_prob")?,
        jitter_strength: cfg.get_f64("data.jitter")?,
    })
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let budget = AttackBudget::from_8bit(cfg.get_u32("train.epsilon")?)?;
    let mut tc = TrainConfig::new(objective_kind(cfg)?, budget, cfg.get_u64("train.seed")?);
    tc.lr = cfg.get_f64("train.lr")?;
    tc.moment_decays = (cfg.get_f64("train.beta1")?, cfg.get_f64("train.beta2")?);
    tc.batch_size = cfg.get_usize("train.batch_size")?;
    tc.epochs = cfg.get_usize("train.epochs")?;
    tc.augment = augment_policy(cfg)?;
    tc.rn_per_image = cfg.get_bool("objective.rn_per_image")?;
    tc.attention_from_rn = cfg.get_bool("objective.attention_from_rn")?;
    tc.grad_clip = cfg.get_f64("train.grad_clip")?;
    Ok(tc)
}

/// Build or load the substitute classifier(s). The first entry is the primary
/// substitute; any `model.ensemble` architectures follow, trained on the same
/// source domain.
fn substitutes(cfg: &RunConfig, quiet: bool) -> Result<Vec<Classifier>, CliError> {
    let ckpt = cfg.get("model.checkpoint");
    let mut models = Vec::new();
    if !ckpt.is_empty() {
        models.push(load_classifier(Path::new(ckpt))?);
    } else {
        let train = load_split(cfg, cfg.get("data.train"), Split::Train)?;
        let test = load_split(cfg, cfg.get("data.test"), Split::Test)?;
        let stats = preprocess_stats(cfg.get("model.preprocess"))?;
        let res = (train.resolution.0, train.resolution.1);
        let hub = seed_everything(cfg.get_u64("data.seed")?);
        let mut archs = vec![cfg.get("model.arch").to_string()];
        archs.extend(cfg.get_list("model.ensemble"));
        for arch in archs {
            let mut rng = hub.stream(&format!("substitute-init/{arch}"));
            let mut model = build_classifier(&arch, train.class_count, res, stats, &mut rng)?;
            let acc = train_classifier(
                &mut model,
                &train,
                &test,
                cfg.get_usize("model.epochs")?,
                cfg.get_f64("model.lr")?,
                &hub,
            )?;
            if !quiet {
                println!("substitute {arch}: clean top-1 {acc:.2}% on {}", test.name);
            }
            models.push(model);
        }
        let save = cfg.get("model.save");
        if !save.is_empty() {
            save_classifier(&models[0], Path::new(save), hub.seed())?;
        }
    }
    Ok(models)
}

fn write_sidecar_log(out: &Path, what: &str) -> Result<(), CliError> {
    let log = out.join("run.log");
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default();
    let line = format!("{stamp} {what}\n");
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .map_err(|e| io_err(&log, e))?;
    f.write_all(line.as_bytes()).map_err(|e| io_err(&log, e))?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig, out: &Path, what: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let resolved = out.join("config.resolved");
    std::fs::write(&resolved, cfg.to_document()).map_err(|e| io_err(&resolved, e))?;
    write_sidecar_log(out, what)
}

/// Train the generator: writes `generator.biaf` and `loss.csv` under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CmdResult {
    prepare_out(cfg, out, "train")?;
    let models = substitutes(cfg, false)?;
    let source = load_split(cfg, cfg.get("data.train"), Split::Train)?;
    let tc = train_config(cfg)?;
    let spec = generator_spec(cfg)?;
    let hub = seed_everything(tc.seed);
    let mut generator = build_generator(spec, &mut hub.stream("gen-init"))?;
    let pairs: Vec<(&Classifier, LayerTap)> =
        models.iter().map(|m| (m, tc.objective.tap.clone())).collect();
    let trace = train_generator(&mut generator, &pairs, &source, &tc)?;

    let trace_path = out.join("loss.csv");
    trace.write_csv(&trace_path)?;
    let ckpt_path = out.join("generator.biaf");
    let metadata = vec![
        ("objective".to_string(), tc.objective.variant.as_str().to_string()),
        ("source_arch".to_string(), models[0].arch_id.clone()),
        ("tap".to_string(), tc.objective.tap.layer_id.clone()),
        ("seed".to_string(), tc.seed.to_string()),
    ];
    save_checkpoint(&generator, &ckpt_path, &metadata)?;
    let first = trace.mean_over(0..trace.0.len().min(20));
    let last_start = trace.0.len().saturating_sub(20);
    let last = trace.mean_over(last_start..trace.0.len());
    println!(
        "trained {} for {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        tc.objective.variant.as_str(),
        trace.0.len(),
        first,
        last,
        ckpt_path.display()
    );
    Ok(())
}

/// Craft adversarial images for every image in a directory.
pub fn cmd_attack(checkpoint: &Path, input: &Path, out: &Path, epsilon_8bit: u32) -> CmdResult {
    let (generator, _meta) = load_checkpoint(checkpoint)?;
    let budget = AttackBudget::from_8bit(epsilon_8bit)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| io_err(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(format!("no images in {}", input.display())));
    }
    let mut written = 0usize;
    let mut failed = 0usize;
    for file in &files {
        match attack_one(&generator, file, out, &budget) {
            Ok(()) => written += 1,
            Err(e) => {
                failed += 1;
                eprintln!("skipping {}: {e}", file.display());
            }
        }
    }
    println!("wrote {written} adversarial images to {} ({failed} failed audit)", out.display());
    if written == 0 {
        return Err(CliError::Runtime("every input failed".into()));
    }
    Ok(())
}

fn attack_one(
    generator: &Generator,
    file: &Path,
    out: &Path,
    budget: &AttackBudget,
) -> Result<(), CliError> {
    let img = image::open(file)
        .map_err(|e| CliError::Runtime(format!("decode {}: {e}", file.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut x = ndarray::Array4::zeros((1, 3, h, w));
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                x[[0, c, i, j]] = px[c] as f64 / 255.0;
            }
        }
    }
    let candidate = generator.generate_any_size(&x)?;
    let x_adv = bia_core::generator::project(&candidate, &x, budget.epsilon)?;
    bia_core::evalsuite::audit_epsilon(&x_adv, &x, budget.epsilon)?;
    // Quantize inside the integer ball so the 8-bit file still satisfies the
    // budget exactly.
    let eps8 = budget.epsilon_8bit as i32;
    let out_img = image::RgbImage::from_fn(w as u32, h as u32, |jj, ii| {
        let mut px = [0u8; 3];
        for c in 0..3 {
            let orig = img.get_pixel(jj, ii)[c] as i32;
            let q = (x_adv[[0, c, ii as usize, jj as usize]] * 255.0).round() as i32;
            px[c] = q.clamp(orig - eps8, orig + eps8).clamp(0, 255) as u8;
        }
        image::Rgb(px)
    });
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let name = match file.extension().and_then(|e| e.to_str()) {
        Some("png") => format!("{stem}.png"),
        _ => format!("{stem}.png"),
    };
    let dst = out.join(name);
    out_img.save(&dst).map_err(|e| CliError::Runtime(format!("write {}: {e}", dst.display())))?;
    Ok(())
}

/// One `(classifier, dataset)` pair per `eval.targets` entry.
struct TargetSet {
    models: Vec<Classifier>,
    datasets: Vec<DatasetHandle>,
}

impl TargetSet {
    fn pairs(&self) -> Vec<(&Classifier, &DatasetHandle)> {
        self.models.iter().zip(self.datasets.iter()).collect()
    }
}

fn build_targets(cfg: &RunConfig) -> Result<TargetSet, CliError> {
    let descs = cfg.get("eval.targets");
    if descs.is_empty() {
        return Err(CliError::Config("eval.targets must not be empty".into()));
    }
    let mut models = Vec::new();
    let mut datasets = Vec::new();
    let hub = seed_everything(cfg.get_u64("data.seed")?);
    for (idx, entry) in descs.split(';').enumerate() {
        let parts: Vec<&str> = entry.trim().split('@').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(CliError::Config(format!(
                "eval target `{entry}` must be arch@dataset[@checkpoint]"
            )));
        }
        let (arch, dataset) = (parts[0], parts[1]);
        let test = load_split(cfg, dataset, Split::Test)?;
        let model = if parts.len() == 3 {
            load_classifier(Path::new(parts[2]))?
        } else {
            let train = load_split(cfg, dataset, Split::Train)?;
            let stats = preprocess_stats(cfg.get("eval.target_preprocess"))?;
            let mut rng = hub.stream_indexed("target-init", idx as u64);
            let mut model =
                build_classifier(arch, train.class_count, train.resolution, stats, &mut rng)?;
            let acc = train_classifier(
                &mut model,
                &train,
                &test,
                cfg.get_usize("eval.target_epochs")?,
                cfg.get_f64("eval.target_lr")?,
                &hub,
            )?;
            println!("target {arch}@{dataset}: clean top-1 {acc:.2}%");
            model
        };
        models.push(model);
        datasets.push(test);
    }
    Ok(TargetSet { models, datasets })
}

fn iter_config(cfg: &RunConfig, budget: AttackBudget) -> Result<IterConfig, CliError> {
    Ok(IterConfig {
        budget,
        step_8bit: cfg.get_f64("eval.step_8bit")?,
        iterations: cfg.get_usize("eval.iterations")?,
        momentum_decay: cfg.get_f64("eval.momentum")?,
        transform_prob: cfg.get_f64("eval.transform_prob")?,
        random_start: true,
    })
}

fn report_lines(report: &EvalReport) -> String {
    let mut out = String::new();
    for agg in &report.aggregates {
        let _ = writeln!(
            out,
            "{:>9} {:>10} -> {:>10} on {:<12} clean {:>6.2}  attacked {}",
            agg.attack_id,
            agg.source_arch,
            agg.target_model,
            agg.dataset,
            agg.mean_clean_top1,
            agg.attacked_pm(),
        );
    }
    out
}

/// Evaluate an attack against the configured targets, one run per seed.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> CmdResult {
    prepare_out(cfg, out, "eval")?;
    let budget = AttackBudget::from_8bit(cfg.get_u32("train.epsilon")?)?;
    let attack_name = cfg.get("eval.attack").to_string();
    let batch = cfg.get_usize("eval.batch_size")?;

    // attack-specific resources, resolved before target training so a
    // missing checkpoint fails fast
    let mut generator_holder: Option<Generator> = None;
    let mut substitute_holder: Option<Vec<Classifier>> = None;
    if attack_name == "gen" || attack_name == "gs" {
        let ckpt = if cfg.get("eval.checkpoint").is_empty() {
            out.join("generator.biaf")
        } else {
            PathBuf::from(cfg.get("eval.checkpoint"))
        };
        generator_holder = Some(load_checkpoint(&ckpt)?.0);
    } else if ["pgd", "dim", "dr", "ssp"].contains(&attack_name.as_str()) {
        substitute_holder = Some(substitutes(cfg, false)?);
    }
    let targets = build_targets(cfg)?;
    let pairs = targets.pairs();

    let seeds: Vec<u64> = cfg
        .get_list("eval.seeds")
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::Config(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Config("eval.seeds must not be empty".into()));
    }

    let icfg = iter_config(cfg, budget)?;
    let source_arch = cfg.get("model.arch").to_string();
    let tap = LayerTap::new(cfg.get("objective.tap"));
    let report = multi_seed(&seeds, |seed| {
        let attack = match attack_name.as_str() {
            "identity" => Attack::Identity,
            "gen" => Attack::Generator {
                generator: generator_holder.as_ref().expect("generator loaded"),
                source_arch: source_arch.clone(),
                smooth: false,
            },
            "gs" => Attack::Generator {
                generator: generator_holder.as_ref().expect("generator loaded"),
                source_arch: source_arch.clone(),
                smooth: true,
            },
            "pgd" => Attack::Pgd {
                model: &substitute_holder.as_ref().expect("substitute trained")[0],
                cfg: icfg,
            },
            "dim" => Attack::Dim {
                model: &substitute_holder.as_ref().expect("substitute trained")[0],
                cfg: icfg,
            },
            "dr" => Attack::Dr {
                model: &substitute_holder.as_ref().expect("substitute trained")[0],
                tap: tap.clone(),
                cfg: icfg,
            },
            "ssp" => Attack::Ssp {
                model: &substitute_holder.as_ref().expect("substitute trained")[0],
                tap: tap.clone(),
                cfg: icfg,
            },
            "noise" => Attack::Noise { std_frac: 0.5 },
            other => {
                return Err(bia_core::Error::InvalidParameter(format!(
                    "unknown attack `{other}`"
                )))
            }
        };
        evaluate_attack(&attack, &pairs, &budget, seed, batch)
    });
    let report = match report {
        Ok(r) => r,
        Err(bia_core::Error::InvalidParameter(m)) if m.starts_with("unknown attack") => {
            return Err(CliError::Config(m))
        }
        Err(e) => return Err(e.into()),
    };
    report.write(out, "report")?;
    print!("{}", report_lines(&report));
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

/// Noise-fraction override is read inside `cmd_eval`; kept here for the
/// sweep commands.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> CmdResult {
    prepare_out(cfg, out, "sweep")?;
    let models = substitutes(cfg, false)?;
    let substitute = &models[0];
    let source = load_split(cfg, cfg.get("data.train"), Split::Train)?;
    let targets = build_targets(cfg)?;
    let pairs = targets.pairs();
    let tc = train_config(cfg)?;
    let spec = generator_spec(cfg)?;
    match cfg.get("sweep.kind") {
        "tap" => {
            let taps: Vec<LayerTap> =
                cfg.get_list("sweep.taps").into_iter().map(LayerTap::new).collect();
            let results = layer_sweep(spec, substitute, &taps, &source, &pairs, &tc)?;
            let mut csv = String::from("tap,mean_attacked_top1\n");
            let mut merged = Vec::new();
            for (tap, report) in results {
                let _ = writeln!(csv, "{},{}", tap.layer_id, report.mean_attacked());
                println!("tap {}: mean attacked top-1 {:.2}", tap.layer_id, report.mean_attacked());
                let mut rows = report.rows;
                for r in &mut rows {
                    r.attack_id = format!("gen[{}]", tap.layer_id);
                }
                merged.extend(rows);
            }
            let path = out.join("tap_sweep.csv");
            std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
            EvalReport::from_rows(merged).write(out, "tap_sweep_rows")?;
        }
        "rn" => {
            let grid = SweepGrid {
                mu_means: parse_f64_list(cfg, "sweep.mu_means")?,
                sigma_means: parse_f64_list(cfg, "sweep.sigma_means")?,
            };
            let table = rn_param_sweep(&grid, spec, substitute, &source, &pairs, &tc)?;
            let path = out.join("rn_heatmap.csv");
            std::fs::write(&path, table.to_csv()).map_err(|e| io_err(&path, e))?;
            print!("{}", table.to_csv());
            let merged = EvalReport::merged(table.reports.into_iter().flatten());
            merged.write(out, "rn_sweep_rows")?;
        }
        other => return Err(CliError::Config(format!("unknown sweep kind `{other}`"))),
    }
    Ok(())
}

fn parse_f64_list(cfg: &RunConfig, key: &str) -> Result<Vec<f64>, CliError> {
    cfg.get_list(key)
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::Config(format!("key `{key}`: bad number `{s}`"))))
        .collect()
}

/// Render one grayscale image per generator block.
pub fn cmd_viz(cfg: &RunConfig, out: &Path) -> CmdResult {
    prepare_out(cfg, out, "viz")?;
    let ckpt = if cfg.get("viz.checkpoint").is_empty() {
        out.join("generator.biaf")
    } else {
        PathBuf::from(cfg.get("viz.checkpoint"))
    };
    let (generator, _) = load_checkpoint(&ckpt)?;
    let source = cfg.get("viz.source");
    let x = match SynthFamily::parse(source) {
        Some(family) => {
            let handle = load_dataset(&DatasetSpec::Synthetic {
                family,
                split: Split::Test,
                size: cfg.get_usize("viz.index")? + 1,
                resolution: cfg.get_usize("data.resolution")?,
                seed: cfg.get_u64("data.seed")?,
            })?;
            bia_core::data::to_batch(&handle, &[cfg.get_usize("viz.index")?])?.0
        }
        None => {
            let img = image::open(source)
                .map_err(|e| CliError::Runtime(format!("decode {source}: {e}")))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut x = ndarray::Array4::zeros((1, 3, h, w));
            for i in 0..h {
                for j in 0..w {
                    let px = img.get_pixel(j as u32, i as u32);
                    for c in 0..3 {
                        x[[0, c, i, j]] = px[c] as f64 / 255.0;
                    }
                }
            }
            x
        }
    };
    let paths = visualize_blocks(&generator, &x, out)?;
    println!("wrote {} block images to {}", paths.len(), out.display());
    Ok(())
}
