//! Diagnostic: per-tap feature-cosine reachable by PGD vs by the generator.
//! Ignored by default.

use bia_core::baselines::{pgd_attack, IterConfig};
use bia_core::data::{load_dataset, to_batch, DatasetSpec, NormStats, Split, SynthFamily};
use bia_core::evalsuite::{evaluate_attack, Attack};
use bia_core::generator::{build_generator, AttackBudget, GeneratorSpec};
use bia_core::models::{build_classifier, train_classifier, LayerTap};
use bia_core::objectives::{cosine_feature_loss, ObjectiveKind, ObjectiveVariant};
use bia_core::rng::seed_everything;
use bia_core::training::{train_generator, TrainConfig};

#[test]
#[ignore]
fn probe_taps() {
    let budget = AttackBudget::from_8bit(10).unwrap();
    let shapes_train = load_dataset(&DatasetSpec::Synthetic {
        family: SynthFamily::Shapes, split: Split::Train, size: 4000, resolution: 32, seed: 2024,
    }).unwrap();
    let shapes_test = load_dataset(&DatasetSpec::Synthetic {
        family: SynthFamily::Shapes, split: Split::Test, size: 500, resolution: 32, seed: 2024,
    }).unwrap();
    let digits_test = load_dataset(&DatasetSpec::Synthetic {
        family: SynthFamily::Digits, split: Split::Test, size: 500, resolution: 32, seed: 2024,
    }).unwrap();
    let digits_train = load_dataset(&DatasetSpec::Synthetic {
        family: SynthFamily::Digits, split: Split::Train, size: 4000, resolution: 32, seed: 2024,
    }).unwrap();
    let hub = seed_everything(2024);
    let mut substitute = build_classifier("smallconv", 10, (32, 32), NormStats::imagenet(), &mut hub.stream("substitute-init")).unwrap();
    let sub_acc = train_classifier(&mut substitute, &shapes_train, &shapes_test, 2, 1e-3, &hub).unwrap();
    let mut target = build_classifier("smallres", 10, (32, 32), NormStats::coarse(), &mut hub.stream("target-init")).unwrap();
    let tgt_acc = train_classifier(&mut target, &digits_train, &digits_test, 2, 1e-3, &hub).unwrap();
    eprintln!("substitute {sub_acc:.1}%, target {tgt_acc:.1}%");

    // PGD ceiling on the target
    {
        let subset: Vec<usize> = (0..128).collect();
        let (xt, lt) = to_batch(&digits_test, &subset).unwrap();
        let cfgt = IterConfig { iterations: 20, ..IterConfig::new(budget) };
        let mut rngt = hub.stream("probe-target");
        let advt = pgd_attack(&target, &xt, &lt, &cfgt, &mut rngt).unwrap();
        let predst = target.predict(&advt).unwrap();
        let acct = 100.0 * predst.iter().zip(&lt).filter(|(p, l)| p == l).count() as f64 / lt.len() as f64;
        eprintln!("pgd(20it) on target digits: {acct:.1}%");
        let noise = evaluate_attack(&Attack::Noise { std_frac: 0.5 }, &[(&target, &digits_test)], &budget, 1, 64).unwrap();
        eprintln!("noise on target: {:.2} (clean {:.2})", noise.rows[0].attacked_top1, noise.rows[0].clean_top1);
    }

    // PGD examples and their per-tap cosine
    let subset: Vec<usize> = (0..128).collect();
    let (x, labels) = to_batch(&shapes_test, &subset).unwrap();
    let cfg = IterConfig { iterations: 20, ..IterConfig::new(budget) };
    let mut rng = hub.stream("probe");
    let adv = pgd_attack(&substitute, &x, &labels, &cfg, &mut rng).unwrap();
    let preds = substitute.predict(&adv).unwrap();
    let acc = 100.0 * preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    for tap in ["stage1", "stage2", "stage3"] {
        let tap = LayerTap::new(tap);
        let fc = substitute.extract_features(&tap, &x).unwrap();
        let fa = substitute.extract_features(&tap, &adv).unwrap();
        let cos = cosine_feature_loss(&fa, &fc).unwrap();
        eprintln!("pgd (wb acc {acc:.1}%): cosine at {} = {cos:.4}", tap.layer_id);
    }

    // generator arms
    for (variant, tap, per_image) in [
        (ObjectiveVariant::Bia, "stage3", false),
        (ObjectiveVariant::BiaRn, "stage3", true),
        (ObjectiveVariant::BiaDa, "stage3", false),
        (ObjectiveVariant::Bia, "stage2", false),
        (ObjectiveVariant::BiaRn, "stage2", false),
        (ObjectiveVariant::BiaDa, "stage2", false),
    ] {
        let epochs = 4usize;
        let kind = ObjectiveKind::new(variant, LayerTap::new(tap));
        let mut cfg = TrainConfig::new(kind, budget, 1);
        cfg.lr = 1e-3;
        cfg.epochs = epochs;
        cfg.rn_per_image = per_image;
        let spec = GeneratorSpec { down_blocks: 2, residual_blocks: 2, up_blocks: 2, base_channels: 8 };
        let mut generator = build_generator(spec, &mut seed_everything(1).stream("gen-init")).unwrap();
        let t = std::time::Instant::now();
        let trace = train_generator(&mut generator, &[(&substitute, cfg.objective.tap.clone())], &shapes_train, &cfg).unwrap();
        let attack = Attack::Generator { generator: &generator, source_arch: "smallconv".into(), smooth: false };
        let report = evaluate_attack(&attack, &[(&substitute, &shapes_test), (&target, &digits_test)], &budget, 1, 64).unwrap();
        eprintln!(
            "gen {variant:?} tap={tap} pi={per_image}: loss {:.3}->{:.3}, white-box {:.2}, target {:.2} ({:.0}s)",
            trace.mean_over(0..20),
            trace.mean_over(trace.0.len() - 20..trace.0.len()),
            report.rows[0].attacked_top1,
            report.rows[1].attacked_top1,
            t.elapsed().as_secs_f64(),
        );
    }
}
