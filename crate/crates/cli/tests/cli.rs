//! End-to-end checks of the `bia` binary: exit codes, artifact layout,
//! reproducibility of reports, and the attack round trip.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bia() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bia"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bia-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Tiny-footprint settings shared by the smoke runs.
fn tiny_sets(cmd: &mut Command) {
    for set in [
        "data.train_size=48",
        "data.test_size=24",
        "model.epochs=1",
        "eval.target_epochs=1",
        "generator.residual_blocks=1",
        "generator.base_channels=4",
        "train.batch_size=8",
        "parallelism=2",
    ] {
        cmd.arg("--set").arg(set);
    }
}

#[test]
fn unknown_key_exits_2_and_names_the_key() {
    let out = bia().args(["train", "--set", "bogus.key=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus.key"), "stderr must name the key: {stderr}");
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tmp("missing");
    let out = bia()
        .args(["eval", "--out"])
        .arg(&dir)
        .args(["--set", "eval.checkpoint=/definitely/not/here.biaf"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn dump_config_normalizes_idempotently() {
    let out = bia().args(["train", "--dump-config", "--set", "train.seed=9"]).output().unwrap();
    assert!(out.status.success());
    let doc = String::from_utf8(out.stdout).unwrap();
    assert!(doc.contains("train.seed = 9\n"));

    // feeding the dump back in reproduces it byte for byte
    let dir = tmp("dump");
    let cfg_path = dir.join("cfg");
    std::fs::write(&cfg_path, &doc).unwrap();
    let again = bia()
        .args(["train", "--dump-config", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(doc, String::from_utf8(again.stdout).unwrap());
}

#[test]
fn env_override_reaches_checkpoint_metadata() {
    let dir = tmp("env");
    let mut cmd = bia();
    cmd.args(["train", "--out"]).arg(&dir);
    tiny_sets(&mut cmd);
    cmd.env("BIA__TRAIN__SEED", "5");
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, meta) = bia_core::training::load_checkpoint(&dir.join("generator.biaf")).unwrap();
    assert_eq!(meta.get("seed").map(String::as_str), Some("5"));
}

#[test]
fn train_eval_viz_attack_round_trip() {
    let dir = tmp("roundtrip");

    let mut train = bia();
    train.args(["train", "--out"]).arg(&dir);
    tiny_sets(&mut train);
    let out = train.output().unwrap();
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("generator.biaf").exists());
    let loss = std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss\n"));

    // identity evaluation: attacked accuracy equals clean accuracy
    let mut eval = bia();
    eval.args(["eval", "--out"]).arg(&dir).args(["--set", "eval.attack=identity"]);
    tiny_sets(&mut eval);
    let out = eval.output().unwrap();
    assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    for row in parsed["rows"].as_array().unwrap() {
        assert_eq!(row["clean_top1"], row["attacked_top1"]);
    }

    // generator evaluation twice: byte-identical reports
    let run_eval = |out_dir: &Path| {
        let mut eval = bia();
        eval.args(["eval", "--out"]).arg(out_dir);
        eval.arg("--set").arg(format!(
            "eval.checkpoint={}",
            dir.join("generator.biaf").display()
        ));
        tiny_sets(&mut eval);
        let out = eval.output().unwrap();
        assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("report.json")).unwrap()
    };
    let a = run_eval(&tmp("eval-a"));
    let b = run_eval(&tmp("eval-b"));
    assert_eq!(a, b, "reports must be byte-identical across identical runs");

    // viz produces one image per block (1 down + 1 residual + 1 up)
    let mut viz = bia();
    viz.args(["viz", "--out"]).arg(&dir);
    tiny_sets(&mut viz);
    let out = viz.output().unwrap();
    assert!(out.status.success(), "viz: {}", String::from_utf8_lossy(&out.stderr));
    for block in ["down", "residual_1", "up"] {
        assert!(dir.join(format!("{block}.png")).exists(), "missing {block}.png");
    }

    // attack round trip at epsilon 0 reproduces the inputs bitwise
    let img_dir = tmp("attack-in");
    for k in 0..3u8 {
        let img = image::RgbImage::from_fn(20, 14, |x, y| {
            image::Rgb([(x as u8) * 9 + k, (y as u8) * 11, 100 + k])
        });
        img.save(img_dir.join(format!("im{k}.png"))).unwrap();
    }
    let adv_dir = tmp("attack-out");
    let out = bia()
        .args(["attack", "--checkpoint"])
        .arg(dir.join("generator.biaf"))
        .arg("--input")
        .arg(&img_dir)
        .arg("--out")
        .arg(&adv_dir)
        .args(["--epsilon", "0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "attack: {}", String::from_utf8_lossy(&out.stderr));
    for k in 0..3u8 {
        let orig = image::open(img_dir.join(format!("im{k}.png"))).unwrap().to_rgb8();
        let adv = image::open(adv_dir.join(format!("im{k}.png"))).unwrap().to_rgb8();
        assert_eq!(orig.as_raw(), adv.as_raw(), "epsilon 0 must reproduce inputs");
    }

    // attack at epsilon 10 stays inside the 8-bit ball
    let adv10 = tmp("attack-out10");
    let out = bia()
        .args(["attack", "--checkpoint"])
        .arg(dir.join("generator.biaf"))
        .arg("--input")
        .arg(&img_dir)
        .arg("--out")
        .arg(&adv10)
        .args(["--epsilon", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    for k in 0..3u8 {
        let orig = image::open(img_dir.join(format!("im{k}.png"))).unwrap().to_rgb8();
        let adv = image::open(adv10.join(format!("im{k}.png"))).unwrap().to_rgb8();
        let max_diff = orig
            .as_raw()
            .iter()
            .zip(adv.as_raw().iter())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max_diff <= 10, "8-bit audit: max diff {max_diff} > 10");
    }
}
