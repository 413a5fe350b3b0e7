//! The `ichnet` binary: exit codes and a full generate → train → explain
//! round trip on a tiny dataset.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[phantom]
image_size = 64
patients = 4
slices_per_patient = 2
seed = 3

[segmenter]
encoder_widths = [4, 8, 16]

[classifier]
block_widths = [4, 8]
encoder_feature_width = 16

[train_seg]
epochs = 1
batch_size = 4

[train_cls]
epochs = 1
batch_size = 4
"#;

fn ichnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ichnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ichnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let text = ok(&["--help"]);
    for cmd in [
        "generate",
        "preprocess",
        "train-seg",
        "train-cls",
        "finetune-loc",
        "eval",
        "experiment",
        "gradcam",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn configuration_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[phantom]\nimage_sise = 64\n").unwrap();
    let out = ichnet(&["--config", s(&bad), "generate", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = ichnet(&[
        "generate",
        "--out",
        s(dir.path()),
        "--prevalence",
        "0.5,1.5,0.1,0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = ichnet(&[
        "preprocess",
        "--manifest",
        "m.tsv",
        "--out",
        "x",
        "--a",
        "80",
        "--b",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_problems_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.tsv");
    let out = ichnet(&[
        "train-seg",
        "--manifest",
        s(&missing),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let garbage = dir.path().join("garbage.tsv");
    std::fs::write(&garbage, "not a manifest\n").unwrap();
    let out = ichnet(&[
        "eval",
        "--manifest",
        s(&garbage),
        "--checkpoint",
        s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);

    let manifest = ok(&["--config", c, "generate", "--out", s(&d.join("raw"))]);
    let manifest = manifest.trim();
    assert_eq!(
        std::fs::read_to_string(manifest)
            .unwrap()
            .lines()
            .filter(|l| l.contains("P00"))
            .count(),
        8
    );

    let pre = ok(&[
        "--config",
        c,
        "preprocess",
        "--manifest",
        manifest,
        "--out",
        s(&d.join("pre")),
    ]);
    let pre = pre.trim();
    assert!(d.join("pre/images/P000_S00.png").is_file());

    let seg_out = ok(&[
        "--config",
        c,
        "train-seg",
        "--manifest",
        pre,
        "--out",
        s(&d.join("seg")),
    ]);
    assert!(seg_out.contains("iou") && seg_out.contains("checkpoint\t"));
    let seg_ck = d.join("seg/checkpoint.ick");
    assert!(seg_ck.is_file() && d.join("seg/record.json").is_file());

    let cls_out = ok(&[
        "--config",
        c,
        "train-cls",
        "--manifest",
        pre,
        "--seg-checkpoint",
        s(&seg_ck),
        "--pooling",
        "wavelet-ll",
        "--out",
        s(&d.join("cls")),
    ]);
    assert!(cls_out.contains("auc"));
    let cls_ck = d.join("cls/checkpoint.ick");

    let eval_out = ok(&[
        "--config",
        c,
        "eval",
        "--manifest",
        pre,
        "--checkpoint",
        s(&cls_ck),
        "--all",
    ]);
    assert!(eval_out.contains("auc"));

    let heat = ok(&[
        "--config",
        c,
        "gradcam",
        "--checkpoint",
        s(&cls_ck),
        "--image",
        s(&d.join("pre/images/P000_S00.png")),
        "--class",
        "irregular",
        "--out",
        s(&d.join("cam")),
    ]);
    let png = d.join("cam/P000_S00_irregular_gradcam.png");
    assert!(heat.starts_with(s(&png)), "{heat}");
    assert!(png.is_file());

    let out = ichnet(&[
        "--config",
        c,
        "gradcam",
        "--checkpoint",
        s(&cls_ck),
        "--image",
        s(&d.join("pre/images/P000_S00.png")),
        "--class",
        "0",
        "--layer",
        "nope",
        "--out",
        s(&d.join("cam")),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("block0.conv0"));
}
