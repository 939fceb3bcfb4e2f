use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hfat::data::{make_dataset, DatasetKind, DatasetSpec};
use hfat::eval::{EvalReport, LandscapeGrid, TransferMatrix};
use hfat::model::{save_checkpoint, Checkpoint, MlpSpec, ModelWeights};
use hfat::trainer::{read_epoch_log, read_lambda_trace, TrainConfig};

fn hfat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn hfat")
}

fn shipped_config(name: &str) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Shipped moons config cut down to a few epochs.
fn short_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let mut cfg = shipped_config("desk_moons.json");
    cfg.epochs = epochs;
    let path = dir.join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn shipped_configs_validate() {
    for name in ["desk_moons.json", "desk_blobs.json"] {
        shipped_config(name).validate().unwrap();
    }
    let moons = shipped_config("desk_moons.json");
    assert_eq!(moons.dataset, DatasetSpec::desk_moons(0));
    assert_eq!(shipped_config("desk_blobs.json").dataset, DatasetSpec::desk_blobs(0));
}

#[test]
fn train_writes_every_declared_file() {
    let tmp = tempfile::tempdir().unwrap();
    short_config(tmp.path(), 2);
    let out = hfat(&["train", "--config", "c.json", "--out", "run"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    for f in [
        "config.json",
        "epoch_log.csv",
        "lambda_trace.csv",
        "timing.csv",
        "resume.bin",
        "epoch_1.ckpt",
        "epoch_2.ckpt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(read_epoch_log(&run.join("epoch_log.csv")).unwrap().len(), 2);
    assert!(!read_lambda_trace(&run.join("lambda_trace.csv")).unwrap().is_empty());
}

#[test]
fn eval_of_untrained_model_is_chance_level() {
    let tmp = tempfile::tempdir().unwrap();
    let classes = 10;
    let spec = DatasetSpec {
        kind: DatasetKind::Blobs,
        n_samples: 2000,
        n_classes: classes,
        noise: 0.1,
        dim: 16,
        train_fraction: 0.5,
        seed: 2,
        bounds: Some(hfat::attacks::Bounds::UNIT),
        path: None,
    };
    // class = index mod C, so the combined set is exactly balanced
    let split = make_dataset(&spec).unwrap();
    let mut all = split.train.clone();
    let mut x = all.x.data().to_vec();
    x.extend_from_slice(split.test.x.data());
    all.y.extend_from_slice(&split.test.y);
    all.x = hfat::autodiff::Tensor::new(vec![all.y.len(), 16], x).unwrap();
    all.write_csv(&tmp.path().join("set.csv")).unwrap();
    let w = ModelWeights::init(&MlpSpec::with_hidden(16, &[64, 64], classes).unwrap(), 11).unwrap();
    save_checkpoint(&Checkpoint::new(w, 0, 11), tmp.path().join("m.ckpt")).unwrap();
    let out = hfat(
        &["eval", "--ckpt", "m.ckpt", "--data", "set.csv", "--eps", "0.03", "--attacks", "fgsm,pgd20", "--out", "r.json", "--csv", "r.csv"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = EvalReport::read_json(&tmp.path().join("r.json")).unwrap();
    let chance = 1.0 / classes as f64;
    assert!((rep.natural - chance).abs() <= 0.05, "natural {}", rep.natural);
    assert_eq!(rep.attacks.keys().collect::<Vec<_>>(), ["fgsm", "pgd20"]);
    let csv = fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("attack,accuracy\n"));
}

#[test]
fn landscape_grid_has_header_and_n_rows() {
    let tmp = tempfile::tempdir().unwrap();
    short_config(tmp.path(), 1);
    assert!(hfat(&["train", "--config", "c.json", "--out", "run"], tmp.path()).status.success());
    let out = hfat(
        &["landscape", "--ckpt", "run/epoch_1.ckpt", "--data", "c.json", "--mode", "grad", "--n", "41", "--out", "g.csv"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("g.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 42);
    assert!(lines[0].starts_with("b="));
    assert!(lines.iter().all(|l| l.split(',').count() == 41));
    let (axis, values) = LandscapeGrid::read_csv(&tmp.path().join("g.csv")).unwrap();
    assert_eq!((axis.len(), values.len()), (41, 41));
    let meta: LandscapeGrid = serde_json::from_str(&fs::read_to_string(tmp.path().join("g.json")).unwrap()).unwrap();
    // default extent is 1.5·eps
    assert!((meta.extent - 0.45).abs() < 1e-12);
}

#[test]
fn analysis_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    short_config(tmp.path(), 3);
    assert!(hfat(&["train", "--config", "c.json", "--out", "run"], tmp.path()).status.success());
    let ok = |args: &[&str]| {
        let out = hfat(args, tmp.path());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["transfer", "--ckpt", "run/epoch_1.ckpt", "--ckpt", "run/epoch_3.ckpt", "--data", "c.json", "--out", "m.csv"]);
    let m = TransferMatrix::read_csv(&tmp.path().join("m.csv")).unwrap();
    assert_eq!(m.accuracy.len(), 2);
    ok(&["hiders", "--run", "run", "--data", "c.json", "--split", "train", "--intervals", "1,2", "--out", "h"]);
    for f in ["proportions.csv", "occurrences.csv", "ratios.csv"] {
        assert!(tmp.path().join("h").join(f).is_file());
    }
    let ratios = hfat::hiders::read_ratios_csv(&tmp.path().join("h/ratios.csv")).unwrap();
    if ratios.iter().filter(|r| r.epoch_interval == 1).count() >= 2 {
        ok(&["fitprior", "--ratios", "h/ratios.csv", "--out", "p.json"]);
    }
    ok(&["dataset", "--spec", "c.json", "--out", "ds"]);
    let back = hfat::data::Dataset::read_csv(&tmp.path().join("ds/test.csv"), Some(2), None).unwrap();
    assert_eq!(back, make_dataset(&DatasetSpec::desk_moons(0)).unwrap().test);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| hfat(args, tmp.path()).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["train", "--bogus"]), 1);
    let out = hfat(&["eval", "--unknown-flag"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&["train", "--config", "missing.json"]), 2);
    fs::write(tmp.path().join("bad.json"), "{\"mode\": \"at\"").unwrap();
    assert_eq!(code(&["train", "--config", "bad.json"]), 2);
    fs::write(tmp.path().join("r.csv"), "r,epoch_interval\n1.0,1\n").unwrap();
    // a single sample cannot define a spread
    assert_eq!(code(&["fitprior", "--ratios", "r.csv", "--out", "p.json"]), 2);
}
