//! Black-box tests of the command-line contract: exit codes, determinism,
//! emitted files, and output structure.

use std::path::Path;
use std::process::Command;

use tempfile::TempDir;
use vesselnet::pnm::write_pgm;

const TINY_CFG: &str = "synth_train=800\nsynth_test=200\nepochs=1\nquant_rounds=1\n\
                        retrain_epochs_per_round=1\nprune_rounds=1\n";

fn run(dir: &Path, args: &[&str]) -> (String, String, i32) {
    let out = Command::new(env!("CARGO_BIN_EXE_vesselnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("vesselnet binary runs");
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.code().unwrap_or(-1),
    )
}

fn tiny_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY_CFG).unwrap();
    dir
}

fn train_tiny(dir: &Path, out: &str) {
    let (_, err, code) = run(
        dir,
        &["train", "--synthetic", "--config", "tiny.cfg", "--out", out],
    );
    assert_eq!(code, 0, "tiny train failed: {err}");
}

#[test]
fn train_is_deterministic_for_a_fixed_seed() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "a.tqns");
    train_tiny(dir.path(), "b.tqns");
    let a = std::fs::read(dir.path().join("a.tqns")).unwrap();
    let b = std::fs::read(dir.path().join("b.tqns")).unwrap();
    assert_eq!(a, b, "same config and seed must give identical model bytes");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "a.tqns");
    let (out, err, code) = run(
        dir.path(),
        &[
            "train",
            "--synthetic",
            "--config",
            "tiny.cfg",
            "--seed",
            "7",
            "--out",
            "b.tqns",
        ],
    );
    assert_eq!(code, 0, "{err}");
    assert!(
        out.contains("# seed=7"),
        "echo must reflect the override:\n{out}"
    );
    let a = std::fs::read(dir.path().join("a.tqns")).unwrap();
    let b = std::fs::read(dir.path().join("b.tqns")).unwrap();
    assert_ne!(a, b, "a different seed should train different weights");
}

#[test]
fn config_echo_prefixes_every_command() {
    let dir = TempDir::new().unwrap();
    let (out, _, code) = run(dir.path(), &["report"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("# seed=42"), "missing config echo:\n{out}");
}

#[test]
fn missing_data_directory_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (_, err, code) = run(
        dir.path(),
        &["eval", "--data", "/nonexistent", "--model", "m.tqns"],
    );
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("/nonexistent"), "must name the path: {err}");
}

#[test]
fn neither_data_nor_synthetic_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (_, err, code) = run(dir.path(), &["train"]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(
        err.contains("--data"),
        "must point at the missing flag: {err}"
    );
}

#[test]
fn data_and_synthetic_flags_conflict() {
    let dir = TempDir::new().unwrap();
    let (_, _, code) = run(dir.path(), &["train", "--data", "x", "--synthetic"]);
    assert_eq!(code, 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "nonsense=1\n").unwrap();
    let (_, err, code) = run(dir.path(), &["train", "--synthetic", "--config", "bad.cfg"]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("nonsense"), "must name the bad key: {err}");
}

#[test]
fn pruning_an_unquantized_model_is_a_pipeline_order_error() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "m.tqns");
    let (_, err, code) = run(
        dir.path(),
        &[
            "prune",
            "--synthetic",
            "--config",
            "tiny.cfg",
            "--model",
            "m.tqns",
        ],
    );
    assert_eq!(code, 2, "stderr: {err}");
    assert!(
        err.contains("quantize"),
        "must explain the required order: {err}"
    );
}

#[test]
fn prune_k_zero_warns_and_writes_the_model_unchanged() {
    let dir = tiny_dir();
    std::fs::write(dir.path().join("k0.cfg"), format!("{TINY_CFG}prune_k=0\n")).unwrap();
    train_tiny(dir.path(), "m.tqns");
    let (_, err, code) = run(
        dir.path(),
        &[
            "quantize",
            "--synthetic",
            "--config",
            "tiny.cfg",
            "--model",
            "m.tqns",
            "--out",
            "q.tqns",
        ],
    );
    assert_eq!(code, 0, "{err}");
    let (_, err, code) = run(
        dir.path(),
        &[
            "prune",
            "--synthetic",
            "--config",
            "k0.cfg",
            "--model",
            "q.tqns",
            "--out",
            "p.tqns",
        ],
    );
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("disables pruning"), "missing warning: {err}");
    let q = std::fs::read(dir.path().join("q.tqns")).unwrap();
    let p = std::fs::read(dir.path().join("p.tqns")).unwrap();
    assert_eq!(q, p, "k=0 must leave the model byte-identical");
}

#[test]
fn emptying_a_layer_rolls_back_and_exits_nonzero() {
    let dir = tiny_dir();
    std::fs::write(
        dir.path().join("harsh.cfg"),
        format!("{TINY_CFG}prune_k=1000\n"),
    )
    .unwrap();
    train_tiny(dir.path(), "m.tqns");
    let (_, _, code) = run(
        dir.path(),
        &[
            "quantize",
            "--synthetic",
            "--config",
            "tiny.cfg",
            "--model",
            "m.tqns",
            "--out",
            "q.tqns",
        ],
    );
    assert_eq!(code, 0);
    let (out, err, code) = run(
        dir.path(),
        &[
            "prune",
            "--synthetic",
            "--config",
            "harsh.cfg",
            "--model",
            "q.tqns",
            "--out",
            "p.tqns",
        ],
    );
    assert_eq!(code, 1, "stderr: {err}");
    assert!(err.contains("emptied"), "must say why: {err}");
    assert!(out.contains("stop_reason="), "stdout: {out}");
    let q = std::fs::read(dir.path().join("q.tqns")).unwrap();
    let p = std::fs::read(dir.path().join("p.tqns")).unwrap();
    assert_eq!(q, p, "the rolled-back model must match the input");
}

#[test]
fn segment_writes_probability_and_mask_maps() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "m.tqns");
    let side = 24usize;
    let pixels: Vec<u8> = (0..side * side)
        .map(|i| {
            let (x, y) = (i % side, i / side);
            if x == side / 2 {
                230
            } else {
                40 + ((x * 7 + y * 3) % 30) as u8
            }
        })
        .collect();
    write_pgm(&dir.path().join("eye.pgm"), side, side, &pixels).unwrap();

    let (out, err, code) = run(
        dir.path(),
        &[
            "segment", "--config", "tiny.cfg", "--model", "m.tqns", "eye.pgm",
        ],
    );
    assert_eq!(code, 0, "stderr: {err}");
    assert!(out.contains("vessel_pixels="), "stdout: {out}");
    for name in ["eye.prob.pgm", "eye.mask.pgm"] {
        let path = dir.path().join(name);
        assert!(path.exists(), "{name} not written");
        let head = std::fs::read(path).unwrap();
        assert!(head.starts_with(b"P5"), "{name} is not a binary PGM");
    }
}

#[test]
fn segment_honors_an_fov_mask() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "m.tqns");
    let side = 16usize;
    let pixels: Vec<u8> = (0..side * side).map(|i| (i % 251) as u8).collect();
    write_pgm(&dir.path().join("eye.pgm"), side, side, &pixels).unwrap();
    write_pgm(
        &dir.path().join("fov.pgm"),
        side,
        side,
        &vec![0u8; side * side],
    )
    .unwrap();

    let (out, err, code) = run(
        dir.path(),
        &[
            "segment", "--config", "tiny.cfg", "--model", "m.tqns", "--fov", "fov.pgm", "eye.pgm",
            "--out", "masked",
        ],
    );
    assert_eq!(code, 0, "stderr: {err}");
    assert!(
        out.contains(&format!("vessel_pixels=0 of {}", side * side)),
        "an all-zero field of view must suppress every pixel:\n{out}"
    );
    assert!(dir.path().join("masked.prob.pgm").exists());
}

#[test]
fn eval_reports_the_metric_block() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "m.tqns");
    let (out, err, code) = run(
        dir.path(),
        &[
            "eval",
            "--synthetic",
            "--config",
            "tiny.cfg",
            "--model",
            "m.tqns",
        ],
    );
    assert_eq!(code, 0, "stderr: {err}");
    for key in ["sen=", "spe=", "acc=", "dice=", "auc="] {
        assert!(out.contains(key), "missing {key} in:\n{out}");
    }
}

#[test]
fn xval_emits_fold_table_and_csv() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("x.cfg"),
        "epochs=1\nper_image_sample_count=200\nquant_rounds=1\nprune_rounds=1\n\
         retrain_epochs_per_round=1\nsynth_images=6\nsynth_image_size=32\n\
         test_subsample=200\nfolds=3\n",
    )
    .unwrap();
    let (out, err, code) = run(
        dir.path(),
        &[
            "xval",
            "--synthetic",
            "--config",
            "x.cfg",
            "--out",
            "folds.csv",
        ],
    );
    assert_eq!(code, 0, "stderr: {err}");
    assert!(out.contains("images=6 folds=3"), "{out}");
    assert!(out.contains("fold,variant,sen,spe,acc,dice,auc"), "{out}");
    for variant in ["original", "quantized", "pruned-quantized"] {
        for fold in 0..3 {
            assert!(
                out.contains(&format!("{fold},{variant},")),
                "missing {fold},{variant}"
            );
        }
        assert!(
            out.contains(&format!("mean,{variant},")),
            "missing mean row"
        );
        assert!(
            out.contains(&format!("pooled,{variant},")),
            "missing pooled row"
        );
    }
    let csv = std::fs::read_to_string(dir.path().join("folds.csv")).unwrap();
    assert!(csv.starts_with("fold,variant,"), "csv header: {csv}");
}

#[test]
fn report_reflects_compression_of_a_saved_model() {
    let dir = tiny_dir();
    train_tiny(dir.path(), "m.tqns");
    let (_, _, code) = run(
        dir.path(),
        &[
            "quantize",
            "--synthetic",
            "--config",
            "tiny.cfg",
            "--model",
            "m.tqns",
            "--out",
            "q.tqns",
        ],
    );
    assert_eq!(code, 0);
    let (out, err, code) = run(dir.path(), &["report", "--model", "q.tqns"]);
    assert_eq!(code, 0, "stderr: {err}");
    let bytes: u64 = out
        .lines()
        .find_map(|l| l.strip_prefix("storage_bytes="))
        .unwrap()
        .parse()
        .unwrap();
    let original: u64 = out
        .lines()
        .find_map(|l| l.strip_prefix("original_storage_bytes="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        bytes < original,
        "ternary dense layers must shrink storage: {bytes} vs {original}"
    );
}
