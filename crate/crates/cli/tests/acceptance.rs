//! Acceptance suite: one test per shipping criterion, each printing a single
//! verdict line. Run `cargo test --test acceptance -- --nocapture` to see the
//! lines for passing criteria too.
//!
//! Criterion 8 (STARE reproduction) is long-running and needs the dataset on
//! disk; it is `#[ignore]`d and activates only when `STARE_DIR` is set:
//! `STARE_DIR=/data/stare cargo test --test acceptance -- --ignored --nocapture`

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vesselnet::compress::{binarize_stochastic, hard_sigmoid, ternarize};
use vesselnet::config::RunConfig;
use vesselnet::eval::{evaluate_on_images, pairwise_auc, roc_auc};
use vesselnet::modelio::{enhance_pairs, load_stare, model_bytes, model_from_bytes};
use vesselnet::network::{
    accuracy, dense_forward, gradient_check, init_conv, init_dense, train_epoch, train_rng, Layer,
    Loss, Network, Target,
};
use vesselnet::preprocess::build_dataset;
use vesselnet::{Error, Tensor};

fn verdict(criterion: usize, passed: bool, detail: &str) {
    let word = if passed { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {word} - {detail}");
    assert!(passed, "criterion {criterion}: {word} - {detail}");
}

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

/// Value of the last `key=value` stdout line (config echo lines start with
/// `#` and never match).
fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}=` line in:\n{stdout}"))
        .parse()
        .unwrap_or_else(|_| panic!("`{key}=` line is not numeric in:\n{stdout}"))
}

#[test]
fn criterion_1_architecture_accounting() {
    let dir = TempDir::new().unwrap();
    let started = Instant::now();
    let (out, err, code) = run(dir.path(), &["report"]);
    let elapsed = started.elapsed();
    assert_eq!(code, 0, "report failed: {err}");

    let rows: Vec<Vec<&str>> = out
        .lines()
        .filter(|l| !l.starts_with('#') && l.contains(',') && !l.starts_with("layer,"))
        .map(|l| l.split(',').collect())
        .collect();
    let params: Vec<&str> = rows
        .iter()
        .filter(|r| r[1] == "conv" || r[1] == "dense")
        .map(|r| r[3])
        .collect();
    let mut chain: Vec<&str> = Vec::new();
    for row in rows.iter().filter(|r| r[0] != "total") {
        if chain.last() != Some(&row[2]) {
            chain.push(row[2]);
        }
    }

    let want_params = ["576", "18432", "14400", "1000", "40"];
    let want_chain = [
        "1M × 9×9N",
        "64M × 9×9N",
        "64M × 5×5N",
        "32M × 5×5N",
        "32M × 3×3N",
        "50N",
        "20N",
        "2N",
    ];
    let ok = params == want_params && chain == want_chain && elapsed < Duration::from_secs(1);
    verdict(
        1,
        ok,
        &format!("weight counts {params:?}, size chain {chain:?}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let started = Instant::now();
    let mut worst = 0.0f32;
    for seed in 0..20u64 {
        let mut net = Network::reference(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let pixels: Vec<f32> = (0..81).map(|_| rng.random()).collect();
        let input = Tensor::new([9, 9, 1], pixels).unwrap();
        let err = gradient_check(
            &mut net,
            &input,
            Target::Class((seed % 2) as usize),
            Loss::CrossEntropy,
            1e-3,
            seed,
        )
        .unwrap();
        worst = worst.max(err);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let layer = init_dense(6, 3, &mut rng);
    let mut net = Network::new([6, 1, 1], vec![Layer::Dense(layer)]);
    let pixels: Vec<f32> = (0..6).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    let input = Tensor::new([6, 1, 1], pixels).unwrap();
    let target = [0.4, -0.9, 0.2];
    let linear = gradient_check(
        &mut net,
        &input,
        Target::Vector(&target),
        Loss::SquaredError,
        1e-3,
        5,
    )
    .unwrap();

    let elapsed = started.elapsed();
    let ok = worst < 1e-2 && linear < 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        2,
        ok,
        &format!(
            "20 reference nets worst rel err {worst:.2e}, linear case {linear:.2e}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_3_quantizer_laws() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    for _ in 0..10_000 {
        let len = rng.random_range(1..=32);
        let data: Vec<f32> = (0..len)
            .map(|_| {
                if rng.random_range(0..8) == 0 {
                    0.0
                } else {
                    rng.random::<f32>() * 4.0 - 2.0
                }
            })
            .collect();
        let tensor = Tensor::new(vec![len], data.clone()).unwrap();
        let code = ternarize(&tensor).unwrap();
        for (&w, &c) in data.iter().zip(code.values()) {
            assert!(
                c == -1.0 || c == 0.0 || c == 1.0,
                "value-set violation: {c}"
            );
            let want = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            assert_eq!(c, want, "sign violation for weight {w}");
        }
        let again = Tensor::new(vec![len], code.values().to_vec()).unwrap();
        assert_eq!(
            ternarize(&again).unwrap().values(),
            code.values(),
            "ternarize is not idempotent"
        );
    }

    let n = 10_000usize;
    let bound = 4.0 / (n as f64).sqrt();
    let mut worst_gap = 0.0f64;
    for &w in &[-2.0f32, -1.0, -0.6, -0.2, 0.0, 0.2, 0.6, 1.0, 2.0] {
        let tensor = Tensor::new(vec![n], vec![w; n]).unwrap();
        let drawn = binarize_stochastic(&tensor, &mut rng);
        let mean = drawn.iter().map(|&b| f64::from(b)).sum::<f64>() / n as f64;
        let expect = 2.0 * f64::from(hard_sigmoid(w)) - 1.0;
        worst_gap = worst_gap.max((mean - expect).abs());
    }

    let mut worst_dense = 0.0f32;
    for _ in 0..1_000 {
        let fan_in = rng.random_range(1..=64);
        let fan_out = rng.random_range(1..=8);
        let mut layer = init_dense(fan_in, fan_out, &mut rng);
        layer.quant = Some(ternarize(&layer.weights).unwrap());
        let x: Vec<f32> = (0..fan_in)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        let input = Tensor::new(vec![fan_in], x.clone()).unwrap();
        let got = dense_forward(&input, &layer.weights, &layer.bias, layer.quant.as_ref()).unwrap();
        let codes = layer.quant.as_ref().unwrap().values();
        for j in 0..fan_out {
            let mut acc = layer.bias.data()[j];
            for (i, &xi) in x.iter().enumerate() {
                let c = codes[j * fan_in + i];
                if c > 0.0 {
                    acc += xi;
                } else if c < 0.0 {
                    acc -= xi;
                }
            }
            worst_dense = worst_dense.max((got.data()[j] - acc).abs());
        }
    }

    let elapsed = started.elapsed();
    let ok = worst_gap <= bound && worst_dense <= 1e-5 && elapsed < Duration::from_secs(60);
    verdict(
        3,
        ok,
        &format!(
            "10000 tensors lawful; stochastic gap {worst_gap:.4} (bound {bound:.4}); \
             dense oracle gap {worst_dense:.2e}; {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_4_synthetic_pipeline() {
    let dir = TempDir::new().unwrap();
    let started = Instant::now();

    let (out, err, code) = run(dir.path(), &["train", "--synthetic"]);
    assert_eq!(code, 0, "train failed: {err}");
    let base = field(&out, "test_accuracy");

    let (out, err, code) = run(
        dir.path(),
        &["quantize", "--synthetic", "--model", "model.tqns"],
    );
    assert_eq!(code, 0, "quantize failed: {err}");
    let quant = field(&out, "test_accuracy");

    let (out, err, code) = run(
        dir.path(),
        &["prune", "--synthetic", "--model", "model.quant.tqns"],
    );
    assert_eq!(code, 0, "prune failed: {err}");
    let pruned = field(&out, "test_accuracy");
    let removal = field(&out, "conv_removal");

    let elapsed = started.elapsed();
    let ok = base >= 0.97
        && base - quant <= 0.010 + 1e-9
        && removal >= 0.55
        && quant - pruned <= 0.010 + 1e-9
        && elapsed < Duration::from_secs(600);
    verdict(
        4,
        ok,
        &format!(
            "base {base:.4}, quantized {quant:.4} (drop {:.4}), pruned {pruned:.4} \
             (drop {:.4}) at conv removal {removal:.4}; {elapsed:.1?}",
            base - quant,
            quant - pruned
        ),
    );
}

#[test]
fn criterion_5_full_quantization_negative_result() {
    let dir = TempDir::new().unwrap();
    let started = Instant::now();
    std::fs::write(
        dir.path().join("fcl.cfg"),
        "quant_rounds=4\nretrain_epochs_per_round=1\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("conv.cfg"),
        "quant_rounds=4\nretrain_epochs_per_round=1\nquantize_conv=true\n",
    )
    .unwrap();

    let (_, err, code) = run(dir.path(), &["train", "--synthetic"]);
    assert_eq!(code, 0, "train failed: {err}");
    let (out, err, code) = run(
        dir.path(),
        &[
            "quantize",
            "--synthetic",
            "--config",
            "fcl.cfg",
            "--model",
            "model.tqns",
            "--out",
            "fcl.tqns",
        ],
    );
    assert_eq!(code, 0, "dense-only quantize failed: {err}");
    let fcl_only = field(&out, "test_accuracy");
    let (out, err, code) = run(
        dir.path(),
        &[
            "quantize",
            "--synthetic",
            "--config",
            "conv.cfg",
            "--model",
            "model.tqns",
            "--out",
            "conv.tqns",
        ],
    );
    assert_eq!(code, 0, "full quantize failed: {err}");
    let full = field(&out, "test_accuracy");

    let elapsed = started.elapsed();
    let ok = fcl_only - full >= 0.05;
    verdict(
        5,
        ok,
        &format!(
            "dense-only {fcl_only:.4} vs fully quantized {full:.4} \
             (degradation {:.4}); {elapsed:.1?}",
            fcl_only - full
        ),
    );
}

/// Small random net covering every encoding: plain f32, ternary codes
/// (optionally under a mask), and sparse masked f32.
fn round_trip_net(seed: u64) -> Network {
    let mut rng = train_rng(seed);
    let cout = 1 + (seed as usize % 3);
    let mut conv = init_conv(1, cout, &mut rng);
    if seed.is_multiple_of(2) {
        let mut mask = vec![1.0f32; conv.weights.len()];
        let weights = conv.weights.data_mut();
        for i in (0..mask.len()).step_by(3) {
            mask[i] = 0.0;
            weights[i] = 0.0;
        }
        conv.mask = Some(Tensor::new(conv.weights.shape().to_vec(), mask).unwrap());
    }
    if seed.is_multiple_of(3) {
        conv.quant = Some(ternarize(&conv.weights).unwrap());
    }
    let mut dense1 = init_dense(4 * cout, 5, &mut rng);
    if seed % 2 == 1 {
        dense1.quant = Some(ternarize(&dense1.weights).unwrap());
    }
    let dense2 = init_dense(5, 2, &mut rng);
    Network::new(
        [3, 3, 1],
        vec![
            Layer::Conv(conv),
            Layer::Relu,
            Layer::MaxPool,
            Layer::Dense(dense1),
            Layer::Relu,
            Layer::Dense(dense2),
            Layer::Softmax,
        ],
    )
}

#[test]
fn criterion_6_serialization() {
    let started = Instant::now();
    for seed in 0..100u64 {
        let net = round_trip_net(seed);
        let bytes = model_bytes(&net).unwrap();
        let reloaded = model_from_bytes(&bytes).unwrap();
        let again = model_bytes(&reloaded).unwrap();
        assert_eq!(bytes, again, "round trip not bit-identical at seed {seed}");
    }

    let mut bad = Vec::new();
    bad.extend_from_slice(b"TQNS");
    bad.extend_from_slice(&1u16.to_le_bytes());
    bad.extend_from_slice(&2u16.to_le_bytes());
    bad.push(0); // input record
    for dim in [4u32, 1, 1] {
        bad.extend_from_slice(&dim.to_le_bytes());
    }
    bad.push(3); // dense record, 1 x 4, ternary encoding
    bad.extend_from_slice(&1u32.to_le_bytes());
    bad.extend_from_slice(&4u32.to_le_bytes());
    bad.push(1);
    bad.push(0b0000_0011); // forbidden code 11 in weight slot 0
    bad.extend_from_slice(&0f32.to_le_bytes());
    let rejected = matches!(
        model_from_bytes(&bad),
        Err(Error::CorruptModel { ref reason, .. }) if reason.contains("forbidden")
    );

    let elapsed = started.elapsed();
    let ok = rejected && elapsed < Duration::from_secs(10);
    verdict(
        6,
        ok,
        &format!("100 round trips bit-identical, forbidden code rejected; {elapsed:.2?}"),
    );
}

#[test]
fn criterion_7_roc_auc_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=100);
        let (scores, labels) = loop {
            let scores: Vec<f32> = (0..n)
                .map(|_| rng.random_range(0..=12) as f32 / 12.0)
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                break (scores, labels);
            }
        };
        let (_, trapezoid) = roc_auc(&scores, &labels).unwrap();
        let pairwise = pairwise_auc(&scores, &labels).unwrap();
        worst = worst.max((trapezoid - pairwise).abs());
    }
    let elapsed = started.elapsed();
    let ok = worst < 1e-9 && elapsed < Duration::from_secs(10);
    verdict(
        7,
        ok,
        &format!("200 score sets, worst |trapezoid - pairwise| = {worst:.2e}; {elapsed:.2?}"),
    );
}

#[test]
#[ignore = "long-running; set STARE_DIR to a directory of STARE images with .ah labels"]
fn criterion_8_stare_reproduction() {
    let Ok(dir) = std::env::var("STARE_DIR") else {
        println!("criterion 8: SKIP - STARE_DIR not set");
        return;
    };
    let started = Instant::now();
    let cfg = RunConfig {
        per_image_sample_count: 12_500,
        test_subsample: 50_000,
        ..Default::default()
    };

    let dataset = load_stare(Path::new(&dir)).unwrap();
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    let images = enhance_pairs(&dataset, cfg.equalize_window).unwrap();
    assert!(images.len() >= 5, "need at least 5 images for a fold");
    let held_out = images.len().div_ceil(cfg.folds);
    let train_imgs = &images[held_out..];
    let test_ids: Vec<usize> = (0..held_out).collect();

    let patches = build_dataset(train_imgs, &cfg.policy()).unwrap();
    let samples = patches.samples();
    println!(
        "fold 0: {} training patches from {} images, {} held out",
        samples.len(),
        train_imgs.len(),
        held_out
    );
    let mut net = Network::reference(cfg.seed);
    let mut rng = train_rng(cfg.seed.wrapping_add(1000));
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(
            &mut net,
            &samples,
            cfg.batch_size,
            cfg.learning_rate,
            &mut rng,
        )
        .unwrap();
        println!(
            "epoch={epoch} loss={loss:.6} train_accuracy={:.4}",
            accuracy(&net, &samples).unwrap()
        );
    }

    let (fold, _, _) = evaluate_on_images(&net, &images, &test_ids, &cfg).unwrap();
    let acc = fold.metrics.acc.unwrap_or(0.0);
    let elapsed = started.elapsed();
    for (name, value, target) in [("ACC", acc, 0.9617), ("AUC", fold.auc, 0.97)] {
        let gap = (value - target).abs();
        println!(
            "informational: fold {name} {value:.4} vs target {target:.4} \
             ({} +/-0.015 band)",
            if gap <= 0.015 { "inside" } else { "outside" }
        );
    }
    let ok = acc >= 0.93 && fold.auc >= 0.93;
    verdict(
        8,
        ok,
        &format!(
            "single fold ACC {acc:.4}, AUC {:.4}; {elapsed:.1?}",
            fold.auc
        ),
    );
}
