//! Metrics (sensitivity/specificity/accuracy/DICE), ROC and AUC, whole-
//! image segmentation, and the k-fold cross-validation harness that
//! measures the original, quantized, and pruned-quantized variants.

use crate::compress::{prune_retrain, quantize_retrain, PruneStop};
use crate::config::RunConfig;
use crate::network::{train_epoch, Network};
use crate::preprocess::{extract_patch, split_folds, LabeledImage, Plane};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Pixel-level confusion counts with vessel as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Ratio metrics; a metric whose denominator is zero is `None`
/// (undefined), never silently 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct Metrics {
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub acc: Option<f64>,
    pub dice: Option<f64>,
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "confusion input lengths",
            vec![labels.len()],
            vec![predictions.len()],
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }
    Metrics {
        sen: ratio(c.true_pos, c.true_pos + c.false_neg),
        spe: ratio(c.true_neg, c.true_neg + c.false_pos),
        acc: ratio(c.true_pos + c.true_neg, c.total()),
        dice: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
    }
}

/// ROC curve (false-positive rate, true-positive rate) swept over
/// descending scores with equal scores grouped into one step, plus the
/// trapezoidal AUC. Grouping makes the AUC equal the pairwise-ordering
/// probability with ties counted half.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc input lengths",
            vec![labels.len()],
            vec![scores.len()],
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push((0.0, 0.0));
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut auc = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let score = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == score {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let (prev_x, prev_y) = *points.last().expect("seeded with origin");
        let x = fp as f64 / n_neg as f64;
        let y = tp as f64 / n_pos as f64;
        auc += (x - prev_x) * (y + prev_y) / 2.0;
        points.push((x, y));
        i = j;
    }
    Ok((points, auc))
}

/// A segmented image: per-pixel vessel probability and thresholded mask.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub probability: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Segmentation {
    /// Probability map as 8-bit gray (probability * 255, rounded).
    pub fn probability_bytes(&self) -> Vec<u8> {
        self.probability
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect()
    }

    /// Binary mask as 8-bit gray in {0, 255}.
    pub fn mask_bytes(&self) -> Vec<u8> {
        self.mask
            .iter()
            .map(|&m| if m { 255u8 } else { 0 })
            .collect()
    }
}

/// Classifies every pixel of an enhanced plane by its 9x9 patch. Pixels
/// outside the field of view get probability 0 and stay unmarked.
pub fn segment_image(
    net: &Network,
    enhanced: &Plane,
    fov: Option<&Plane>,
    threshold: f32,
) -> Result<Segmentation> {
    let (w, h) = (enhanced.width(), enhanced.height());
    if let Some(f) = fov {
        if f.width() != w || f.height() != h {
            return Err(Error::shape(
                "fov mask dimensions",
                vec![w, h],
                vec![f.width(), f.height()],
            ));
        }
    }
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0f32; w];
            for (x, slot) in row.iter_mut().enumerate() {
                if fov.is_some_and(|f| f.get(x, y) == 0) {
                    continue;
                }
                let patch = extract_patch(enhanced, x, y)?;
                *slot = net.forward(&patch)?[1];
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let probability: Vec<f32> = rows.into_iter().flatten().collect();
    let mask = probability
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let inside = fov.is_none_or(|f| f.get(i % w, i / w) != 0);
            inside && p >= threshold
        })
        .collect();
    Ok(Segmentation {
        width: w,
        height: h,
        probability,
        mask,
    })
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

pub const VARIANT_NAMES: [&str; 3] = ["original", "quantized", "pruned-quantized"];

/// Metrics of one variant on one fold's test pixels.
#[derive(Debug, Clone)]
pub struct FoldEval {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub auc: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Divergence diagnostic; when set, `evals` is empty and the fold is
    /// excluded from aggregation.
    pub error: Option<String>,
    /// One entry per variant, in [`VARIANT_NAMES`] order.
    pub evals: Vec<FoldEval>,
}

/// Mean and spread of one metric across succeeded folds.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub name: &'static str,
    pub sen: MeanStd,
    pub spe: MeanStd,
    pub acc: MeanStd,
    pub dice: MeanStd,
    pub auc: MeanStd,
    /// Metrics over the union of all folds' test pixels.
    pub pooled: FoldEval,
}

#[derive(Debug, Clone)]
pub struct XvalReport {
    pub folds: Vec<FoldOutcome>,
    pub summaries: Vec<VariantSummary>,
    pub failed_folds: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Test pixels of one image: full census or a seeded subsample.
fn test_pixels(img: &LabeledImage, subsample: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    for y in 0..img.enhanced.height() {
        for x in 0..img.enhanced.width() {
            if img.fov.as_ref().is_none_or(|f| f.get(x, y) != 0) {
                pixels.push((x, y));
            }
        }
    }
    if subsample == 0 || subsample >= pixels.len() {
        return pixels;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..subsample {
        let j = rng.random_range(i..pixels.len());
        pixels.swap(i, j);
    }
    pixels.truncate(subsample);
    pixels
}

/// Evaluates a network on the given images' test pixels; returns the
/// thresholded metrics plus the raw scores for pooling.
pub fn evaluate_on_images(
    net: &Network,
    images: &[LabeledImage],
    ids: &[usize],
    cfg: &RunConfig,
) -> Result<(FoldEval, Vec<f32>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for &id in ids {
        let img = &images[id];
        let pixels = test_pixels(img, cfg.test_subsample, cfg.seed.wrapping_add(id as u64));
        let img_scores: Vec<f32> = pixels
            .par_iter()
            .map(|&(x, y)| {
                let patch = extract_patch(&img.enhanced, x, y)?;
                Ok(net.forward(&patch)?[1])
            })
            .collect::<Result<_>>()?;
        scores.extend(img_scores);
        labels.extend(pixels.iter().map(|&(x, y)| img.is_vessel(x, y)));
    }
    let predictions: Vec<bool> = scores.iter().map(|&s| s >= cfg.segment_threshold).collect();
    let counts = confusion(&predictions, &labels)?;
    let (_, auc) = roc_auc(&scores, &labels)?;
    Ok((
        FoldEval {
            counts,
            metrics: metrics(&counts),
            auc,
        },
        scores,
        labels,
    ))
}

/// Per-fold train/evaluate over the three variants. Each fold trains a
/// fresh baseline on the other folds' patches, then applies
/// quantize-retrain and prune-retrain, evaluating after each stage on the
/// held-out fold's pixels. A diverged fold is excluded and reported.
pub fn cross_validate(images: &[LabeledImage], cfg: &RunConfig) -> Result<XvalReport> {
    cfg.validate()?;
    let split = split_folds(images.len(), cfg.folds, cfg.seed)?;
    let mut folds = Vec::new();
    // scores/labels per variant pooled across folds
    let mut pooled: Vec<(Vec<f32>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); 3];

    for fold in 0..cfg.folds {
        match run_fold(
            images,
            &split.train_ids(fold),
            &split.folds[fold],
            cfg,
            fold,
        ) {
            Ok((evals, fold_scores)) => {
                for (variant, (s, l)) in fold_scores.into_iter().enumerate() {
                    pooled[variant].0.extend(s);
                    pooled[variant].1.extend(l);
                }
                folds.push(FoldOutcome {
                    fold,
                    error: None,
                    evals,
                });
            }
            Err(Error::TrainingDiverged { step }) => {
                folds.push(FoldOutcome {
                    fold,
                    error: Some(format!("training diverged at step {step}")),
                    evals: Vec::new(),
                });
            }
            Err(other) => return Err(other),
        }
    }

    let succeeded: Vec<&FoldOutcome> = folds.iter().filter(|f| f.error.is_none()).collect();
    let mut summaries = Vec::new();
    for (variant, name) in VARIANT_NAMES.iter().enumerate() {
        let collect = |pick: fn(&FoldEval) -> Option<f64>| -> Vec<f64> {
            succeeded
                .iter()
                .filter_map(|f| pick(&f.evals[variant]))
                .collect()
        };
        let (scores, labels) = &pooled[variant];
        let pooled_eval = if scores.is_empty() {
            FoldEval {
                counts: ConfusionCounts::default(),
                metrics: Metrics::default(),
                auc: 0.0,
            }
        } else {
            let predictions: Vec<bool> =
                scores.iter().map(|&s| s >= cfg.segment_threshold).collect();
            let counts = confusion(&predictions, labels)?;
            let (_, auc) = roc_auc(scores, labels)?;
            FoldEval {
                counts,
                metrics: metrics(&counts),
                auc,
            }
        };
        summaries.push(VariantSummary {
            name,
            sen: mean_std(&collect(|e| e.metrics.sen)),
            spe: mean_std(&collect(|e| e.metrics.spe)),
            acc: mean_std(&collect(|e| e.metrics.acc)),
            dice: mean_std(&collect(|e| e.metrics.dice)),
            auc: mean_std(&collect(|e| Some(e.auc))),
            pooled: pooled_eval,
        });
    }
    let failed_folds = folds.iter().filter(|f| f.error.is_some()).count();
    Ok(XvalReport {
        folds,
        summaries,
        failed_folds,
    })
}

type VariantScores = Vec<(Vec<f32>, Vec<bool>)>;

fn run_fold(
    images: &[LabeledImage],
    train_ids: &[usize],
    test_ids: &[usize],
    cfg: &RunConfig,
    fold: usize,
) -> Result<(Vec<FoldEval>, VariantScores)> {
    let train_images: Vec<LabeledImage> = train_ids.iter().map(|&id| images[id].clone()).collect();
    let mut policy = cfg.policy();
    policy.seed = cfg.seed.wrapping_add(fold as u64);
    let dataset = crate::preprocess::build_dataset(&train_images, &policy)?;
    let samples = dataset.samples();
    if samples.len() < 4 {
        return Err(Error::Config(format!(
            "fold {fold}: only {} patches available",
            samples.len()
        )));
    }
    let n_val = ((samples.len() as f64 * cfg.val_fraction as f64).round() as usize)
        .clamp(1, samples.len() - 1);
    let (train, val) = samples.split_at(samples.len() - n_val);

    let mut net = Network::reference(cfg.seed.wrapping_add(fold as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + fold as u64));
    for _ in 0..cfg.epochs {
        train_epoch(&mut net, train, cfg.batch_size, cfg.learning_rate, &mut rng)?;
    }

    let mut evals = Vec::with_capacity(3);
    let mut fold_scores = Vec::with_capacity(3);
    let (eval, s, l) = evaluate_on_images(&net, images, test_ids, cfg)?;
    evals.push(eval);
    fold_scores.push((s, l));

    let mut schedule = cfg.schedule();
    schedule.seed = cfg.seed.wrapping_add(2000 + fold as u64);
    quantize_retrain(&mut net, train, val, &schedule)?;
    let (eval, s, l) = evaluate_on_images(&net, images, test_ids, cfg)?;
    evals.push(eval);
    fold_scores.push((s, l));

    schedule.seed = cfg.seed.wrapping_add(3000 + fold as u64);
    let outcome = prune_retrain(&mut net, train, val, &schedule)?;
    if outcome.stop == PruneStop::LayerEmptied {
        // rolled back to the pre-round state; still evaluable
    }
    let (eval, s, l) = evaluate_on_images(&net, images, test_ids, cfg)?;
    evals.push(eval);
    fold_scores.push((s, l));

    Ok((evals, fold_scores))
}

/// The fold/variant table as comma-separated text.
pub fn xval_csv(report: &XvalReport) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.4}")).unwrap_or_default()
    }
    let mut out = String::from("fold,variant,sen,spe,acc,dice,auc\n");
    for fold in &report.folds {
        if let Some(err) = &fold.error {
            out.push_str(&format!("{},failed,{err},,,,\n", fold.fold));
            continue;
        }
        for (variant, eval) in fold.evals.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4}\n",
                fold.fold,
                VARIANT_NAMES[variant],
                opt(eval.metrics.sen),
                opt(eval.metrics.spe),
                opt(eval.metrics.acc),
                opt(eval.metrics.dice),
                eval.auc,
            ));
        }
    }
    for s in &report.summaries {
        out.push_str(&format!(
            "mean,{},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4}\n",
            s.name,
            s.sen.mean,
            s.sen.std,
            s.spe.mean,
            s.spe.std,
            s.acc.mean,
            s.acc.std,
            s.dice.mean,
            s.dice.std,
            s.auc.mean,
            s.auc.std,
        ));
        out.push_str(&format!(
            "pooled,{},{},{},{},{},{:.4}\n",
            s.name,
            opt(s.pooled.metrics.sen),
            opt(s.pooled.metrics.spe),
            opt(s.pooled.metrics.acc),
            opt(s.pooled.metrics.dice),
            s.pooled.auc,
        ));
    }
    out
}

/// ROC points as comma-separated text for external plotting.
pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (x, y) in points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// Brute-force pairwise AUC oracle: fraction of positive/negative pairs
/// ordered correctly, ties counted half.
pub fn pairwise_auc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    let mut correct = 0.0f64;
    let mut total = 0.0f64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            total += 1.0;
            if scores[i] > scores[j] {
                correct += 1.0;
            } else if scores[i] == scores[j] {
                correct += 0.5;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::UndefinedAuc("need both classes".to_string()));
    }
    Ok(correct / total)
}
