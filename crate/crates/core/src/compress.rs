//! Network compression passes: ternary quantization of dense layers and
//! variance-thresholded magnitude pruning of conv layers, each with a
//! retraining loop that stops once validation accuracy recovers.
//!
//! Quantized layers train on shadow weights: the forward pass sees ternary
//! codes, gradients update the full-precision copies, and the codes are
//! refreshed after every step. Pruning zeroes weights whose magnitude falls
//! below `k` times a spread statistic of the layer's still-active weights;
//! masks only ever shrink.

use crate::network::{accuracy, train_epoch, Layer, Network, Sample};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ternary weight codes: one value in {-1, 0, +1} per source weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCode {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl TernaryCode {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "ternary code length",
                vec![expected],
                vec![values.len()],
            ));
        }
        for (i, &v) in values.iter().enumerate() {
            if v != -1.0 && v != 0.0 && v != 1.0 {
                return Err(Error::Config(format!(
                    "ternary code value {v} at index {i}, must be -1, 0 or +1"
                )));
            }
        }
        Ok(TernaryCode { shape, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Counts of (-1, 0, +1) values.
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0usize; 3];
        for &v in &self.values {
            if v < 0.0 {
                h[0] += 1;
            } else if v > 0.0 {
                h[2] += 1;
            } else {
                h[1] += 1;
            }
        }
        h
    }
}

/// Spread statistic used for the prune threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Variance,
    StdDev,
}

impl ThresholdMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(ThresholdMode::Variance),
            "stddev" => Ok(ThresholdMode::StdDev),
            other => Err(Error::Config(format!(
                "unknown threshold_mode '{other}' (expected 'variance' or 'stddev')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ThresholdMode::Variance => "variance",
            ThresholdMode::StdDev => "stddev",
        }
    }
}

/// Parameters steering the quantize-retrain and prune-retrain loops.
#[derive(Debug, Clone)]
pub struct CompressionSchedule {
    pub quant_rounds: usize,
    pub prune_rounds: usize,
    pub retrain_epochs_per_round: usize,
    /// Prune constant: threshold = k * spread statistic. 0 disables pruning.
    pub k: f32,
    pub threshold_mode: ThresholdMode,
    /// Largest tolerated drop of validation accuracy below the baseline.
    pub tolerance: f32,
    /// Extend ternary quantization to conv layers as well as dense ones.
    pub quantize_conv: bool,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl CompressionSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.quant_rounds == 0 || self.prune_rounds == 0 || self.retrain_epochs_per_round == 0 {
            return Err(Error::Config(
                "schedule rounds and retrain epochs must be at least 1".to_string(),
            ));
        }
        if !self.k.is_finite() || self.k < 0.0 {
            return Err(Error::Config(format!(
                "prune constant k = {} must be finite and nonnegative",
                self.k
            )));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config(format!(
                "tolerance {} must be nonnegative (infinity allowed)",
                self.tolerance
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// One row of a compression pass's round history.
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub round: usize,
    pub layer: String,
    pub threshold: Option<f32>,
    pub active_count: usize,
    pub val_accuracy: f32,
}

/// History rows rendered as a comma-separated table.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("round,layer,threshold,active_count,val_accuracy\n");
    for r in rows {
        let threshold = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.layer, threshold, r.active_count, r.val_accuracy
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub history: Vec<HistoryRow>,
    pub baseline_accuracy: f32,
    pub final_accuracy: f32,
    /// False when accuracy never recovered and the best round was kept.
    pub tolerance_met: bool,
}

/// Why a prune-retrain loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneStop {
    RoundsExhausted,
    /// The next round would have dropped accuracy below tolerance; it was
    /// rolled back.
    AccuracyFloor,
    /// A round emptied a conv layer; it was rolled back.
    LayerEmptied,
    /// The threshold stopped removing weights (always the case for k = 0).
    Converged,
}

impl PruneStop {
    pub fn describe(&self) -> &'static str {
        match self {
            PruneStop::RoundsExhausted => "prune rounds exhausted",
            PruneStop::AccuracyFloor => "stopped: next round fell below the accuracy floor",
            PruneStop::LayerEmptied => "stopped: a round would have emptied a conv layer",
            PruneStop::Converged => "converged: threshold removes no further weights",
        }
    }
}

/// Final per-conv-layer pruning bookkeeping.
#[derive(Debug, Clone)]
pub struct PruneRecord {
    /// Index among the network's conv layers, in order.
    pub conv_index: usize,
    pub threshold_used: f32,
    /// Last committed prune round; 0 if the layer was never pruned.
    pub iteration: usize,
    pub active_count: usize,
    pub original_count: usize,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub history: Vec<HistoryRow>,
    pub baseline_accuracy: f32,
    pub final_accuracy: f32,
    pub stop: PruneStop,
    pub records: Vec<PruneRecord>,
}

// ---------------------------------------------------------------------------
// Quantizers
// ---------------------------------------------------------------------------

/// Two-way sign: +1 where `w >= 0`, else -1.
pub fn binarize_deterministic(weights: &Tensor) -> Result<Tensor> {
    if !weights.all_finite() {
        return Err(Error::NonFinite("binarize_deterministic input".to_string()));
    }
    let data = weights
        .iter()
        .map(|&w| if w >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(weights.shape().to_vec(), data)
}

/// `clamp((x + 1) / 2, 0, 1)`.
pub fn hard_sigmoid(x: f32) -> f32 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Each weight becomes +1 with probability `hard_sigmoid(w)`, else -1.
pub fn binarize_stochastic(weights: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let data = weights
        .iter()
        .map(|&w| {
            if rng.random::<f32>() < hard_sigmoid(w) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Tensor::new(weights.shape().to_vec(), data).expect("same shape")
}

/// Three-way sign: -1, 0 or +1 by the sign of each weight.
pub fn ternarize(weights: &Tensor) -> Result<TernaryCode> {
    if !weights.all_finite() {
        return Err(Error::NonFinite("ternarize input".to_string()));
    }
    let values = weights
        .iter()
        .map(|&w| {
            if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    TernaryCode::new(weights.shape().to_vec(), values)
}

// ---------------------------------------------------------------------------
// Prune threshold
// ---------------------------------------------------------------------------

/// Threshold `k * Var(active weights)` or `k * StdDev(active weights)`
/// (population statistics). Positions already masked off are excluded.
pub fn compute_prune_threshold(
    weights: &Tensor,
    mask: Option<&Tensor>,
    k: f32,
    mode: ThresholdMode,
) -> Result<f32> {
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::Config(format!(
            "prune constant k = {k} must be finite and positive"
        )));
    }
    if let Some(m) = mask {
        if m.shape() != weights.shape() {
            return Err(Error::shape(
                "prune mask",
                weights.shape().to_vec(),
                m.shape().to_vec(),
            ));
        }
    }
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for (i, &w) in weights.iter().enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("prune threshold input".to_string()));
        }
        count += 1;
        sum += w as f64;
    }
    if count == 0 {
        return Err(Error::DegenerateLayer(
            "all weights pruned; threshold statistic undefined".to_string(),
        ));
    }
    let mean = sum / count as f64;
    let mut var = 0.0f64;
    for (i, &w) in weights.iter().enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        let d = w as f64 - mean;
        var += d * d;
    }
    var /= count as f64;
    let stat = match mode {
        ThresholdMode::Variance => var,
        ThresholdMode::StdDev => var.sqrt(),
    };
    Ok((k as f64 * stat) as f32)
}

// ---------------------------------------------------------------------------
// Quantize-retrain
// ---------------------------------------------------------------------------

/// Applies ternary codes to every dense layer, then retrains (shadow
/// updates, requantize each step) until validation accuracy is back within
/// `tolerance` of the pre-quantization baseline or rounds run out. When the
/// tolerance is never met the best round's network is kept and the outcome
/// is flagged.
pub fn quantize_retrain(
    net: &mut Network,
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    schedule: &CompressionSchedule,
) -> Result<QuantizeOutcome> {
    schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "quantize_retrain needs non-empty train and validation sets".to_string(),
        ));
    }
    let mut quant_total = 0usize;
    let mut dense_total = 0usize;
    for layer in &net.layers {
        match layer {
            Layer::Dense(d) => {
                dense_total += d.weights.len();
                quant_total += d.weights.len();
            }
            Layer::Conv(c) if schedule.quantize_conv => quant_total += c.weights.len(),
            _ => {}
        }
    }
    if dense_total == 0 {
        return Err(Error::Config(
            "network has no dense layers to quantize".to_string(),
        ));
    }
    let baseline = accuracy(net, val)?;

    for layer in &mut net.layers {
        match layer {
            Layer::Dense(d) => d.quant = Some(ternarize(&d.weights)?),
            Layer::Conv(c) if schedule.quantize_conv => c.quant = Some(ternarize(&c.weights)?),
            _ => {}
        }
    }

    let label = if schedule.quantize_conv {
        "all"
    } else {
        "dense"
    };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut history = Vec::new();
    let mut acc = accuracy(net, val)?;
    history.push(HistoryRow {
        round: 0,
        layer: label.to_string(),
        threshold: None,
        active_count: quant_total,
        val_accuracy: acc,
    });

    let mut best_net = net.clone();
    let mut best_acc = acc;
    let mut tolerance_met = acc >= baseline - schedule.tolerance;
    let mut round = 0;
    while !tolerance_met && round < schedule.quant_rounds {
        round += 1;
        for _ in 0..schedule.retrain_epochs_per_round {
            train_epoch(
                net,
                train,
                schedule.batch_size,
                schedule.learning_rate,
                &mut rng,
            )?;
        }
        acc = accuracy(net, val)?;
        history.push(HistoryRow {
            round,
            layer: label.to_string(),
            threshold: None,
            active_count: quant_total,
            val_accuracy: acc,
        });
        if acc > best_acc {
            best_acc = acc;
            best_net = net.clone();
        }
        tolerance_met = acc >= baseline - schedule.tolerance;
    }

    let final_accuracy = if tolerance_met {
        acc
    } else {
        *net = best_net;
        best_acc
    };
    Ok(QuantizeOutcome {
        history,
        baseline_accuracy: baseline,
        final_accuracy,
        tolerance_met,
    })
}

// ---------------------------------------------------------------------------
// Prune-retrain
// ---------------------------------------------------------------------------

/// Rounds of conv-layer magnitude pruning (`|w| < threshold`) followed by
/// retraining with masked gradients. Dense layers must already be
/// quantized; they stay ternary throughout. A round that empties a layer
/// or drops validation accuracy below tolerance is rolled back.
pub fn prune_retrain(
    net: &mut Network,
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    schedule: &CompressionSchedule,
) -> Result<PruneOutcome> {
    schedule.validate()?;
    if !net.dense_layers_quantized() {
        return Err(Error::PipelineOrder(
            "prune_retrain requires quantized dense layers; run quantize_retrain first".to_string(),
        ));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "prune_retrain needs non-empty train and validation sets".to_string(),
        ));
    }
    let conv_count = net
        .layers
        .iter()
        .filter(|l| matches!(l, Layer::Conv(_)))
        .count();
    if conv_count == 0 {
        return Err(Error::Config(
            "network has no conv layers to prune".to_string(),
        ));
    }

    let baseline = accuracy(net, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut history = Vec::new();
    let mut committed: Vec<Option<(f32, usize)>> = vec![None; conv_count];
    let mut last_acc = baseline;
    let mut stop = PruneStop::RoundsExhausted;

    'rounds: for round in 1..=schedule.prune_rounds {
        let snapshot = net.clone();
        let mut round_rows: Vec<(usize, f32, usize)> = Vec::new();
        let mut any_pruned = false;

        let mut conv_index = 0usize;
        for layer in &mut net.layers {
            let Layer::Conv(c) = layer else { continue };
            let threshold = if schedule.k == 0.0 {
                0.0
            } else {
                compute_prune_threshold(
                    &c.weights,
                    c.mask.as_ref(),
                    schedule.k,
                    schedule.threshold_mode,
                )?
            };
            let had_mask = c.mask.is_some();
            let mut mask = match c.mask.take() {
                Some(m) => m,
                None => Tensor::filled(c.weights.shape().to_vec(), 1.0),
            };
            let mut active = 0usize;
            let mut layer_pruned = false;
            for (mv, wv) in mask
                .data_mut()
                .iter_mut()
                .zip(c.weights.data_mut().iter_mut())
            {
                if *mv == 0.0 {
                    continue;
                }
                if wv.abs() < threshold {
                    *mv = 0.0;
                    *wv = 0.0;
                    layer_pruned = true;
                    any_pruned = true;
                } else {
                    active += 1;
                }
            }
            if active == 0 {
                *net = snapshot;
                stop = PruneStop::LayerEmptied;
                break 'rounds;
            }
            // An untouched maskless layer stays maskless so its canonical
            // serialization does not change.
            if had_mask || layer_pruned {
                c.mask = Some(mask);
            }
            if c.quant.is_some() {
                c.quant = Some(ternarize(&c.weights)?);
            }
            round_rows.push((conv_index, threshold, active));
            conv_index += 1;
        }

        if !any_pruned {
            for &(ci, threshold, active) in &round_rows {
                history.push(HistoryRow {
                    round,
                    layer: format!("conv{ci}"),
                    threshold: Some(threshold),
                    active_count: active,
                    val_accuracy: last_acc,
                });
            }
            stop = PruneStop::Converged;
            break;
        }

        for _ in 0..schedule.retrain_epochs_per_round {
            train_epoch(
                net,
                train,
                schedule.batch_size,
                schedule.learning_rate,
                &mut rng,
            )?;
        }
        let acc = accuracy(net, val)?;
        for &(ci, threshold, active) in &round_rows {
            history.push(HistoryRow {
                round,
                layer: format!("conv{ci}"),
                threshold: Some(threshold),
                active_count: active,
                val_accuracy: acc,
            });
        }
        if acc < baseline - schedule.tolerance {
            *net = snapshot;
            stop = PruneStop::AccuracyFloor;
            break;
        }
        for &(ci, threshold, _) in &round_rows {
            committed[ci] = Some((threshold, round));
        }
        last_acc = acc;
    }

    let mut records = Vec::with_capacity(conv_count);
    let mut ci = 0usize;
    for layer in &net.layers {
        if let Layer::Conv(c) = layer {
            let (threshold_used, iteration) = committed[ci].unwrap_or((0.0, 0));
            records.push(PruneRecord {
                conv_index: ci,
                threshold_used,
                iteration,
                active_count: c.active_count(),
                original_count: c.weights.len(),
            });
            ci += 1;
        }
    }
    let final_accuracy = accuracy(net, val)?;
    Ok(PruneOutcome {
        history,
        baseline_accuracy: baseline,
        final_accuracy,
        stop,
        records,
    })
}

// ---------------------------------------------------------------------------
// Sparsity report
// ---------------------------------------------------------------------------

/// Per-parameterized-layer sparsity/quantization summary.
#[derive(Debug, Clone)]
pub struct LayerSparsity {
    pub layer_index: usize,
    pub kind: &'static str,
    pub original_count: usize,
    pub active_count: usize,
    pub removal_fraction: f64,
    pub quantized: bool,
    /// Counts of (-1, 0, +1) codes on quantized layers.
    pub histogram: Option<[usize; 3]>,
}

/// Summarizes every conv and dense layer; dense layers are never mask-
/// pruned, so their removal fraction is 0 and quantization is reported via
/// the code histogram instead.
pub fn sparsity_report(net: &Network) -> Vec<LayerSparsity> {
    let mut rows = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                let original = c.weights.len();
                let active = c.active_count();
                rows.push(LayerSparsity {
                    layer_index: i,
                    kind: "conv",
                    original_count: original,
                    active_count: active,
                    removal_fraction: 1.0 - active as f64 / original as f64,
                    quantized: c.quant.is_some(),
                    histogram: c.quant.as_ref().map(|q| q.histogram()),
                });
            }
            Layer::Dense(d) => {
                let original = d.weights.len();
                rows.push(LayerSparsity {
                    layer_index: i,
                    kind: "dense",
                    original_count: original,
                    active_count: original,
                    removal_fraction: 0.0,
                    quantized: d.quant.is_some(),
                    histogram: d.quant.as_ref().map(|q| q.histogram()),
                });
            }
            _ => {}
        }
    }
    rows
}

/// Fraction of conv weights removed across the whole network.
pub fn conv_removal_fraction(net: &Network) -> f64 {
    let mut original = 0usize;
    let mut active = 0usize;
    for layer in &net.layers {
        if let Layer::Conv(c) = layer {
            original += c.weights.len();
            active += c.active_count();
        }
    }
    if original == 0 {
        0.0
    } else {
        1.0 - active as f64 / original as f64
    }
}
