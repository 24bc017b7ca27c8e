//! Plain-text `key=value` run configuration with full defaults, strict
//! unknown-key rejection, and range checks. The effective configuration is
//! echoed into every run log so outputs are attributable to exact settings.

use crate::compress::{CompressionSchedule, ThresholdMode};
use crate::preprocess::SamplePolicy;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the training patches held out for validation.
    pub val_fraction: f32,
    pub per_image_sample_count: usize,
    pub vessel_fraction: f64,
    pub equalize_window: usize,
    pub quant_rounds: usize,
    pub prune_rounds: usize,
    pub retrain_epochs_per_round: usize,
    pub prune_k: f32,
    pub threshold_mode: ThresholdMode,
    pub tolerance: f32,
    /// Experimental: quantize conv layers too (the negative-result mode).
    pub quantize_conv: bool,
    pub folds: usize,
    pub segment_threshold: f32,
    /// Test pixels per image during evaluation; 0 = full census.
    pub test_subsample: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_images: usize,
    pub synth_image_size: usize,
    /// Worker threads; 0 keeps the library default.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 3,
            val_fraction: 0.1,
            per_image_sample_count: 2000,
            vessel_fraction: 0.5,
            equalize_window: 31,
            quant_rounds: 8,
            prune_rounds: 3,
            retrain_epochs_per_round: 2,
            prune_k: 1.0,
            threshold_mode: ThresholdMode::StdDev,
            tolerance: 0.01,
            quantize_conv: false,
            folds: 5,
            segment_threshold: 0.5,
            test_subsample: 0,
            synth_train: 20000,
            synth_test: 5000,
            synth_images: 10,
            synth_image_size: 64,
            threads: 0,
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "per_image_sample_count" => self.per_image_sample_count = num(key, value)?,
            "vessel_fraction" => self.vessel_fraction = num(key, value)?,
            "equalize_window" => self.equalize_window = num(key, value)?,
            "quant_rounds" => self.quant_rounds = num(key, value)?,
            "prune_rounds" => self.prune_rounds = num(key, value)?,
            "retrain_epochs_per_round" => self.retrain_epochs_per_round = num(key, value)?,
            "prune_k" => self.prune_k = num(key, value)?,
            "threshold_mode" => self.threshold_mode = ThresholdMode::parse(value)?,
            "tolerance" => self.tolerance = num(key, value)?,
            "quantize_conv" => {
                self.quantize_conv = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value '{value}' for quantize_conv (true/false)"
                        )))
                    }
                }
            }
            "folds" => self.folds = num(key, value)?,
            "segment_threshold" => self.segment_threshold = num(key, value)?,
            "test_subsample" => self.test_subsample = num(key, value)?,
            "synth_train" => self.synth_train = num(key, value)?,
            "synth_test" => self.synth_test = num(key, value)?,
            "synth_images" => self.synth_images = num(key, value)?,
            "synth_image_size" => self.synth_image_size = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: String) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg))
            }
        }
        check(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            format!(
                "learning_rate {} must be finite and positive",
                self.learning_rate
            ),
        )?;
        check(
            self.batch_size >= 1,
            "batch_size must be at least 1".to_string(),
        )?;
        check(self.epochs >= 1, "epochs must be at least 1".to_string())?;
        check(
            self.val_fraction > 0.0 && self.val_fraction <= 0.5,
            format!("val_fraction {} must lie in (0, 0.5]", self.val_fraction),
        )?;
        check(
            self.per_image_sample_count >= 2,
            "per_image_sample_count must be at least 2".to_string(),
        )?;
        check(
            self.vessel_fraction > 0.0 && self.vessel_fraction < 1.0,
            format!(
                "vessel_fraction {} must lie strictly between 0 and 1",
                self.vessel_fraction
            ),
        )?;
        check(
            self.equalize_window >= 3 && self.equalize_window % 2 == 1,
            format!(
                "equalize_window {} must be odd and at least 3",
                self.equalize_window
            ),
        )?;
        check(
            self.quant_rounds >= 1 && self.prune_rounds >= 1 && self.retrain_epochs_per_round >= 1,
            "quant_rounds, prune_rounds and retrain_epochs_per_round must be at least 1"
                .to_string(),
        )?;
        check(
            self.prune_k.is_finite() && self.prune_k >= 0.0,
            format!("prune_k {} must be finite and nonnegative", self.prune_k),
        )?;
        check(
            !self.tolerance.is_nan() && self.tolerance >= 0.0,
            format!(
                "tolerance {} must be nonnegative (inf allowed)",
                self.tolerance
            ),
        )?;
        check(self.folds >= 2, "folds must be at least 2".to_string())?;
        check(
            self.segment_threshold.is_finite() && self.segment_threshold >= 0.0,
            format!(
                "segment_threshold {} must be finite and nonnegative",
                self.segment_threshold
            ),
        )?;
        check(
            self.synth_train >= 2 && self.synth_test >= 2,
            "synth_train and synth_test must be at least 2".to_string(),
        )?;
        check(
            self.synth_images >= 2 && self.synth_image_size >= 16,
            "need at least 2 synthetic images of size at least 16".to_string(),
        )?;
        Ok(())
    }

    /// Effective settings as `# key=value` log-header lines, fixed order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed={}", self.seed);
        let _ = writeln!(s, "# learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "# batch_size={}", self.batch_size);
        let _ = writeln!(s, "# epochs={}", self.epochs);
        let _ = writeln!(s, "# val_fraction={}", self.val_fraction);
        let _ = writeln!(
            s,
            "# per_image_sample_count={}",
            self.per_image_sample_count
        );
        let _ = writeln!(s, "# vessel_fraction={}", self.vessel_fraction);
        let _ = writeln!(s, "# equalize_window={}", self.equalize_window);
        let _ = writeln!(s, "# quant_rounds={}", self.quant_rounds);
        let _ = writeln!(s, "# prune_rounds={}", self.prune_rounds);
        let _ = writeln!(
            s,
            "# retrain_epochs_per_round={}",
            self.retrain_epochs_per_round
        );
        let _ = writeln!(s, "# prune_k={}", self.prune_k);
        let _ = writeln!(s, "# threshold_mode={}", self.threshold_mode.name());
        let _ = writeln!(s, "# tolerance={}", self.tolerance);
        let _ = writeln!(s, "# quantize_conv={}", self.quantize_conv);
        let _ = writeln!(s, "# folds={}", self.folds);
        let _ = writeln!(s, "# segment_threshold={}", self.segment_threshold);
        let _ = writeln!(s, "# test_subsample={}", self.test_subsample);
        let _ = writeln!(s, "# synth_train={}", self.synth_train);
        let _ = writeln!(s, "# synth_test={}", self.synth_test);
        let _ = writeln!(s, "# synth_images={}", self.synth_images);
        let _ = writeln!(s, "# synth_image_size={}", self.synth_image_size);
        let _ = writeln!(s, "# threads={}", self.threads);
        s
    }

    pub fn schedule(&self) -> CompressionSchedule {
        CompressionSchedule {
            quant_rounds: self.quant_rounds,
            prune_rounds: self.prune_rounds,
            retrain_epochs_per_round: self.retrain_epochs_per_round,
            k: self.prune_k,
            threshold_mode: self.threshold_mode,
            tolerance: self.tolerance,
            quantize_conv: self.quantize_conv,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn policy(&self) -> SamplePolicy {
        SamplePolicy {
            per_image_sample_count: self.per_image_sample_count,
            vessel_fraction: self.vessel_fraction,
            seed: self.seed,
        }
    }
}
