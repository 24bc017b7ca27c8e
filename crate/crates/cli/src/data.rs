//! Shared data assembly: either the built-in synthetic patch task or a
//! directory of image/label pairs.

use std::path::Path;
use vesselnet::config::RunConfig;
use vesselnet::modelio::{enhance_pairs, load_stare};
use vesselnet::network::Sample;
use vesselnet::preprocess::{build_dataset, LabeledImage, PatchDataset};
use vesselnet::synthetic::{synthetic_patches, SyntheticPatches};
use vesselnet::{Error, Result};

pub enum TaskData {
    Synthetic {
        train: SyntheticPatches,
        test: SyntheticPatches,
    },
    Images {
        dataset: PatchDataset,
        images: Vec<LabeledImage>,
    },
}

/// Loads patches from `--data` or generates the synthetic task.
pub fn load_task(cfg: &RunConfig, data: Option<&Path>, synthetic: bool) -> Result<TaskData> {
    if synthetic {
        let train = synthetic_patches(cfg.synth_train, cfg.seed)?;
        let test = synthetic_patches(cfg.synth_test, cfg.seed.wrapping_add(1))?;
        println!(
            "data=synthetic train_patches={} test_patches={}",
            train.len(),
            test.len()
        );
        return Ok(TaskData::Synthetic { train, test });
    }
    let Some(dir) = data else {
        return Err(Error::Config(
            "either --data <DIR> or --synthetic is required".to_string(),
        ));
    };
    let images = load_images(cfg, dir)?;
    let dataset = build_dataset(&images, &cfg.policy())?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "data={} images={} patches={}",
        dir.display(),
        images.len(),
        dataset.len()
    );
    Ok(TaskData::Images { dataset, images })
}

/// Loads and enhances every image/label pair in `dir`.
pub fn load_images(cfg: &RunConfig, dir: &Path) -> Result<Vec<LabeledImage>> {
    let stare = load_stare(dir)?;
    for w in &stare.warnings {
        eprintln!("warning: {w}");
    }
    if stare.pairs.is_empty() {
        return Err(Error::Config(format!(
            "no image/label pairs found in {}",
            dir.display()
        )));
    }
    enhance_pairs(&stare, cfg.equalize_window)
}

fn split_tail(samples: Vec<Sample<'_>>, val_fraction: f32) -> (Vec<Sample<'_>>, Vec<Sample<'_>>) {
    let n = samples.len();
    let n_val = ((n as f32 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut train = samples;
    let val = train.split_off(n - n_val);
    (train, val)
}

impl TaskData {
    /// Training/validation split; the sets were already shuffled when built,
    /// so the validation tail is a uniform holdout.
    pub fn train_val(&self, cfg: &RunConfig) -> (Vec<Sample<'_>>, Vec<Sample<'_>>) {
        let samples = match self {
            TaskData::Synthetic { train, .. } => train.samples(),
            TaskData::Images { dataset, .. } => dataset.samples(),
        };
        split_tail(samples, cfg.val_fraction)
    }

    /// Held-out measurement set; only the synthetic task carries one.
    pub fn test_samples(&self) -> Option<Vec<Sample<'_>>> {
        match self {
            TaskData::Synthetic { test, .. } => Some(test.samples()),
            TaskData::Images { .. } => None,
        }
    }
}
