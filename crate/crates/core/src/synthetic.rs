//! Synthetic desk-scale stand-in for fundus data: bright 1-2 pixel lines
//! at random orientations over textured background. Patch sets feed the
//! classifier directly; full images exercise the whole enhancement and
//! segmentation pipeline.

use crate::network::{Sample, PATCH_SIZE};
use crate::preprocess::{FundusImage, Plane};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Owned labeled patches; borrow them as training samples via [`Self::samples`].
#[derive(Debug, Clone)]
pub struct SyntheticPatches {
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl SyntheticPatches {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.patches
            .iter()
            .zip(self.labels.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn perpendicular_distance(x: f32, y: f32, cx: f32, cy: f32, theta: f32) -> f32 {
    // Distance from (x, y) to the line through (cx, cy) with direction
    // (cos theta, sin theta).
    ((x - cx) * -theta.sin() + (y - cy) * theta.cos()).abs()
}

/// Textured background value before any line is drawn.
fn background_value(
    x: usize,
    y: usize,
    half: f32,
    base: f32,
    grad_x: f32,
    grad_y: f32,
    rng: &mut ChaCha8Rng,
) -> f32 {
    base + grad_x * (x as f32 - half) / half
        + grad_y * (y as f32 - half) / half
        + rng.random::<f32>() * 0.25
}

/// Balanced 9x9 patch set: label-1 patches have a bright line through the
/// center pixel; label-0 patches carry either pure texture or a distractor
/// line at least 2 px away from the center. Values are quantized to 8 bits
/// to match patches extracted from real images.
pub fn synthetic_patches(count: usize, seed: u64) -> Result<SyntheticPatches> {
    if count == 0 {
        return Err(Error::Config(
            "synthetic patch count must be positive".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (PATCH_SIZE / 2) as f32;
    let n_vessel = count / 2;
    let mut patches = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);

    for i in 0..count {
        let vessel = i < n_vessel;
        let base = 0.15 + rng.random::<f32>() * 0.30;
        let grad_x = rng.random::<f32>() * 0.16 - 0.08;
        let grad_y = rng.random::<f32>() * 0.16 - 0.08;
        let theta = rng.random::<f32>() * std::f32::consts::PI;
        let width = if rng.random::<f32>() < 0.5 {
            1.0f32
        } else {
            2.0
        };
        let boost = 0.30 + rng.random::<f32>() * 0.15;

        // Line placement: through the center (with sub-pixel jitter) for
        // vessels; offset well clear of the center for distractors; no
        // line at all for half of the background patches.
        let line = if vessel {
            let jitter = rng.random::<f32>() * 0.6 - 0.3;
            Some((half + jitter * -theta.sin(), half + jitter * theta.cos()))
        } else if rng.random::<f32>() < 0.5 {
            let offset = 2.5 + rng.random::<f32>() * 1.5;
            let side = if rng.random::<f32>() < 0.5 { 1.0 } else { -1.0 };
            Some((
                half + side * offset * -theta.sin(),
                half + side * offset * theta.cos(),
            ))
        } else {
            None
        };

        let mut data = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                let mut v = background_value(x, y, half, base, grad_x, grad_y, &mut rng);
                if let Some((cx, cy)) = line {
                    if perpendicular_distance(x as f32, y as f32, cx, cy, theta) <= width / 2.0 {
                        v += boost;
                    }
                }
                let quantized = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                data.push(quantized);
            }
        }
        patches.push(Tensor::new([PATCH_SIZE, PATCH_SIZE, 1], data)?);
        labels.push(usize::from(vessel));
    }

    // Shuffle so class labels are not positional.
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        patches.swap(i, j);
        labels.swap(i, j);
    }
    Ok(SyntheticPatches { patches, labels })
}

/// Synthetic whole images: textured background crossed by bright chords,
/// with a pixel-exact vessel label plane. The RGB channels are equal, so
/// the real grayscale/equalization pipeline applies unchanged.
pub fn synthetic_images(
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(String, FundusImage, Plane)>> {
    if count == 0 || size < 16 {
        return Err(Error::Config(format!(
            "need at least 1 image of size >= 16, got {count} of {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let half = size as f32 / 2.0;

    for i in 0..count {
        let base = 0.15 + rng.random::<f32>() * 0.30;
        let grad_x = rng.random::<f32>() * 0.16 - 0.08;
        let grad_y = rng.random::<f32>() * 0.16 - 0.08;
        let n_lines = 3 + rng.random_range(0..3usize);
        let lines: Vec<(f32, f32, f32, f32, f32)> = (0..n_lines)
            .map(|_| {
                let theta = rng.random::<f32>() * std::f32::consts::PI;
                let cx = rng.random::<f32>() * size as f32;
                let cy = rng.random::<f32>() * size as f32;
                let width = 1.0 + rng.random::<f32>();
                let boost = 0.30 + rng.random::<f32>() * 0.15;
                (theta, cx, cy, width, boost)
            })
            .collect();

        let mut gray = Vec::with_capacity(size * size);
        let mut labels = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut v = background_value(x, y, half, base, grad_x, grad_y, &mut rng);
                let mut vessel = false;
                for &(theta, cx, cy, width, boost) in &lines {
                    if perpendicular_distance(x as f32, y as f32, cx, cy, theta) <= width / 2.0 {
                        v += boost;
                        vessel = true;
                    }
                }
                gray.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                labels.push(if vessel { 255u8 } else { 0 });
            }
        }
        let image = FundusImage::new(size, size, gray.clone(), gray.clone(), gray)?;
        let labels = Plane::new(size, size, labels)?;
        out.push((format!("synthetic{i:02}"), image, labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_balanced_and_unit_range() {
        let set = synthetic_patches(1000, 3).unwrap();
        assert_eq!(set.len(), 1000);
        assert_eq!(set.labels.iter().sum::<usize>(), 500);
        for p in &set.patches {
            assert_eq!(p.shape(), &[9, 9, 1]);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn patches_are_deterministic_per_seed() {
        let a = synthetic_patches(50, 9).unwrap();
        let b = synthetic_patches(50, 9).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.patches.iter().zip(&b.patches) {
            assert_eq!(x.data(), y.data());
        }
        let c = synthetic_patches(50, 10).unwrap();
        assert_ne!(
            a.patches[0].data(),
            c.patches[0].data(),
            "different seed should change data"
        );
    }

    #[test]
    fn vessel_patches_have_brighter_centers_on_average() {
        let set = synthetic_patches(2000, 4).unwrap();
        let mut vessel_center = 0.0f32;
        let mut background_center = 0.0f32;
        let mut nv = 0;
        let mut nb = 0;
        for (p, &l) in set.patches.iter().zip(&set.labels) {
            let center = p.data()[4 * 9 + 4];
            if l == 1 {
                vessel_center += center;
                nv += 1;
            } else {
                background_center += center;
                nb += 1;
            }
        }
        let dv = vessel_center / nv as f32;
        let db = background_center / nb as f32;
        assert!(
            dv > db + 0.15,
            "vessel centers ({dv}) should be brighter than background ({db})"
        );
    }

    #[test]
    fn patch_values_are_8_bit_quantized() {
        let set = synthetic_patches(10, 5).unwrap();
        for p in &set.patches {
            for &v in p.iter() {
                let back = (v * 255.0).round() / 255.0;
                assert!((v - back).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn images_have_vessel_labels_and_valid_planes() {
        let images = synthetic_images(3, 32, 8).unwrap();
        assert_eq!(images.len(), 3);
        for (name, img, labels) in &images {
            assert!(name.starts_with("synthetic"));
            assert_eq!(img.width(), 32);
            assert_eq!(labels.width(), 32);
            let vessel_px = labels.data().iter().filter(|&&v| v > 127).count();
            let frac = vessel_px as f64 / (32.0 * 32.0);
            assert!(
                (0.02..0.60).contains(&frac),
                "vessel fraction {frac} out of plausible range"
            );
        }
    }

    #[test]
    fn images_are_deterministic_per_seed() {
        let a = synthetic_images(2, 24, 5).unwrap();
        let b = synthetic_images(2, 24, 5).unwrap();
        for ((_, _, la), (_, _, lb)) in a.iter().zip(&b) {
            assert_eq!(la.data(), lb.data());
        }
    }
}
