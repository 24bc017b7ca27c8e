//! Fundus image enhancement and patch dataset construction: channel-mean
//! grayscale, local histogram equalization, mirror-padded 9x9 patch
//! extraction, class-balanced sampling, and image-level fold splits.

use crate::network::{Sample, PATCH_SIZE};
use crate::pnm::PnmImage;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A single 8-bit image plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "plane dimensions {width}x{height} must be positive"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "plane raster length",
                vec![width * height],
                vec![data.len()],
            ));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_pnm(img: &PnmImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::Pnm(format!(
                "expected a single-channel image, found {} channels",
                img.channels
            )));
        }
        Plane::new(img.width, img.height, img.data.clone())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// An 8-bit RGB fundus image plus an optional field-of-view mask
/// (nonzero = inside the imaged circle).
#[derive(Debug, Clone)]
pub struct FundusImage {
    width: usize,
    height: usize,
    r: Vec<u8>,
    g: Vec<u8>,
    b: Vec<u8>,
    pub fov: Option<Plane>,
}

impl FundusImage {
    pub fn new(width: usize, height: usize, r: Vec<u8>, g: Vec<u8>, b: Vec<u8>) -> Result<Self> {
        let n = width * height;
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image dimensions {width}x{height} must be positive"
            )));
        }
        if r.len() != n || g.len() != n || b.len() != n {
            return Err(Error::shape(
                "rgb plane lengths",
                vec![n],
                vec![r.len(), g.len(), b.len()],
            ));
        }
        Ok(FundusImage {
            width,
            height,
            r,
            g,
            b,
            fov: None,
        })
    }

    /// Accepts P6 directly and P5 as a gray image with equal channels.
    pub fn from_pnm(img: &PnmImage) -> Result<Self> {
        match img.channels {
            3 => {
                let n = img.width * img.height;
                let mut r = Vec::with_capacity(n);
                let mut g = Vec::with_capacity(n);
                let mut b = Vec::with_capacity(n);
                for px in img.data.chunks_exact(3) {
                    r.push(px[0]);
                    g.push(px[1]);
                    b.push(px[2]);
                }
                FundusImage::new(img.width, img.height, r, g, b)
            }
            1 => FundusImage::new(
                img.width,
                img.height,
                img.data.clone(),
                img.data.clone(),
                img.data.clone(),
            ),
            other => Err(Error::Pnm(format!("unsupported channel count {other}"))),
        }
    }

    pub fn with_fov(mut self, fov: Plane) -> Result<Self> {
        if fov.width() != self.width || fov.height() != self.height {
            return Err(Error::shape(
                "fov mask dimensions",
                vec![self.width, self.height],
                vec![fov.width(), fov.height()],
            ));
        }
        self.fov = Some(fov);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// An enhanced image paired with its ground-truth labels, ready for patch
/// extraction. Label pixels > 127 mean vessel.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub name: String,
    pub enhanced: Plane,
    pub labels: Plane,
    pub fov: Option<Plane>,
}

impl LabeledImage {
    pub fn new(name: String, enhanced: Plane, labels: Plane, fov: Option<Plane>) -> Result<Self> {
        if enhanced.width() != labels.width() || enhanced.height() != labels.height() {
            return Err(Error::shape(
                format!("label dimensions for '{name}'"),
                vec![enhanced.width(), enhanced.height()],
                vec![labels.width(), labels.height()],
            ));
        }
        if let Some(f) = &fov {
            if f.width() != enhanced.width() || f.height() != enhanced.height() {
                return Err(Error::shape(
                    format!("fov dimensions for '{name}'"),
                    vec![enhanced.width(), enhanced.height()],
                    vec![f.width(), f.height()],
                ));
            }
        }
        Ok(LabeledImage {
            name,
            enhanced,
            labels,
            fov,
        })
    }

    fn in_fov(&self, x: usize, y: usize) -> bool {
        self.fov.as_ref().is_none_or(|f| f.get(x, y) != 0)
    }

    pub fn is_vessel(&self, x: usize, y: usize) -> bool {
        self.labels.get(x, y) > 127
    }
}

/// One training patch with provenance.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: Tensor,
    /// 1 = vessel, 0 = background.
    pub label: usize,
    pub image_id: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PatchDataset {
    pub patches: Vec<Patch>,
    pub warnings: Vec<String>,
}

impl PatchDataset {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.patches.iter().map(|p| (&p.pixels, p.label)).collect()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Patch sampling policy for [`build_dataset`].
#[derive(Debug, Clone)]
pub struct SamplePolicy {
    pub per_image_sample_count: usize,
    pub vessel_fraction: f64,
    pub seed: u64,
}

/// Image-level cross-validation split.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Image ids not in fold `k` (the training side).
    pub fn train_ids(&self, k: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Reflected (mirror, no edge repeat) index for out-of-bounds offsets:
/// offset -1 maps to 1, offset n maps to n-2.
fn mirror(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Channel-mean grayscale: `round((r + g + b) / 3)`.
pub fn to_grayscale(image: &FundusImage) -> Plane {
    let data = image
        .r
        .iter()
        .zip(&image.g)
        .zip(&image.b)
        .map(|((&r, &g), &b)| {
            let sum = r as u16 + g as u16 + b as u16;
            (sum as f32 / 3.0).round() as u8
        })
        .collect();
    Plane::new(image.width, image.height, data).expect("same dimensions")
}

/// Local histogram equalization with a mirror-padded square window.
///
/// Each output pixel remaps its value through the cdf of the window
/// centered on it: `round(255 * (cdf(v) - cdf_min) / (n - cdf_min))` with
/// `cdf_min` the smallest nonzero cdf value. A constant window leaves the
/// pixel unchanged.
pub fn local_hist_equalize(plane: &Plane, window: usize) -> Result<Plane> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "equalization window {window} must be odd and at least 3"
        )));
    }
    let (w, h) = (plane.width(), plane.height());
    let r = (window / 2) as isize;
    let n = (window * window) as u32;
    let mut out = vec![0u8; w * h];

    let mut row_idx = vec![0usize; window];
    for y in 0..h {
        for (slot, dy) in (-r..=r).enumerate() {
            row_idx[slot] = mirror(y as isize + dy, h);
        }
        // Histogram of the window at x = 0, then slide along the row.
        let mut hist = [0u32; 256];
        for dx in -r..=r {
            let cx = mirror(dx, w);
            for &cy in &row_idx {
                hist[plane.data[cy * w + cx] as usize] += 1;
            }
        }
        for x in 0..w {
            if x > 0 {
                let out_col = mirror(x as isize - 1 - r, w);
                let in_col = mirror(x as isize + r, w);
                for &cy in &row_idx {
                    hist[plane.data[cy * w + out_col] as usize] -= 1;
                    hist[plane.data[cy * w + in_col] as usize] += 1;
                }
            }
            // The center value is in its own window, so the smallest
            // present value (which fixes cdf_min) is at most v.
            let v = plane.data[y * w + x] as usize;
            let mut cdf_v = 0u32;
            let mut cdf_min = 0u32;
            for &count in hist.iter().take(v + 1) {
                if count > 0 && cdf_min == 0 {
                    cdf_min = count;
                }
                cdf_v += count;
            }
            out[y * w + x] = if cdf_min == n {
                v as u8
            } else {
                let scaled = 255.0 * (cdf_v - cdf_min) as f64 / (n - cdf_min) as f64;
                scaled.round() as u8
            };
        }
    }
    Plane::new(w, h, out)
}

/// Grayscale conversion plus local equalization in one call.
pub fn enhance(image: &FundusImage, window: usize) -> Result<Plane> {
    local_hist_equalize(&to_grayscale(image), window)
}

/// The 9x9 window centered on `(x, y)`, mirror-padded, scaled to [0, 1].
pub fn extract_patch(plane: &Plane, x: usize, y: usize) -> Result<Tensor> {
    let (w, h) = (plane.width(), plane.height());
    if x >= w || y >= h {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: w,
            height: h,
        });
    }
    let r = (PATCH_SIZE / 2) as isize;
    let mut data = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
    for dy in -r..=r {
        let sy = mirror(y as isize + dy, h);
        for dx in -r..=r {
            let sx = mirror(x as isize + dx, w);
            data.push(plane.data[sy * w + sx] as f32 / 255.0);
        }
    }
    Tensor::new([PATCH_SIZE, PATCH_SIZE, 1], data)
}

/// Class-balanced patch sampling without replacement over the given
/// images, restricted to the field of view where present. When a class has
/// fewer pixels than requested the count downgrades with a warning record.
pub fn build_dataset(images: &[LabeledImage], policy: &SamplePolicy) -> Result<PatchDataset> {
    if !(policy.vessel_fraction > 0.0 && policy.vessel_fraction < 1.0) {
        return Err(Error::Config(format!(
            "vessel_fraction {} must lie strictly between 0 and 1",
            policy.vessel_fraction
        )));
    }
    if policy.per_image_sample_count == 0 {
        return Err(Error::Config(
            "per_image_sample_count must be positive".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut dataset = PatchDataset::default();

    for (image_id, img) in images.iter().enumerate() {
        let mut vessel_px = Vec::new();
        let mut background_px = Vec::new();
        for y in 0..img.enhanced.height() {
            for x in 0..img.enhanced.width() {
                if !img.in_fov(x, y) {
                    continue;
                }
                if img.is_vessel(x, y) {
                    vessel_px.push((x, y));
                } else {
                    background_px.push((x, y));
                }
            }
        }
        let want_vessel =
            (policy.per_image_sample_count as f64 * policy.vessel_fraction).round() as usize;
        let want_background = policy.per_image_sample_count - want_vessel;

        for (class_px, want, label, class_name) in [
            (&mut vessel_px, want_vessel, 1usize, "vessel"),
            (&mut background_px, want_background, 0usize, "background"),
        ] {
            let take = want.min(class_px.len());
            if take < want {
                dataset.warnings.push(format!(
                    "image '{}': requested {want} {class_name} patches, only {take} available",
                    img.name
                ));
            }
            // Partial Fisher-Yates: first `take` entries are a uniform
            // sample without replacement.
            for i in 0..take {
                let j = rng.random_range(i..class_px.len());
                class_px.swap(i, j);
            }
            for &(x, y) in &class_px[..take] {
                dataset.patches.push(Patch {
                    pixels: extract_patch(&img.enhanced, x, y)?,
                    label,
                    image_id,
                    x,
                    y,
                });
            }
        }
    }

    // Interleave classes and images so contiguous slices are usable splits.
    for i in (1..dataset.patches.len()).rev() {
        let j = rng.random_range(0..=i);
        dataset.patches.swap(i, j);
    }
    Ok(dataset)
}

/// Seeded shuffle + round-robin assignment of image ids into `k` folds.
pub fn split_folds(image_count: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("fold count {k} must be at least 2")));
    }
    if k > image_count {
        return Err(Error::Config(format!(
            "fold count {k} exceeds image count {image_count}"
        )));
    }
    let mut ids: Vec<usize> = (0..image_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplit { folds })
}
