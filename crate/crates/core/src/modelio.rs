//! Bit-exact model serialization ("TQNS"), the layer complexity report,
//! and STARE-style dataset loading.
//!
//! File layout (all integers little-endian): magic `TQNS`, version u16,
//! record count u16, then one record per layer. The first record must be
//! the input shape. Weight payloads use one of three encodings:
//!
//! - 0: plain 32-bit floats
//! - 1: ternary 2-bit codes, four per byte (00 -> 0, 01 -> +1, 10 -> -1,
//!   11 forbidden), LSB-first, zero-padded to the byte
//! - 2: sparse-masked — a bit-per-weight mask (LSB-first, row-major,
//!   zero-padded to the byte) followed by the active weights as floats in
//!   mask order
//!
//! Biases are always plain floats. The encoding per layer is a function of
//! the layer's state, so save -> load -> save is byte-identical.

use crate::network::{ConvLayer, DenseLayer, Layer, Network};
use crate::pnm::read_pnm;
use crate::preprocess::{enhance, to_grayscale, FundusImage, LabeledImage, Plane};
use crate::tensor::Tensor;
use crate::{compress::TernaryCode, Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TQNS";
const VERSION: u16 = 1;

const KIND_INPUT: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_MAXPOOL: u8 = 2;
const KIND_DENSE: u8 = 3;
const KIND_RELU: u8 = 4;
const KIND_SOFTMAX: u8 = 5;

const ENC_DENSE_F32: u8 = 0;
const ENC_TERNARY: u8 = 1;
const ENC_SPARSE: u8 = 2;

// ---------------------------------------------------------------------------
// Packing primitives
// ---------------------------------------------------------------------------

fn pack_ternary(values: &[f32]) -> Result<Vec<u8>> {
    let mut bytes = vec![0u8; values.len().div_ceil(4)];
    for (i, &v) in values.iter().enumerate() {
        let code: u8 = if v == 0.0 {
            0b00
        } else if v == 1.0 {
            0b01
        } else if v == -1.0 {
            0b10
        } else {
            return Err(Error::Config(format!(
                "value {v} at index {i} is not ternary"
            )));
        };
        bytes[i / 4] |= code << ((i % 4) * 2);
    }
    Ok(bytes)
}

/// `base` is the absolute file offset of `bytes[0]`, used in errors.
fn unpack_ternary(bytes: &[u8], count: usize, base: usize) -> Result<Vec<f32>> {
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let code = (bytes[i / 4] >> ((i % 4) * 2)) & 0b11;
        values.push(match code {
            0b00 => 0.0,
            0b01 => 1.0,
            0b10 => -1.0,
            _ => {
                return Err(Error::CorruptModel {
                    offset: base + i / 4,
                    reason: format!("forbidden ternary code 11 in weight {i}"),
                })
            }
        });
    }
    for i in count..bytes.len() * 4 {
        if (bytes[i / 4] >> ((i % 4) * 2)) & 0b11 != 0 {
            return Err(Error::CorruptModel {
                offset: base + i / 4,
                reason: "nonzero padding in ternary block".to_string(),
            });
        }
    }
    Ok(values)
}

fn pack_mask(mask: &[f32]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_mask(bytes: &[u8], count: usize, base: usize) -> Result<Vec<f32>> {
    let mut mask = Vec::with_capacity(count);
    for i in 0..count {
        mask.push(f32::from((bytes[i / 8] >> (i % 8)) & 1));
    }
    for i in count..bytes.len() * 8 {
        if (bytes[i / 8] >> (i % 8)) & 1 != 0 {
            return Err(Error::CorruptModel {
                offset: base + i / 8,
                reason: "nonzero padding in mask block".to_string(),
            });
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_conv(out: &mut Vec<u8>, c: &ConvLayer) -> Result<()> {
    out.push(KIND_CONV);
    for &d in c.weights.shape() {
        push_u32(out, d as u32);
    }
    match (&c.quant, &c.mask) {
        (Some(code), mask) => {
            out.push(ENC_TERNARY);
            out.extend_from_slice(&pack_ternary(code.values())?);
            match mask {
                Some(m) => {
                    out.push(1);
                    out.extend_from_slice(&pack_mask(m.data()));
                }
                None => out.push(0),
            }
        }
        (None, Some(m)) => {
            out.push(ENC_SPARSE);
            out.extend_from_slice(&pack_mask(m.data()));
            let active: Vec<f32> = c
                .weights
                .iter()
                .zip(m.iter())
                .filter(|&(_, &mv)| mv != 0.0)
                .map(|(&w, _)| w)
                .collect();
            push_f32s(out, &active);
        }
        (None, None) => {
            out.push(ENC_DENSE_F32);
            push_f32s(out, c.weights.data());
        }
    }
    push_f32s(out, c.bias.data());
    Ok(())
}

fn encode_dense(out: &mut Vec<u8>, d: &DenseLayer) -> Result<()> {
    out.push(KIND_DENSE);
    for &dim in d.weights.shape() {
        push_u32(out, dim as u32);
    }
    match &d.quant {
        Some(code) => {
            out.push(ENC_TERNARY);
            out.extend_from_slice(&pack_ternary(code.values())?);
        }
        None => {
            out.push(ENC_DENSE_F32);
            push_f32s(out, d.weights.data());
        }
    }
    push_f32s(out, d.bias.data());
    Ok(())
}

/// Serializes the network to its canonical byte form.
pub fn model_bytes(net: &Network) -> Result<Vec<u8>> {
    net.validate()?;
    let records = net.layers.len() + 1;
    if records > u16::MAX as usize {
        return Err(Error::Config(format!("too many layers: {records}")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u16(&mut out, VERSION);
    push_u16(&mut out, records as u16);
    out.push(KIND_INPUT);
    for &d in &net.input_shape {
        push_u32(&mut out, d as u32);
    }
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => encode_conv(&mut out, c)?,
            Layer::MaxPool => out.push(KIND_MAXPOOL),
            Layer::Dense(d) => encode_dense(&mut out, d)?,
            Layer::Relu => out.push(KIND_RELU),
            Layer::Softmax => out.push(KIND_SOFTMAX),
        }
    }
    Ok(out)
}

/// Writes the canonical model file; returns the byte count.
pub fn save_model(net: &Network, path: &Path) -> Result<u64> {
    let bytes = model_bytes(net)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptModel {
                offset: self.pos,
                reason: format!(
                    "truncated while reading {what}: expected {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::CorruptModel {
        offset,
        reason: reason.into(),
    }
}

fn decode_conv(r: &mut Reader<'_>) -> Result<ConvLayer> {
    let shape_pos = r.pos;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32(&format!("conv dim {i}"))? as usize;
    }
    if dims[0] != 3 || dims[1] != 3 || dims[2] == 0 || dims[3] == 0 {
        return Err(corrupt(shape_pos, format!("invalid conv shape {dims:?}")));
    }
    let n = dims.iter().product::<usize>();
    let encoding = r.u8("conv encoding")?;
    let (weights, mask, quant) = match encoding {
        ENC_DENSE_F32 => (r.f32s(n, "conv weights")?, None, None),
        ENC_TERNARY => {
            let base = r.pos;
            let packed = r.take(n.div_ceil(4), "conv ternary codes")?;
            let values = unpack_ternary(packed, n, base)?;
            let mask_flag = r.u8("conv mask flag")?;
            let mask = match mask_flag {
                0 => None,
                1 => {
                    let mbase = r.pos;
                    let mbytes = r.take(n.div_ceil(8), "conv mask")?;
                    Some(unpack_mask(mbytes, n, mbase)?)
                }
                other => return Err(corrupt(r.pos - 1, format!("invalid mask flag {other}"))),
            };
            if let Some(m) = &mask {
                for (i, (&mv, &v)) in m.iter().zip(&values).enumerate() {
                    if mv == 0.0 && v != 0.0 {
                        return Err(corrupt(
                            base + i / 4,
                            format!("nonzero ternary code under mask at weight {i}"),
                        ));
                    }
                }
            }
            (values.clone(), mask, Some((values, dims.to_vec())))
        }
        ENC_SPARSE => {
            let mbase = r.pos;
            let mbytes = r.take(n.div_ceil(8), "conv mask")?;
            let mask = unpack_mask(mbytes, n, mbase)?;
            let active = mask.iter().filter(|&&m| m != 0.0).count();
            let values = r.f32s(active, "conv active weights")?;
            let mut weights = vec![0.0f32; n];
            let mut vi = 0usize;
            for (w, &m) in weights.iter_mut().zip(&mask) {
                if m != 0.0 {
                    *w = values[vi];
                    vi += 1;
                }
            }
            (weights, Some(mask), None)
        }
        other => return Err(corrupt(r.pos - 1, format!("unknown encoding {other}"))),
    };
    let bias = r.f32s(dims[3], "conv bias")?;
    Ok(ConvLayer {
        weights: Tensor::new(dims.to_vec(), weights)?,
        bias: Tensor::new([dims[3]], bias)?,
        mask: mask.map(|m| Tensor::new(dims.to_vec(), m)).transpose()?,
        quant: quant
            .map(|(values, shape)| TernaryCode::new(shape, values))
            .transpose()?,
    })
}

fn decode_dense(r: &mut Reader<'_>) -> Result<DenseLayer> {
    let shape_pos = r.pos;
    let out_dim = r.u32("dense out dim")? as usize;
    let in_dim = r.u32("dense in dim")? as usize;
    if out_dim == 0 || in_dim == 0 {
        return Err(corrupt(
            shape_pos,
            format!("invalid dense shape [{out_dim}, {in_dim}]"),
        ));
    }
    let n = out_dim * in_dim;
    let encoding = r.u8("dense encoding")?;
    let (weights, quant) = match encoding {
        ENC_DENSE_F32 => (r.f32s(n, "dense weights")?, None),
        ENC_TERNARY => {
            let base = r.pos;
            let packed = r.take(n.div_ceil(4), "dense ternary codes")?;
            let values = unpack_ternary(packed, n, base)?;
            (values.clone(), Some(values))
        }
        other => return Err(corrupt(r.pos - 1, format!("unknown encoding {other}"))),
    };
    let bias = r.f32s(out_dim, "dense bias")?;
    Ok(DenseLayer {
        weights: Tensor::new([out_dim, in_dim], weights)?,
        bias: Tensor::new([out_dim], bias)?,
        quant: quant
            .map(|values| TernaryCode::new([out_dim, in_dim], values))
            .transpose()?,
    })
}

/// Parses a canonical model byte stream.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(
            0,
            format!("bad magic {magic:?}, expected \"TQNS\""),
        ));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let records = r.u16("record count")? as usize;
    if records == 0 {
        return Err(corrupt(6, "zero records"));
    }
    let first_kind = r.u8("input record kind")?;
    if first_kind != KIND_INPUT {
        return Err(corrupt(r.pos - 1, "first record must be the input shape"));
    }
    let mut input_shape = [0usize; 3];
    for (i, d) in input_shape.iter_mut().enumerate() {
        *d = r.u32(&format!("input dim {i}"))? as usize;
        if *d == 0 {
            return Err(corrupt(r.pos - 4, "zero input dimension"));
        }
    }
    let mut layers = Vec::with_capacity(records - 1);
    for _ in 1..records {
        let kind_pos = r.pos;
        let kind = r.u8("record kind")?;
        layers.push(match kind {
            KIND_CONV => Layer::Conv(decode_conv(&mut r)?),
            KIND_MAXPOOL => Layer::MaxPool,
            KIND_DENSE => Layer::Dense(decode_dense(&mut r)?),
            KIND_RELU => Layer::Relu,
            KIND_SOFTMAX => Layer::Softmax,
            KIND_INPUT => return Err(corrupt(kind_pos, "duplicate input record")),
            other => return Err(corrupt(kind_pos, format!("unknown record kind {other}"))),
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(
            r.pos,
            format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            ),
        ));
    }
    let net = Network::new(input_shape, layers);
    net.validate()
        .map_err(|e| corrupt(0, format!("loaded model violates invariants: {e}")))?;
    Ok(net)
}

pub fn load_model(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Complexity report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerComplexity {
    pub index: usize,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub param_count: usize,
    pub active_count: usize,
    pub macs: u64,
    pub storage_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerComplexity>,
    pub total_params: usize,
    pub total_active: usize,
    pub total_macs: u64,
    /// Weight + bias bytes under the current (possibly compressed) encodings.
    pub storage_bytes: u64,
    /// Weight + bias bytes if everything were plain 32-bit floats.
    pub original_storage_bytes: u64,
}

/// Counts parameters, multiply-accumulates (active weights only), and
/// storage bytes per layer under the serialization encodings.
pub fn complexity_report(net: &Network) -> Result<ComplexityReport> {
    let shapes = net.shape_chain()?;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut total_params = 0usize;
    let mut total_active = 0usize;
    let mut total_macs = 0u64;
    let mut storage = 0u64;
    let mut original = 0u64;

    for (i, layer) in net.layers.iter().enumerate() {
        let out_shape = shapes[i + 1].clone();
        let (param_count, active_count, macs, bytes) = match layer {
            Layer::Conv(c) => {
                let n = c.weights.len();
                let active = c.active_count();
                let spatial = (out_shape[0] * out_shape[1]) as u64;
                let weight_bytes = match (&c.quant, &c.mask) {
                    (Some(_), mask) => {
                        n.div_ceil(4) as u64 + mask.as_ref().map_or(0, |_| n.div_ceil(8) as u64)
                    }
                    (None, Some(_)) => n.div_ceil(8) as u64 + 4 * active as u64,
                    (None, None) => 4 * n as u64,
                };
                (
                    n,
                    active,
                    spatial * active as u64,
                    weight_bytes + 4 * c.bias.len() as u64,
                )
            }
            Layer::Dense(d) => {
                let n = d.weights.len();
                let weight_bytes = if d.quant.is_some() {
                    n.div_ceil(4) as u64
                } else {
                    4 * n as u64
                };
                (n, n, n as u64, weight_bytes + 4 * d.bias.len() as u64)
            }
            _ => (0, 0, 0, 0),
        };
        let bias_len = match layer {
            Layer::Conv(c) => c.bias.len(),
            Layer::Dense(d) => d.bias.len(),
            _ => 0,
        };
        total_params += param_count;
        total_active += active_count;
        total_macs += macs;
        storage += bytes;
        original += 4 * (param_count + bias_len) as u64;
        layers.push(LayerComplexity {
            index: i,
            kind: layer.kind_name(),
            output_shape: out_shape,
            param_count,
            active_count,
            macs,
            storage_bytes: bytes,
        });
    }
    Ok(ComplexityReport {
        input_shape: net.input_shape.to_vec(),
        layers,
        total_params,
        total_active,
        total_macs,
        storage_bytes: storage,
        original_storage_bytes: original,
    })
}

// ---------------------------------------------------------------------------
// STARE loading
// ---------------------------------------------------------------------------

/// A raw image with its first-observer vessel labels.
#[derive(Debug, Clone)]
pub struct StarePair {
    pub name: String,
    pub image: FundusImage,
    pub labels: Plane,
}

#[derive(Debug, Clone, Default)]
pub struct StareDataset {
    pub pairs: Vec<StarePair>,
    pub warnings: Vec<String>,
}

/// Loads `<stem>.{ppm,pgm}` images paired with `<stem>.ah.{ppm,pgm}`
/// labels from a directory. Unpaired images are skipped with a warning;
/// a dimension mismatch within a pair is a hard error.
pub fn load_stare(dir: &Path) -> Result<StareDataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    // stem (file name minus the pnm extension) -> file path
    let mut by_stem: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_pnm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"));
        if !is_pnm {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            by_stem.insert(stem.to_string(), path.clone());
        }
    }

    let mut dataset = StareDataset::default();
    for (stem, path) in &by_stem {
        if stem.ends_with(".ah") {
            let image_stem = stem.trim_end_matches(".ah");
            if !by_stem.contains_key(image_stem) {
                dataset
                    .warnings
                    .push(format!("label '{stem}' has no matching image"));
            }
            continue;
        }
        let label_stem = format!("{stem}.ah");
        let Some(label_path) = by_stem.get(&label_stem) else {
            dataset.warnings.push(format!(
                "image '{stem}' has no '{label_stem}' label; skipped"
            ));
            continue;
        };
        let image = FundusImage::from_pnm(&read_pnm(path)?)?;
        let label_pnm = read_pnm(label_path)?;
        let labels = if label_pnm.channels == 1 {
            Plane::from_pnm(&label_pnm)?
        } else {
            to_grayscale(&FundusImage::from_pnm(&label_pnm)?)
        };
        if labels.width() != image.width() || labels.height() != image.height() {
            return Err(Error::shape(
                format!("label dimensions for pair '{stem}'"),
                vec![image.width(), image.height()],
                vec![labels.width(), labels.height()],
            ));
        }
        dataset.pairs.push(StarePair {
            name: stem.clone(),
            image,
            labels,
        });
    }
    if dataset.pairs.is_empty() {
        dataset
            .warnings
            .push(format!("no image/label pairs found in {}", dir.display()));
    } else if dataset.pairs.len() != 20 {
        dataset
            .warnings
            .push(format!("expected 20 pairs, found {}", dataset.pairs.len()));
    }
    Ok(dataset)
}

/// Enhances every pair (grayscale + local equalization) for training.
pub fn enhance_pairs(dataset: &StareDataset, window: usize) -> Result<Vec<LabeledImage>> {
    dataset
        .pairs
        .iter()
        .map(|p| {
            LabeledImage::new(
                p.name.clone(),
                enhance(&p.image, window)?,
                p.labels.clone(),
                p.image.fov.clone(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::ternarize;
    use crate::network::{init_conv, init_dense};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantize_dense_layers(net: &mut Network) {
        for layer in &mut net.layers {
            if let Layer::Dense(d) = layer {
                d.quant = Some(ternarize(&d.weights).unwrap());
            }
        }
    }

    fn mask_conv_to(net: &mut Network, keep_fraction: f64, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            if let Layer::Conv(c) = layer {
                let n = c.weights.len();
                let keep = ((n as f64 * keep_fraction) as usize).max(1);
                let mut mask = vec![0.0f32; n];
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..keep {
                    let j = rng.random_range(i..n);
                    idx.swap(i, j);
                }
                for &i in &idx[..keep] {
                    mask[i] = 1.0;
                }
                for (w, &m) in c.weights.data_mut().iter_mut().zip(&mask) {
                    if m == 0.0 {
                        *w = 0.0;
                    }
                }
                if c.quant.is_some() {
                    c.quant = Some(ternarize(&c.weights).unwrap());
                }
                c.mask = Some(Tensor::new(c.weights.shape().to_vec(), mask).unwrap());
            }
        }
    }

    #[test]
    fn round_trip_reference_network() {
        let net = Network::reference(3);
        let bytes = model_bytes(&net).unwrap();
        let loaded = model_from_bytes(&bytes).unwrap();
        let again = model_bytes(&loaded).unwrap();
        assert_eq!(bytes, again, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn round_trip_quantized_and_pruned() {
        let mut net = Network::reference(5);
        quantize_dense_layers(&mut net);
        mask_conv_to(&mut net, 0.4, 9);
        net.validate().unwrap();
        let bytes = model_bytes(&net).unwrap();
        let loaded = model_from_bytes(&bytes).unwrap();
        loaded.validate().unwrap();
        assert_eq!(bytes, model_bytes(&loaded).unwrap());
        for (a, b) in net.layers.iter().zip(&loaded.layers) {
            match (a, b) {
                (Layer::Conv(x), Layer::Conv(y)) => {
                    assert_eq!(x.weights.data(), y.weights.data());
                    assert_eq!(
                        x.mask.as_ref().map(|m| m.data()),
                        y.mask.as_ref().map(|m| m.data())
                    );
                }
                (Layer::Dense(x), Layer::Dense(y)) => {
                    assert_eq!(
                        x.quant.as_ref().map(|q| q.values()),
                        y.quant.as_ref().map(|q| q.values())
                    );
                    assert_eq!(x.bias.data(), y.bias.data());
                }
                _ => {}
            }
        }
    }

    #[test]
    fn quantized_dense_storage_matches_packing_arithmetic() {
        let mut net = Network::reference(7);
        quantize_dense_layers(&mut net);
        let report = complexity_report(&net).unwrap();
        let dense_code_bytes: u64 = report
            .layers
            .iter()
            .filter(|l| l.kind == "dense")
            .map(|l| l.storage_bytes - 4 * bias_len_of(l.param_count) as u64)
            .sum();
        assert_eq!(dense_code_bytes, 3600 + 250 + 10);

        fn bias_len_of(params: usize) -> usize {
            match params {
                14400 => 50,
                1000 => 20,
                40 => 2,
                other => panic!("unexpected dense param count {other}"),
            }
        }
    }

    #[test]
    fn unquantized_conv1_storage_is_2304_value_bytes() {
        let net = Network::reference(8);
        let report = complexity_report(&net).unwrap();
        let conv1 = &report.layers[0];
        assert_eq!(conv1.kind, "conv");
        assert_eq!(conv1.param_count, 576);
        assert_eq!(conv1.storage_bytes, 576 * 4 + 64 * 4);
    }

    #[test]
    fn reference_macs_match_hand_arithmetic() {
        let net = Network::reference(9);
        let report = complexity_report(&net).unwrap();
        let conv_macs: u64 = report
            .layers
            .iter()
            .filter(|l| l.kind == "conv")
            .map(|l| l.macs)
            .sum();
        assert_eq!(conv_macs, 81 * 576 + 25 * 18432);
        let dense_macs: u64 = report
            .layers
            .iter()
            .filter(|l| l.kind == "dense")
            .map(|l| l.macs)
            .sum();
        assert_eq!(dense_macs, 15_440);
        assert_eq!(report.total_macs, 522_896);
        assert_eq!(report.total_params, 34_448);
    }

    #[test]
    fn empty_network_reports_all_zero() {
        let net = Network::new([1, 1, 1], Vec::new());
        let report = complexity_report(&net).unwrap();
        assert!(report.layers.is_empty());
        assert_eq!(report.total_macs, 0);
        assert_eq!(report.storage_bytes, 0);
    }

    #[test]
    fn report_totals_equal_layer_sums() {
        let mut net = Network::reference(11);
        quantize_dense_layers(&mut net);
        mask_conv_to(&mut net, 0.45, 4);
        let report = complexity_report(&net).unwrap();
        assert_eq!(
            report.total_macs,
            report.layers.iter().map(|l| l.macs).sum::<u64>()
        );
        assert_eq!(
            report.storage_bytes,
            report.layers.iter().map(|l| l.storage_bytes).sum::<u64>()
        );
    }

    #[test]
    fn storage_ratio_bounds_for_compressed_reference_net() {
        // At 55% conv removal the compressed form stays under 30% of the
        // plain-float storage; reaching 25% needs deeper pruning (>= 64%),
        // because the sparse encoding pays a mask bit per original weight.
        let mut net = Network::reference(13);
        quantize_dense_layers(&mut net);
        mask_conv_to(&mut net, 0.45, 21);
        let report = complexity_report(&net).unwrap();
        let ratio = report.storage_bytes as f64 / report.original_storage_bytes as f64;
        assert!(ratio < 0.30, "ratio {ratio} at 55% removal");

        let mut net = Network::reference(13);
        quantize_dense_layers(&mut net);
        mask_conv_to(&mut net, 0.36, 22);
        let report = complexity_report(&net).unwrap();
        let ratio = report.storage_bytes as f64 / report.original_storage_bytes as f64;
        assert!(ratio < 0.25, "ratio {ratio} at 64% removal");
    }

    #[test]
    fn truncated_file_names_missing_bytes() {
        let net = Network::reference(2);
        let bytes = model_bytes(&net).unwrap();
        let err = model_from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        match err {
            Error::CorruptModel { reason, .. } => {
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected corrupt-model error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = model_from_bytes(b"NOPE\x01\x00\x01\x00").unwrap_err();
        assert!(matches!(err, Error::CorruptModel { offset: 0, .. }));
    }

    #[test]
    fn forbidden_ternary_code_is_rejected_with_offset() {
        // Hand-built file: input record + one quantized dense layer whose
        // first packed byte contains the forbidden code 11.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TQNS");
        push_u16(&mut bytes, 1);
        push_u16(&mut bytes, 2);
        bytes.push(KIND_INPUT);
        push_u32(&mut bytes, 4);
        push_u32(&mut bytes, 1);
        push_u32(&mut bytes, 1);
        bytes.push(KIND_DENSE);
        push_u32(&mut bytes, 1); // out
        push_u32(&mut bytes, 4); // in
        bytes.push(ENC_TERNARY);
        let code_offset = bytes.len();
        bytes.push(0b0000_0011); // weight 0 has code 11
        push_f32s(&mut bytes, &[0.0]); // bias
        let err = model_from_bytes(&bytes).unwrap_err();
        match err {
            Error::CorruptModel { offset, reason } => {
                assert_eq!(offset, code_offset);
                assert!(reason.contains("forbidden"), "{reason}");
            }
            other => panic!("expected corrupt-model error, got {other:?}"),
        }
    }

    #[test]
    fn nonzero_ternary_padding_is_rejected() {
        let values = vec![1.0f32, -1.0, 0.0];
        let mut packed = pack_ternary(&values).unwrap();
        packed[0] |= 0b11 << 6; // pad slot 3 of 4
        assert!(unpack_ternary(&packed, 3, 0).is_err());
    }

    #[test]
    fn stare_pairing_warns_on_orphans() {
        use crate::pnm::write_pgm;
        let dir = tempfile::tempdir().unwrap();
        let gray = vec![100u8; 16];
        write_pgm(&dir.path().join("im0001.pgm"), 4, 4, &gray).unwrap();
        write_pgm(&dir.path().join("im0001.ah.pgm"), 4, 4, &gray).unwrap();
        write_pgm(&dir.path().join("im0002.pgm"), 4, 4, &gray).unwrap(); // orphan
        let ds = load_stare(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 1);
        assert_eq!(ds.pairs[0].name, "im0001");
        assert!(ds.warnings.iter().any(|w| w.contains("im0002")));
    }

    #[test]
    fn stare_rejects_dimension_mismatch() {
        use crate::pnm::write_pgm;
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("im0001.pgm"), 4, 4, &[0u8; 16]).unwrap();
        write_pgm(&dir.path().join("im0001.ah.pgm"), 2, 2, &[0u8; 4]).unwrap();
        let err = load_stare(dir.path()).unwrap_err();
        assert!(err.to_string().contains("im0001"), "{err}");
    }

    #[test]
    fn empty_stare_directory_warns() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_stare(dir.path()).unwrap();
        assert!(ds.pairs.is_empty());
        assert_eq!(ds.warnings.len(), 1);
    }

    // -----------------------------------------------------------------
    // Property tests
    // -----------------------------------------------------------------

    prop_compose! {
        fn arb_small_net()(
            seed in 0u64..1000,
            cout in 1usize..4,
            dense_out in 1usize..5,
            quantize_dense in any::<bool>(),
            quantize_conv in any::<bool>(),
            mask_conv in any::<bool>(),
            keep in 0.2f64..0.9,
        ) -> Network {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conv = init_conv(1, cout, &mut rng);
            let dense = init_dense(4 * cout, dense_out, &mut rng);
            let mut net = Network::new(
                [3, 3, 1],
                vec![
                    Layer::Conv(conv),
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Dense(dense),
                    Layer::Softmax,
                ],
            );
            if mask_conv {
                mask_conv_to(&mut net, keep, seed ^ 0xff);
            }
            if quantize_conv {
                for layer in &mut net.layers {
                    if let Layer::Conv(c) = layer {
                        c.quant = Some(ternarize(&c.weights).unwrap());
                    }
                }
            }
            if quantize_dense {
                quantize_dense_layers(&mut net);
            }
            net
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn serialization_round_trip_is_bit_identical(net in arb_small_net()) {
            net.validate().unwrap();
            let bytes = model_bytes(&net).unwrap();
            let loaded = model_from_bytes(&bytes).unwrap();
            prop_assert_eq!(bytes, model_bytes(&loaded).unwrap());
        }

        #[test]
        fn ternary_pack_unpack_identity(values in proptest::collection::vec(
            prop_oneof![Just(-1.0f32), Just(0.0f32), Just(1.0f32)], 1..200)
        ) {
            let packed = pack_ternary(&values).unwrap();
            let unpacked = unpack_ternary(&packed, values.len(), 0).unwrap();
            prop_assert_eq!(&unpacked, &values);
            prop_assert_eq!(pack_ternary(&unpacked).unwrap(), packed);
        }

        #[test]
        fn mask_pack_unpack_identity(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let mask: Vec<f32> = bits.iter().map(|&b| f32::from(b)).collect();
            let packed = pack_mask(&mask);
            let unpacked = unpack_mask(&packed, mask.len(), 0).unwrap();
            prop_assert_eq!(unpacked, mask);
        }
    }
}
