//! Minimal CNN engine: exactly the layer kinds of the reference
//! architecture, with backpropagation, mini-batch SGD and a
//! central-difference gradient checker.
//!
//! Two compression-related concerns thread through everything here:
//!
//! - Convolutional layers may carry a binary *prune mask*. Masked weights
//!   are stored as exactly `0.0` and their gradients are zeroed before
//!   every update, so a pruned position can never drift away from zero.
//! - Dense layers (and, in the experimental full-quantization mode, conv
//!   layers) may carry a *ternary code*. The forward pass then uses the
//!   codes (values in {-1, 0, +1}) while gradients are applied to the
//!   stored full-precision shadow weights, which are requantized after
//!   every step (straight-through estimator).

use crate::compress::{ternarize, TernaryCode};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Side length of the square input patches.
pub const PATCH_SIZE: usize = 9;

/// A training sample: patch pixels plus class label (1 = vessel).
pub type Sample<'a> = (&'a Tensor, usize);

/// Convolutional layer, kernel 3x3, stride 1, zero same-padding.
///
/// `weights` has shape `[3, 3, cin, cout]`. `mask`, when present, has the
/// same shape with values in {0, 1}; masked weight slots hold exactly 0.0.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub mask: Option<Tensor>,
    pub quant: Option<TernaryCode>,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[3]
    }

    /// Weight values the forward pass actually uses.
    pub fn effective_weights(&self) -> &[f32] {
        match &self.quant {
            Some(code) => code.values(),
            None => self.weights.data(),
        }
    }

    /// Number of weights not removed by the prune mask.
    pub fn active_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&v| v != 0.0).count(),
            None => self.weights.len(),
        }
    }
}

/// Fully connected layer with `weights` of shape `[out, in]` (row-major).
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub quant: Option<TernaryCode>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn effective_weights(&self) -> &[f32] {
        match &self.quant {
            Some(code) => code.values(),
            None => self.weights.data(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    MaxPool,
    Dense(DenseLayer),
    Relu,
    Softmax,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool => "maxpool",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Softmax => "softmax",
        }
    }
}

/// Loss functions understood by the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Cross-entropy on class probabilities; requires a final softmax layer.
    CrossEntropy,
    /// Sum of squared differences against a target vector.
    SquaredError,
}

/// Training target, matching the loss in use.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Vector(&'a [f32]),
}

/// Ordered layer list plus the expected input shape `[h, w, c]`.
#[derive(Debug, Clone)]
pub struct Network {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    steps: u64,
}

/// Per-layer parameter gradients, aligned with `Network::layers`.
pub struct Gradients {
    layers: Vec<Option<ParamGrad>>,
}

pub struct ParamGrad {
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Some(ParamGrad {
                    dw: vec![0.0; c.weights.len()],
                    db: vec![0.0; c.bias.len()],
                }),
                Layer::Dense(d) => Some(ParamGrad {
                    dw: vec![0.0; d.weights.len()],
                    db: vec![0.0; d.bias.len()],
                }),
                _ => None,
            })
            .collect();
        Gradients { layers }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.dw.iter_mut().zip(&b.dw) {
                    *x += y;
                }
                for (x, y) in a.db.iter_mut().zip(&b.db) {
                    *x += y;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Standalone layer operations
// ---------------------------------------------------------------------------

/// 3x3 same-padding convolution over an `[h, w, cin]` input.
///
/// `mask`, when given, must match the weight shape; masked weights
/// contribute nothing. Output shape is `[h, w, cout]`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let ws = weights.shape();
    if weights.rank() != 4 || ws[0] != 3 || ws[1] != 3 {
        return Err(Error::shape(
            "conv kernel must be 3x3",
            vec![3, 3],
            ws.to_vec(),
        ));
    }
    if input.rank() != 3 {
        return Err(Error::shape(
            "conv input must be rank 3 (h, w, c)",
            vec![3],
            vec![input.rank()],
        ));
    }
    let (h, w, cin, cout) = (input.shape()[0], input.shape()[1], ws[2], ws[3]);
    if input.shape()[2] != cin {
        return Err(Error::shape(
            "conv input channels vs weight fan-in",
            ws.to_vec(),
            input.shape().to_vec(),
        ));
    }
    if bias.len() != cout {
        return Err(Error::shape("conv bias", vec![cout], bias.shape().to_vec()));
    }
    if let Some(m) = mask {
        if m.shape() != ws {
            return Err(Error::shape("conv mask", ws.to_vec(), m.shape().to_vec()));
        }
    }
    let mut out = vec![0.0f32; h * w * cout];
    conv_forward_impl(
        h,
        w,
        cin,
        cout,
        input.data(),
        weights.data(),
        mask.map(|m| m.data()),
        bias.data(),
        &mut out,
    );
    Tensor::new([h, w, cout], out)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_impl(
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    input: &[f32],
    weights: &[f32],
    mask: Option<&[f32]>,
    bias: &[f32],
    out: &mut [f32],
) {
    for y in 0..h {
        for x in 0..w {
            let orow = &mut out[(y * w + x) * cout..][..cout];
            orow.copy_from_slice(bias);
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ipix = &input[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wbase = (ky * 3 + kx) * cin * cout;
                    match mask {
                        None => {
                            for (ci, &a) in ipix.iter().enumerate() {
                                if a == 0.0 {
                                    continue;
                                }
                                let wrow = &weights[wbase + ci * cout..][..cout];
                                for (o, &wv) in orow.iter_mut().zip(wrow) {
                                    *o += a * wv;
                                }
                            }
                        }
                        Some(m) => {
                            for (ci, &a) in ipix.iter().enumerate() {
                                if a == 0.0 {
                                    continue;
                                }
                                let wrow = &weights[wbase + ci * cout..][..cout];
                                let mrow = &m[wbase + ci * cout..][..cout];
                                for ((o, &wv), &mv) in orow.iter_mut().zip(wrow).zip(mrow) {
                                    *o += a * wv * mv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling in ceil mode: windows overhanging the border
/// shrink to the in-bounds elements, so `out_dim = ceil(in_dim / 2)`.
pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "maxpool input must be rank 3 (h, w, c)",
            vec![3],
            vec![input.rank()],
        ));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let data = input.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * c..][..c];
            let mut first = true;
            for dy in 0..2usize {
                let y = oy * 2 + dy;
                if y >= h {
                    continue;
                }
                for dx in 0..2usize {
                    let x = ox * 2 + dx;
                    if x >= w {
                        continue;
                    }
                    let ipix = &data[(y * w + x) * c..][..c];
                    if first {
                        orow.copy_from_slice(ipix);
                        first = false;
                    } else {
                        for (o, &v) in orow.iter_mut().zip(ipix) {
                            if v > *o {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([oh, ow, c], out)
}

/// Fully connected forward: `out = W·x + b`.
///
/// When `codes` is given the ternary values stand in for the weights, as in
/// a quantized layer's forward pass.
pub fn dense_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    codes: Option<&TernaryCode>,
) -> Result<Tensor> {
    let (fan_out, fan_in) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != fan_in {
        return Err(Error::shape(
            "dense fan-in",
            vec![fan_in],
            vec![input.len()],
        ));
    }
    if bias.len() != fan_out {
        return Err(Error::shape(
            "dense bias",
            vec![fan_out],
            bias.shape().to_vec(),
        ));
    }
    if let Some(c) = codes {
        if c.shape() != weights.shape() {
            return Err(Error::shape(
                "ternary code shape",
                weights.shape().to_vec(),
                c.shape().to_vec(),
            ));
        }
    }
    let wdata = codes.map(|c| c.values()).unwrap_or(weights.data());
    let mut out = vec![0.0f32; fan_out];
    dense_forward_impl(input.data(), wdata, bias.data(), &mut out);
    Tensor::new([fan_out], out)
}

fn dense_forward_impl(input: &[f32], weights: &[f32], bias: &[f32], out: &mut [f32]) {
    let fan_in = input.len();
    for (o, (b, wrow)) in out
        .iter_mut()
        .zip(bias.iter().zip(weights.chunks_exact(fan_in)))
    {
        let mut acc = *b;
        for (&wv, &x) in wrow.iter().zip(input) {
            acc += wv * x;
        }
        *o = acc;
    }
}

fn relu_forward(input: &Tensor) -> Tensor {
    let data = input
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

fn softmax_forward(input: &Tensor) -> Tensor {
    let data = input.data();
    let max = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = data.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Tensor::new(input.shape().to_vec(), out).expect("same shape")
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

impl Network {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Self {
        Network {
            input_shape,
            layers,
            steps: 0,
        }
    }

    /// The reference architecture:
    /// 1x9x9 input, conv 64, conv 32 (each 3x3 + relu + 2x2 pool),
    /// then dense 50, dense 20, dense 2 with a final softmax.
    pub fn reference(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Layer::Conv(init_conv(1, 64, &mut rng)),
            Layer::Relu,
            Layer::MaxPool,
            Layer::Conv(init_conv(64, 32, &mut rng)),
            Layer::Relu,
            Layer::MaxPool,
            Layer::Dense(init_dense(288, 50, &mut rng)),
            Layer::Relu,
            Layer::Dense(init_dense(50, 20, &mut rng)),
            Layer::Relu,
            Layer::Dense(init_dense(20, 2, &mut rng)),
            Layer::Softmax,
        ];
        Network::new([PATCH_SIZE, PATCH_SIZE, 1], layers)
    }

    /// Number of `sgd_step` calls applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Output shape after each layer, starting with the input shape.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        let mut cur = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv(c) => {
                    if cur.len() != 3 || cur[2] != c.in_channels() {
                        return Err(Error::shape(
                            format!("layer {i} (conv) input"),
                            vec![c.in_channels()],
                            cur.clone(),
                        ));
                    }
                    vec![cur[0], cur[1], c.out_channels()]
                }
                Layer::MaxPool => {
                    if cur.len() != 3 {
                        return Err(Error::shape(
                            format!("layer {i} (maxpool) input"),
                            vec![3],
                            vec![cur.len()],
                        ));
                    }
                    vec![cur[0].div_ceil(2), cur[1].div_ceil(2), cur[2]]
                }
                Layer::Dense(d) => {
                    let flat: usize = cur.iter().product();
                    if flat != d.fan_in() {
                        return Err(Error::shape(
                            format!("layer {i} (dense) fan-in"),
                            vec![d.fan_in()],
                            cur.clone(),
                        ));
                    }
                    vec![d.fan_out()]
                }
                Layer::Relu | Layer::Softmax => cur,
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Checks the structural invariants: consistent shape chain, mask and
    /// code shapes, masked weights exactly zero, codes in {-1, 0, +1}.
    pub fn validate(&self) -> Result<()> {
        self.shape_chain()?;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    if let Some(m) = &c.mask {
                        if m.shape() != c.weights.shape() {
                            return Err(Error::shape(
                                format!("layer {i} mask"),
                                c.weights.shape().to_vec(),
                                m.shape().to_vec(),
                            ));
                        }
                        for (j, (&mv, &wv)) in m.iter().zip(c.weights.iter()).enumerate() {
                            if mv != 0.0 && mv != 1.0 {
                                return Err(Error::Config(format!(
                                    "layer {i} mask[{j}] = {mv}, must be 0 or 1"
                                )));
                            }
                            if mv == 0.0 && wv != 0.0 {
                                return Err(Error::Config(format!(
                                    "layer {i} weight[{j}] = {wv} under a zero mask"
                                )));
                            }
                        }
                    }
                    if let Some(q) = &c.quant {
                        validate_code(i, q, &c.weights, c.mask.as_ref())?;
                    }
                }
                Layer::Dense(d) => {
                    if let Some(q) = &d.quant {
                        validate_code(i, q, &d.weights, None)?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Whether every dense layer carries a ternary code.
    pub fn dense_layers_quantized(&self) -> bool {
        let mut any = false;
        for layer in &self.layers {
            if let Layer::Dense(d) = layer {
                any = true;
                if d.quant.is_none() {
                    return false;
                }
            }
        }
        any
    }

    /// Full forward pass; returns the final layer's output vector.
    ///
    /// For the reference architecture this is the two class probabilities,
    /// component 1 being the vessel probability.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<f32>> {
        let trace = self.forward_trace(input, false)?;
        Ok(trace.last().expect("non-empty trace").data().to_vec())
    }

    /// Class index with the highest probability.
    pub fn classify(&self, input: &Tensor) -> Result<usize> {
        let out = self.forward(input)?;
        let mut best = 0;
        for (i, &v) in out.iter().enumerate() {
            if v > out[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Runs every layer, keeping each activation for the backward pass.
    /// With `use_shadow` the stored full-precision weights are used even on
    /// quantized layers (the gradient checker's view of the network).
    fn forward_trace(&self, input: &Tensor, use_shadow: bool) -> Result<Vec<Tensor>> {
        if input.shape() != self.input_shape {
            return Err(Error::shape(
                "network input",
                self.input_shape.to_vec(),
                input.shape().to_vec(),
            ));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let prev = acts.last().expect("non-empty");
            let next = match layer {
                Layer::Conv(c) => {
                    let wdata = if use_shadow {
                        c.weights.data()
                    } else {
                        c.effective_weights()
                    };
                    let (h, w) = (prev.shape()[0], prev.shape()[1]);
                    let (cin, cout) = (c.in_channels(), c.out_channels());
                    if prev.shape()[2] != cin {
                        return Err(Error::shape(
                            "conv input channels vs weight fan-in",
                            c.weights.shape().to_vec(),
                            prev.shape().to_vec(),
                        ));
                    }
                    let mut out = vec![0.0f32; h * w * cout];
                    conv_forward_impl(
                        h,
                        w,
                        cin,
                        cout,
                        prev.data(),
                        wdata,
                        None,
                        c.bias.data(),
                        &mut out,
                    );
                    Tensor::new([h, w, cout], out)?
                }
                Layer::MaxPool => maxpool2d(prev)?,
                Layer::Dense(d) => {
                    let wdata = if use_shadow {
                        d.weights.data()
                    } else {
                        d.effective_weights()
                    };
                    if prev.len() != d.fan_in() {
                        return Err(Error::shape(
                            "dense fan-in",
                            vec![d.fan_in()],
                            vec![prev.len()],
                        ));
                    }
                    let mut out = vec![0.0f32; d.fan_out()];
                    dense_forward_impl(prev.data(), wdata, d.bias.data(), &mut out);
                    Tensor::new([d.fan_out()], out)?
                }
                Layer::Relu => relu_forward(prev),
                Layer::Softmax => softmax_forward(prev),
            };
            acts.push(next);
        }
        Ok(acts)
    }

    fn loss_value(&self, output: &[f32], target: Target<'_>, loss: Loss) -> Result<f32> {
        match (loss, target) {
            (Loss::CrossEntropy, Target::Class(label)) => {
                if label >= output.len() {
                    return Err(Error::Config(format!(
                        "label {label} out of range for {} outputs",
                        output.len()
                    )));
                }
                Ok(-(output[label].max(1e-12).ln()))
            }
            (Loss::SquaredError, Target::Vector(t)) => {
                if t.len() != output.len() {
                    return Err(Error::shape(
                        "squared-error target",
                        vec![output.len()],
                        vec![t.len()],
                    ));
                }
                Ok(output.iter().zip(t).map(|(&o, &y)| (o - y) * (o - y)).sum())
            }
            _ => Err(Error::Config(
                "loss and target kinds do not match".to_string(),
            )),
        }
    }

    /// High-precision loss oracle for the gradient checker: the shadow-weight
    /// forward semantics evaluated in f64, plus a hash of the active path
    /// (ReLU signs and pool argmax picks). A hash change between two nearby
    /// evaluations means a kink sits between them, where a central
    /// difference is not a derivative.
    fn loss_f64(&self, input: &Tensor, target: Target<'_>, loss: Loss) -> Result<(f64, u64)> {
        fn feed(hash: &mut u64, v: u64) {
            *hash = (*hash ^ v).wrapping_mul(0x100_0000_01b3);
        }
        let mut shape = self.input_shape;
        let mut act: Vec<f64> = input.iter().map(|&v| f64::from(v)).collect();
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    let (h, w) = (shape[0], shape[1]);
                    let (cin, cout) = (c.in_channels(), c.out_channels());
                    let wdata = c.weights.data();
                    let mut out = vec![0.0f64; h * w * cout];
                    for y in 0..h {
                        for x in 0..w {
                            let orow = &mut out[(y * w + x) * cout..][..cout];
                            for (o, &b) in orow.iter_mut().zip(c.bias.iter()) {
                                *o = f64::from(b);
                            }
                            for ky in 0..3usize {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = x as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let pix = (iy as usize * w + ix as usize) * cin;
                                    for ci in 0..cin {
                                        let a = act[pix + ci];
                                        let wrow =
                                            &wdata[((ky * 3 + kx) * cin + ci) * cout..][..cout];
                                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                                            *o += a * f64::from(wv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    act = out;
                    shape = [h, w, cout];
                }
                Layer::MaxPool => {
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                    let mut out = vec![0.0f64; oh * ow * c];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for dy in 0..2usize {
                                    let y = oy * 2 + dy;
                                    if y >= h {
                                        continue;
                                    }
                                    for dx in 0..2usize {
                                        let x = ox * 2 + dx;
                                        if x >= w {
                                            continue;
                                        }
                                        let idx = (y * w + x) * c + ch;
                                        if act[idx] > best {
                                            best = act[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                out[(oy * ow + ox) * c + ch] = best;
                                feed(&mut hash, best_idx as u64);
                            }
                        }
                    }
                    act = out;
                    shape = [oh, ow, c];
                }
                Layer::Dense(d) => {
                    let wdata = d.weights.data();
                    let (fan_in, fan_out) = (d.fan_in(), d.fan_out());
                    let mut out = vec![0.0f64; fan_out];
                    for (i, o) in out.iter_mut().enumerate() {
                        let mut acc = f64::from(d.bias.data()[i]);
                        for (j, &a) in act.iter().enumerate() {
                            acc += a * f64::from(wdata[i * fan_in + j]);
                        }
                        *o = acc;
                    }
                    act = out;
                    shape = [1, 1, fan_out];
                }
                Layer::Relu => {
                    for v in &mut act {
                        let active = *v > 0.0;
                        feed(&mut hash, u64::from(active));
                        if !active {
                            *v = 0.0;
                        }
                    }
                }
                Layer::Softmax => {
                    let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in &mut act {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in &mut act {
                        *v /= sum;
                    }
                }
            }
        }
        let value = match (loss, target) {
            (Loss::CrossEntropy, Target::Class(label)) => -(act[label].max(1e-12).ln()),
            (Loss::SquaredError, Target::Vector(t)) => act
                .iter()
                .zip(t)
                .map(|(&o, &y)| (o - f64::from(y)) * (o - f64::from(y)))
                .sum(),
            _ => {
                return Err(Error::Config(
                    "loss and target kinds do not match".to_string(),
                ))
            }
        };
        Ok((value, hash))
    }

    /// Backward pass for one sample, accumulating parameter gradients.
    fn backward_sample(
        &self,
        acts: &[Tensor],
        target: Target<'_>,
        loss: Loss,
        use_shadow: bool,
        grads: &mut Gradients,
    ) -> Result<()> {
        let n_layers = self.layers.len();
        let output = acts.last().expect("non-empty trace");

        // Gradient wrt the final output; for cross-entropy the softmax layer
        // is folded in below instead.
        let mut g: Vec<f32> = match (loss, target) {
            (Loss::CrossEntropy, Target::Class(_)) => {
                if !matches!(self.layers.last(), Some(Layer::Softmax)) {
                    return Err(Error::Config(
                        "cross-entropy requires a final softmax layer".to_string(),
                    ));
                }
                Vec::new() // unused: replaced at the softmax layer
            }
            (Loss::SquaredError, Target::Vector(t)) => {
                output.iter().zip(t).map(|(&o, &y)| 2.0 * (o - y)).collect()
            }
            _ => {
                return Err(Error::Config(
                    "loss and target kinds do not match".to_string(),
                ))
            }
        };

        for i in (0..n_layers).rev() {
            let input = &acts[i];
            let out = &acts[i + 1];
            match &self.layers[i] {
                Layer::Softmax => {
                    if loss == Loss::CrossEntropy && i == n_layers - 1 {
                        // d(loss)/d(logits) = p - onehot(label)
                        let label = match target {
                            Target::Class(l) => l,
                            Target::Vector(_) => unreachable!("checked above"),
                        };
                        g = out.data().to_vec();
                        g[label] -= 1.0;
                    } else {
                        let p = out.data();
                        let dot: f32 = p.iter().zip(&g).map(|(&pv, &gv)| pv * gv).sum();
                        g = p.iter().zip(&g).map(|(&pv, &gv)| pv * (gv - dot)).collect();
                    }
                }
                Layer::Relu => {
                    for (gv, &x) in g.iter_mut().zip(input.iter()) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                Layer::MaxPool => {
                    g = maxpool_backward(input, &g);
                }
                Layer::Dense(d) => {
                    let wdata = if use_shadow {
                        d.weights.data()
                    } else {
                        d.effective_weights()
                    };
                    let pg = grads.layers[i].as_mut().expect("dense has grads");
                    let fan_in = d.fan_in();
                    let x = input.data();
                    let mut gin = vec![0.0f32; fan_in];
                    for (o, &go) in g.iter().enumerate() {
                        pg.db[o] += go;
                        let dwrow = &mut pg.dw[o * fan_in..][..fan_in];
                        let wrow = &wdata[o * fan_in..][..fan_in];
                        for ((dw, &xv), (gi, &wv)) in
                            dwrow.iter_mut().zip(x).zip(gin.iter_mut().zip(wrow))
                        {
                            *dw += go * xv;
                            *gi += go * wv;
                        }
                    }
                    g = gin;
                }
                Layer::Conv(c) => {
                    let wdata = if use_shadow {
                        c.weights.data()
                    } else {
                        c.effective_weights()
                    };
                    let pg = grads.layers[i].as_mut().expect("conv has grads");
                    g = conv_backward(input, wdata, c.out_channels(), &g, &mut pg.dw, &mut pg.db);
                    // Pruned positions are constants, not parameters.
                    if let Some(m) = &c.mask {
                        for (dwv, &mv) in pg.dw.iter_mut().zip(m.iter()) {
                            if mv == 0.0 {
                                *dwv = 0.0;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// One mini-batch SGD step with cross-entropy loss; returns the mean
    /// batch loss. Masked conv positions receive no update; quantized
    /// layers update their shadow weights and are requantized.
    pub fn sgd_step(&mut self, batch: &[Sample<'_>], learning_rate: f32) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Config(
                "sgd_step needs a non-empty batch".to_string(),
            ));
        }
        let (grads, loss_sum) = self.batch_gradients(batch)?;
        let scale = 1.0 / batch.len() as f32;
        let mean_loss = loss_sum * scale;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { step: self.steps });
        }
        self.apply_update(&grads, learning_rate * scale);
        self.steps += 1;
        Ok(mean_loss)
    }

    /// Gradients are accumulated per fixed-size chunk and the chunks are
    /// reduced in order, so the result does not depend on the thread count.
    fn batch_gradients(&self, batch: &[Sample<'_>]) -> Result<(Gradients, f32)> {
        const CHUNK: usize = 16;
        let chunk_results: Vec<Result<(Gradients, f32)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = Gradients::zeros_like(self);
                let mut loss_sum = 0.0f32;
                for &(patch, label) in chunk {
                    let acts = self.forward_trace(patch, false)?;
                    let out = acts.last().expect("non-empty trace");
                    loss_sum +=
                        self.loss_value(out.data(), Target::Class(label), Loss::CrossEntropy)?;
                    self.backward_sample(
                        &acts,
                        Target::Class(label),
                        Loss::CrossEntropy,
                        false,
                        &mut grads,
                    )?;
                }
                Ok((grads, loss_sum))
            })
            .collect();

        let mut total = Gradients::zeros_like(self);
        let mut loss_sum = 0.0f32;
        for res in chunk_results {
            let (g, l) = res?;
            total.add_assign(&g);
            loss_sum += l;
        }
        Ok((total, loss_sum))
    }

    fn apply_update(&mut self, grads: &Gradients, scaled_lr: f32) {
        for (layer, pg) in self.layers.iter_mut().zip(&grads.layers) {
            let Some(pg) = pg.as_ref() else { continue };
            match layer {
                Layer::Conv(c) => {
                    // Masked slots arrive with zero gradient, but guard the
                    // stays-zero invariant against rounding regardless.
                    match &c.mask {
                        Some(m) => {
                            for ((wv, &gv), &mv) in
                                c.weights.data_mut().iter_mut().zip(&pg.dw).zip(m.iter())
                            {
                                if mv != 0.0 {
                                    *wv -= scaled_lr * gv;
                                }
                            }
                        }
                        None => {
                            for (wv, &gv) in c.weights.data_mut().iter_mut().zip(&pg.dw) {
                                *wv -= scaled_lr * gv;
                            }
                        }
                    }
                    for (bv, &gv) in c.bias.data_mut().iter_mut().zip(&pg.db) {
                        *bv -= scaled_lr * gv;
                    }
                    if c.quant.is_some() {
                        c.quant = Some(ternarize(&c.weights).expect("finite weights"));
                    }
                }
                Layer::Dense(d) => {
                    for (wv, &gv) in d.weights.data_mut().iter_mut().zip(&pg.dw) {
                        *wv -= scaled_lr * gv;
                    }
                    for (bv, &gv) in d.bias.data_mut().iter_mut().zip(&pg.db) {
                        *bv -= scaled_lr * gv;
                    }
                    if d.quant.is_some() {
                        d.quant = Some(ternarize(&d.weights).expect("finite weights"));
                    }
                }
                _ => {}
            }
        }
    }
}

fn validate_code(
    layer_idx: usize,
    code: &TernaryCode,
    weights: &Tensor,
    mask: Option<&Tensor>,
) -> Result<()> {
    if code.shape() != weights.shape() {
        return Err(Error::shape(
            format!("layer {layer_idx} ternary code"),
            weights.shape().to_vec(),
            code.shape().to_vec(),
        ));
    }
    for (j, &v) in code.values().iter().enumerate() {
        if v != -1.0 && v != 0.0 && v != 1.0 {
            return Err(Error::Config(format!(
                "layer {layer_idx} code[{j}] = {v}, must be -1, 0 or +1"
            )));
        }
        if let Some(m) = mask {
            if m.data()[j] == 0.0 && v != 0.0 {
                return Err(Error::Config(format!(
                    "layer {layer_idx} code[{j}] = {v} under a zero mask"
                )));
            }
        }
    }
    Ok(())
}

/// Gradient wrt the pool input; ties route to the first maximal element in
/// row-major window order.
fn maxpool_backward(input: &Tensor, gout: &[f32]) -> Vec<f32> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let data = input.data();
    let mut gin = vec![0.0f32; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &gout[(oy * ow + ox) * c..][..c];
            for (ch, g) in grow.iter().enumerate() {
                let mut best_val = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2usize {
                    let y = oy * 2 + dy;
                    if y >= h {
                        continue;
                    }
                    for dx in 0..2usize {
                        let x = ox * 2 + dx;
                        if x >= w {
                            continue;
                        }
                        let idx = (y * w + x) * c + ch;
                        if data[idx] > best_val {
                            best_val = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                gin[best_idx] += g;
            }
        }
    }
    gin
}

/// Conv backward: accumulates weight/bias gradients and returns the
/// gradient wrt the layer input.
fn conv_backward(
    input: &Tensor,
    weights: &[f32],
    cout: usize,
    gout: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
) -> Vec<f32> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let idata = input.data();
    let mut gin = vec![0.0f32; h * w * cin];
    for y in 0..h {
        for x in 0..w {
            let grow = &gout[(y * w + x) * cout..][..cout];
            for (b, &gv) in db.iter_mut().zip(grow) {
                *b += gv;
            }
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pix = (iy as usize * w + ix as usize) * cin;
                    let ipix = &idata[pix..][..cin];
                    let gpix = &mut gin[pix..][..cin];
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for (ci, (&a, gi)) in ipix.iter().zip(gpix.iter_mut()).enumerate() {
                        let wrow = &weights[wbase + ci * cout..][..cout];
                        let dwrow = &mut dw[wbase + ci * cout..][..cout];
                        let mut acc = 0.0f32;
                        for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(grow) {
                            *dwv += a * gv;
                            acc += wv * gv;
                        }
                        *gi += acc;
                    }
                }
            }
        }
    }
    gin
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..len)
        .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * bound)
        .collect()
}

/// Fresh 3x3 conv layer with uniform scaled init and zero bias.
pub fn init_conv(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
    let len = 9 * cin * cout;
    let weights = Tensor::new(
        [3, 3, cin, cout],
        glorot_uniform(rng, 9 * cin, 9 * cout, len),
    )
    .expect("valid conv shape");
    ConvLayer {
        weights,
        bias: Tensor::zeros([cout]),
        mask: None,
        quant: None,
    }
}

/// Fresh dense layer with uniform scaled init and zero bias.
pub fn init_dense(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> DenseLayer {
    let weights = Tensor::new(
        [fan_out, fan_in],
        glorot_uniform(rng, fan_in, fan_out, fan_in * fan_out),
    )
    .expect("valid dense shape");
    DenseLayer {
        weights,
        bias: Tensor::zeros([fan_out]),
        quant: None,
    }
}

// ---------------------------------------------------------------------------
// Training helpers
// ---------------------------------------------------------------------------

/// The seeded generator used for every training-time random decision.
pub fn train_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One pass over `samples` in shuffled mini-batches; returns the mean loss.
pub fn train_epoch(
    net: &mut Network,
    samples: &[Sample<'_>],
    batch_size: usize,
    learning_rate: f32,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if samples.is_empty() {
        return Err(Error::Config(
            "cannot train on an empty dataset".to_string(),
        ));
    }
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    shuffle(&mut order, rng);
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    let mut batch = Vec::with_capacity(batch_size);
    for chunk in order.chunks(batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| samples[i]));
        let loss = net.sgd_step(&batch, learning_rate)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((loss_sum / count as f64) as f32)
}

/// Fisher-Yates shuffle driven by the given rng.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Fraction of samples whose argmax class matches the label.
pub fn accuracy(net: &Network, samples: &[Sample<'_>]) -> Result<f32> {
    if samples.is_empty() {
        return Err(Error::Config(
            "accuracy over an empty set is undefined".to_string(),
        ));
    }
    let correct = samples
        .par_iter()
        .map(|&(patch, label)| Ok(usize::from(net.classify(patch)? == label)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f32 / samples.len() as f32)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// How many parameters the gradient check samples by default.
pub const GRADIENT_CHECK_SAMPLES: usize = 200;

#[derive(Clone, Copy)]
enum Slot {
    Weight(usize, usize),
    Bias(usize, usize),
}

/// Compares backprop against central differences on a random subset of at
/// least [`GRADIENT_CHECK_SAMPLES`] parameters (all of them on smaller
/// networks) and returns the maximum relative error,
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
///
/// The check runs on the shadow (unquantized) weights. Masked conv slots
/// have derivative exactly zero by the masking contract, so they are
/// scored against a zero central difference without perturbation.
pub fn gradient_check(
    net: &mut Network,
    input: &Tensor,
    target: Target<'_>,
    loss: Loss,
    epsilon: f32,
    seed: u64,
) -> Result<f32> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!(
            "gradient-check epsilon {epsilon} outside [1e-5, 1e-2]"
        )));
    }

    let acts = net.forward_trace(input, true)?;
    let mut grads = Gradients::zeros_like(net);
    net.backward_sample(&acts, target, loss, true, &mut grads)?;

    let mut slots = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                slots.extend((0..c.weights.len()).map(|j| Slot::Weight(i, j)));
                slots.extend((0..c.bias.len()).map(|j| Slot::Bias(i, j)));
            }
            Layer::Dense(d) => {
                slots.extend((0..d.weights.len()).map(|j| Slot::Weight(i, j)));
                slots.extend((0..d.bias.len()).map(|j| Slot::Bias(i, j)));
            }
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = slots.len().min(GRADIENT_CHECK_SAMPLES);
    shuffle(&mut slots, &mut rng);

    let mut max_rel = 0.0f64;
    let mut scored = 0usize;
    for &slot in &slots {
        if scored >= take {
            break;
        }
        let (layer_idx, j, analytic, masked) = match slot {
            Slot::Weight(i, j) => {
                let pg = grads.layers[i].as_ref().expect("param layer");
                let masked = match &net.layers[i] {
                    Layer::Conv(c) => c.mask.as_ref().is_some_and(|m| m.data()[j] == 0.0),
                    _ => false,
                };
                (i, j, pg.dw[j], masked)
            }
            Slot::Bias(i, j) => {
                let pg = grads.layers[i].as_ref().expect("param layer");
                (i, j, pg.db[j], false)
            }
        };
        let cd = if masked {
            0.0f64
        } else {
            let is_weight = matches!(slot, Slot::Weight(..));
            let original = read_param(net, layer_idx, j, is_weight);
            write_param(net, layer_idx, j, is_weight, original + epsilon);
            let (plus, path_plus) = net.loss_f64(input, target, loss)?;
            write_param(net, layer_idx, j, is_weight, original - epsilon);
            let (minus, path_minus) = net.loss_f64(input, target, loss)?;
            write_param(net, layer_idx, j, is_weight, original);
            if path_plus != path_minus {
                // A ReLU sign or pool pick flipped inside [p - eps, p + eps]:
                // the loss is not differentiable there, so this slot cannot
                // be scored; move on to the next sampled parameter.
                continue;
            }
            (plus - minus) / (2.0 * f64::from(epsilon))
        };
        let a = f64::from(analytic);
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
        scored += 1;
    }
    Ok(max_rel as f32)
}

fn read_param(net: &Network, layer_idx: usize, j: usize, weight: bool) -> f32 {
    match &net.layers[layer_idx] {
        Layer::Conv(c) => {
            if weight {
                c.weights.data()[j]
            } else {
                c.bias.data()[j]
            }
        }
        Layer::Dense(d) => {
            if weight {
                d.weights.data()[j]
            } else {
                d.bias.data()[j]
            }
        }
        _ => unreachable!("slot layers carry parameters"),
    }
}

fn write_param(net: &mut Network, layer_idx: usize, j: usize, weight: bool, value: f32) {
    match &mut net.layers[layer_idx] {
        Layer::Conv(c) => {
            if weight {
                c.weights.data_mut()[j] = value;
            } else {
                c.bias.data_mut()[j] = value;
            }
        }
        Layer::Dense(d) => {
            if weight {
                d.weights.data_mut()[j] = value;
            } else {
                d.bias.data_mut()[j] = value;
            }
        }
        _ => unreachable!("slot layers carry parameters"),
    }
}
