//! Learnable pullback metrics: pixel autoencoders whose latent space carries the base metric.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{patched_magnitude, tiles, PatchConfig};
use crate::edges::{gaussian_blur, weights_to_edges, EdgeMap, BLUR_SIZE};
use crate::error::{Error, Result};
use crate::exact::{magnitude_weights, solve_similarity};
use crate::image::DigitalImage;
use crate::metric::{base_features, similarity_matrix, BaseMetric, Features, MetricSpec};

/// Channels produced by the convolutional front end of Model III.
pub const CONV_FEATURES: usize = 15;
/// Half-width of the uniform initialisation.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    ModelI,
    ModelII,
    ModelIII,
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("model") {
            "i" | "1" => Ok(Self::ModelI),
            "ii" | "2" => Ok(Self::ModelII),
            "iii" | "3" => Ok(Self::ModelIII),
            _ => Err(Error::config(format!("unknown model `{s}`, expected I, II or III"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ModelI => "I",
            Self::ModelII => "II",
            Self::ModelIII => "III",
        })
    }
}

/// Fully connected layer `y = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub shape: [usize; 2],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Dense {
    fn random(outputs: usize, inputs: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            shape: [outputs, inputs],
            weight: (0..outputs * inputs).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
            bias: (0..outputs).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
            relu,
        }
    }

    fn outputs(&self) -> usize {
        self.shape[0]
    }

    fn inputs(&self) -> usize {
        self.shape[1]
    }

    /// Pre-activations and activations of a row-major batch.
    fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let (o, d) = (self.outputs(), self.inputs());
        let mut pre = vec![0.0; n * o];
        for p in 0..n {
            let row = &x[p * d..(p + 1) * d];
            for k in 0..o {
                let w = &self.weight[k * d..(k + 1) * d];
                pre[p * o + k] = self.bias[k] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let act = if self.relu { pre.iter().map(|v| v.max(0.0)).collect() } else { pre.clone() };
        (pre, act)
    }

    /// Accumulates parameter gradients and returns the gradient with respect to the input.
    fn backward(&self, x: &[f64], pre: &[f64], mut g: Vec<f64>, n: usize, gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let (o, d) = (self.outputs(), self.inputs());
        if self.relu {
            for (gi, p) in g.iter_mut().zip(pre) {
                if *p <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        let mut gx = vec![0.0; n * d];
        for p in 0..n {
            let row = &x[p * d..(p + 1) * d];
            for k in 0..o {
                let gk = g[p * o + k];
                if gk == 0.0 {
                    continue;
                }
                gb[k] += gk;
                let w = &self.weight[k * d..(k + 1) * d];
                for j in 0..d {
                    gw[k * d + j] += gk * row[j];
                    gx[p * d + j] += gk * w[j];
                }
            }
        }
        gx
    }
}

/// 3x3 convolution with replicated borders, stride 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3 {
    pub shape: [usize; 2],
    /// Indexed `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3 {
    fn random(outputs: usize, inputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            shape: [outputs, inputs],
            weight: (0..outputs * inputs * 9).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
            bias: (0..outputs).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
        }
    }

    /// Neighbourhood offsets of pixel `p` in a `w x h` grid, clamped at the borders.
    fn taps(p: usize, w: usize, h: usize) -> [usize; 9] {
        let (x, y) = ((p % w) as isize, (p / w) as isize);
        let mut out = [0; 9];
        for (t, slot) in out.iter_mut().enumerate() {
            let nx = (x + (t % 3) as isize - 1).clamp(0, w as isize - 1) as usize;
            let ny = (y + (t / 3) as isize - 1).clamp(0, h as isize - 1) as usize;
            *slot = ny * w + nx;
        }
        out
    }

    /// `input` is `n x inputs` row-major over a `w x h` grid.
    fn forward(&self, input: &[f64], w: usize, h: usize) -> Vec<f64> {
        let [o, c] = self.shape;
        let n = w * h;
        let mut out = vec![0.0; n * o];
        for p in 0..n {
            let taps = Self::taps(p, w, h);
            for k in 0..o {
                let mut acc = self.bias[k];
                for ch in 0..c {
                    for (t, &q) in taps.iter().enumerate() {
                        acc += self.weight[(k * c + ch) * 9 + t] * input[q * c + ch];
                    }
                }
                out[p * o + k] = acc;
            }
        }
        out
    }

    fn backward(&self, input: &[f64], g: &[f64], w: usize, h: usize, gw: &mut [f64], gb: &mut [f64]) {
        let [o, c] = self.shape;
        for p in 0..w * h {
            let taps = Self::taps(p, w, h);
            for k in 0..o {
                let gk = g[p * o + k];
                gb[k] += gk;
                for ch in 0..c {
                    for (t, &q) in taps.iter().enumerate() {
                        gw[(k * c + ch) * 9 + t] += gk * input[q * c + ch];
                    }
                }
            }
        }
    }
}

/// Pixel autoencoder: optional convolution, dense encoder, mirrored dense decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub architecture: Architecture,
    pub input_channels: usize,
    pub conv: Option<Conv3>,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

/// Cached activations of one forward pass.
struct Pass {
    conv_input: Vec<f64>,
    input: Vec<f64>,
    enc: Vec<(Vec<f64>, Vec<f64>)>,
    dec: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Pass {
    fn latent(&self) -> &[f64] {
        self.enc.last().map(|l| l.1.as_slice()).unwrap_or(&self.input)
    }

    fn reconstruction(&self) -> &[f64] {
        &self.dec.last().expect("decoder has layers").1
    }
}

impl EmbeddingModel {
    /// Randomly initialised model; Model I starts with an identity-plus-zero encoder.
    pub fn new(architecture: Architecture, input_channels: usize, seed: u64) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::config("embedding needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = 2 + input_channels;
        let model = match architecture {
            Architecture::ModelI => {
                if base > 10 {
                    return Err(Error::config(format!("Model I supports at most 8 channels, got {input_channels}")));
                }
                let mut encoder = Dense::random(10, base, false, &mut rng);
                encoder.weight = (0..10 * base).map(|i| if i / base == i % base { 1.0 } else { 0.0 }).collect();
                encoder.bias = vec![0.0; 10];
                Self {
                    architecture,
                    input_channels,
                    conv: None,
                    encoder: vec![encoder],
                    decoder: vec![Dense::random(base, 10, false, &mut rng)],
                }
            }
            Architecture::ModelII | Architecture::ModelIII => {
                let conv = (architecture == Architecture::ModelIII)
                    .then(|| Conv3::random(CONV_FEATURES, input_channels, &mut rng));
                let d0 = base + if conv.is_some() { CONV_FEATURES } else { 0 };
                let encoder = vec![
                    Dense::random(10, d0, true, &mut rng),
                    Dense::random(20, 10, true, &mut rng),
                    Dense::random(40, 20, false, &mut rng),
                ];
                let decoder = vec![
                    Dense::random(20, 40, true, &mut rng),
                    Dense::random(10, 20, true, &mut rng),
                    Dense::random(d0, 10, false, &mut rng),
                ];
                Self {
                    architecture,
                    input_channels,
                    conv,
                    encoder,
                    decoder,
                }
            }
        };
        Ok(model)
    }

    /// Model I whose encoder is exactly `(x, y, c) -> (x, y, c, 0, ..., 0)`.
    pub fn identity_model_i(input_channels: usize) -> Result<Self> {
        Self::new(Architecture::ModelI, input_channels, 0)
    }

    pub fn input_dim(&self) -> usize {
        2 + self.input_channels + if self.conv.is_some() { CONV_FEATURES } else { 0 }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map(Dense::outputs).unwrap_or(self.input_dim())
    }

    fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        if let Some(c) = &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// All parameters flattened in a fixed order: convolution, encoder, decoder; weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(c) = &self.conv {
            out.extend(&c.weight);
            out.extend(&c.bias);
        }
        for l in self.encoder.iter().chain(&self.decoder) {
            out.extend(&l.weight);
            out.extend(&l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                left: params.len(),
                right: self.param_count(),
            });
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        if let Some(c) = &self.conv {
            if c.shape != [CONV_FEATURES, self.input_channels] || c.weight.len() != c.shape[0] * c.shape[1] * 9 {
                return Err(Error::config("convolution shape does not match the model input"));
            }
        }
        for l in self.encoder.iter().chain(&self.decoder) {
            if l.inputs() != dim || l.weight.len() != l.outputs() * l.inputs() || l.bias.len() != l.outputs() {
                return Err(Error::config(format!("layer shape {:?} does not chain from width {dim}", l.shape)));
            }
            dim = l.outputs();
        }
        if dim != self.input_dim() {
            return Err(Error::config("decoder output does not match the input dimension"));
        }
        Ok(())
    }

    fn forward(&self, img: &DigitalImage, spec: &MetricSpec) -> Result<Pass> {
        if img.channels() != self.input_channels {
            return Err(Error::DimensionMismatch {
                left: img.channels(),
                right: self.input_channels,
            });
        }
        let n = img.len();
        let base = base_features(img, spec);
        let (conv_input, input) = match &self.conv {
            None => (Vec::new(), base.as_slice().to_vec()),
            Some(conv) => {
                let b = base.dim();
                let values: Vec<f64> = base.rows().flat_map(|r| r[2..].to_vec()).collect();
                let feats = conv.forward(&values, img.width(), img.height());
                let mut input = Vec::with_capacity(n * (b + CONV_FEATURES));
                for p in 0..n {
                    input.extend_from_slice(base.row(p));
                    input.extend_from_slice(&feats[p * CONV_FEATURES..(p + 1) * CONV_FEATURES]);
                }
                (values, input)
            }
        };
        let mut enc = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let x = enc.last().map(|l: &(Vec<f64>, Vec<f64>)| l.1.as_slice()).unwrap_or(&input);
            enc.push(layer.forward(x, n));
        }
        let mut dec = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let x = match dec.last() {
                Some((_, a)) => a,
                None => enc.last().map(|l| &l.1).unwrap_or(&input),
            };
            let out = layer.forward(x, n);
            dec.push(out);
        }
        Ok(Pass {
            conv_input,
            input,
            enc,
            dec,
        })
    }

    /// Latent vectors of every pixel of `img`, with coordinates local to the image.
    pub fn encode_image(&self, img: &DigitalImage, spec: &MetricSpec) -> Result<Features> {
        let pass = self.forward(img, spec)?;
        Features::new(self.latent_dim(), pass.latent().to_vec())
    }

    /// Reconstruction of the encoder input, row-major `n x input_dim`.
    pub fn reconstruct(&self, img: &DigitalImage, spec: &MetricSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        let pass = self.forward(img, spec)?;
        Ok((pass.input.clone(), pass.reconstruction().to_vec()))
    }

    /// Backward pass from gradients on the latent code, the reconstruction and the encoder input.
    fn backward(&self, pass: &Pass, img: &DigitalImage, g_latent: Vec<f64>, g_recon: Vec<f64>, mut g_input: Vec<f64>) -> Vec<f64> {
        let n = img.len();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();
        let ne = self.encoder.len();

        let mut g = g_recon;
        for (i, layer) in self.decoder.iter().enumerate().rev() {
            let x = if i == 0 { pass.latent() } else { &pass.dec[i - 1].1 };
            let (gw, gb) = &mut grads[ne + i];
            g = layer.backward(x, &pass.dec[i].0, g, n, gw, gb);
        }
        for (a, b) in g.iter_mut().zip(&g_latent) {
            *a += b;
        }
        for (i, layer) in self.encoder.iter().enumerate().rev() {
            let x = if i == 0 { &pass.input } else { &pass.enc[i - 1].1 };
            let (gw, gb) = &mut grads[i];
            g = layer.backward(x, &pass.enc[i].0, g, n, gw, gb);
        }
        for (a, b) in g_input.iter_mut().zip(&g) {
            *a += b;
        }

        let mut out = Vec::with_capacity(self.param_count());
        if let Some(conv) = &self.conv {
            let d0 = self.input_dim();
            let b = d0 - CONV_FEATURES;
            let g_feats: Vec<f64> = (0..n).flat_map(|p| g_input[p * d0 + b..(p + 1) * d0].to_vec()).collect();
            let mut gw = vec![0.0; conv.weight.len()];
            let mut gb = vec![0.0; conv.bias.len()];
            conv.backward(&pass.conv_input, &g_feats, img.width(), img.height(), &mut gw, &mut gb);
            out.extend(gw);
            out.extend(gb);
        }
        for (gw, gb) in grads {
            out.extend(gw);
            out.extend(gb);
        }
        out
    }
}

/// Magnitude weights of a patch under the pullback of the base metric through `model`.
pub fn pullback_magnitude(patch: &DigitalImage, model: &EmbeddingModel, spec: &MetricSpec) -> Result<Vec<f64>> {
    let latent = model.encode_image(patch, spec)?;
    Ok(magnitude_weights(&latent, spec.base)?.weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ae: f64,
    pub mag: f64,
}

/// Indices of pixels at least `margin` away from the patch border.
fn interior(w: usize, h: usize, margin: usize) -> Vec<usize> {
    (margin..h.saturating_sub(margin))
        .flat_map(|y| (margin..w.saturating_sub(margin)).map(move |x| y * w + x))
        .collect()
}

fn check_labels(patch: &DigitalImage, labels: &[f64]) -> Result<()> {
    if labels.len() != patch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a {}x{} patch",
            labels.len(),
            patch.width(),
            patch.height()
        )));
    }
    Ok(())
}

/// Squared error on edge pixels plus absolute error on the rest, each averaged over its class.
///
/// Labels are binarised at 0.5; an empty class contributes nothing.
pub fn magnitude_loss(pred: &[f64], labels: &[f64]) -> f64 {
    split_loss(pred, labels, |r| r * r, |r| r.abs())
}

/// Absolute error averaged per class, summed over both classes.
pub fn validation_loss_of(pred: &[f64], labels: &[f64]) -> f64 {
    split_loss(pred, labels, f64::abs, f64::abs)
}

fn split_loss(pred: &[f64], labels: &[f64], pos: impl Fn(f64) -> f64, neg: impl Fn(f64) -> f64) -> f64 {
    let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        if y >= 0.5 {
            sp += pos(p - 1.0);
            np += 1;
        } else {
            sn += neg(p);
            nn += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(sp, np) + mean(sn, nn)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Everything one loss evaluation needs.
pub struct LossInput<'a> {
    pub patch: &'a DigitalImage,
    pub labels: &'a [f64],
    pub spec: &'a MetricSpec,
    pub lambda: f64,
    /// Border pixels excluded from both loss terms.
    pub margin: usize,
}

fn evaluate(model: &EmbeddingModel, input: &LossInput<'_>, want_grad: bool) -> Result<(LossValue, Option<Vec<f64>>)> {
    let LossInput {
        patch,
        labels,
        spec,
        lambda,
        margin,
    } = *input;
    check_labels(patch, labels)?;
    if spec.base == BaseMetric::Hamming {
        return Err(Error::config("the Hamming metric has no gradient"));
    }
    let pass = model.forward(patch, spec)?;
    let n = patch.len();
    let d0 = model.input_dim();
    let inner = interior(patch.width(), patch.height(), margin);
    if inner.is_empty() {
        return Err(Error::config(format!("margin {margin} leaves no interior pixels")));
    }

    let recon = pass.reconstruction();
    let scale = 1.0 / (inner.len() * d0) as f64;
    let mut ae = 0.0;
    let mut g_recon = vec![0.0; n * d0];
    let mut g_input = vec![0.0; n * d0];
    for &p in &inner {
        for k in 0..d0 {
            let r = recon[p * d0 + k] - pass.input[p * d0 + k];
            ae += r * r;
            g_recon[p * d0 + k] = 2.0 * r * scale;
            g_input[p * d0 + k] = -2.0 * r * scale;
        }
    }
    ae *= scale;

    let dim = model.latent_dim();
    let latent = Features::new(dim, pass.latent().to_vec())?;
    let zeta = similarity_matrix(&latent, spec.base);
    let solve = solve_similarity(&zeta, Some(&latent))?;
    let w = &solve.weights;
    let pred: Vec<f64> = inner.iter().map(|&p| w[p]).collect();
    let lab: Vec<f64> = inner.iter().map(|&p| labels[p]).collect();
    let mag = magnitude_loss(&pred, &lab);
    let value = LossValue {
        total: ae + lambda * mag,
        ae,
        mag,
    };
    if !want_grad {
        return Ok((value, None));
    }

    let np = lab.iter().filter(|&&y| y >= 0.5).count();
    let nn = lab.len() - np;
    let mut gw = vec![0.0; n];
    for (&p, &y) in inner.iter().zip(&lab) {
        gw[p] = if y >= 0.5 {
            lambda * 2.0 * (w[p] - 1.0) / np as f64
        } else {
            lambda * sign(w[p]) / nn as f64
        };
    }
    let mut g_latent = vec![0.0; n * dim];
    if gw.iter().any(|&g| g != 0.0) {
        let adj = solve.solve(&gw);
        let z = latent.as_slice();
        for i in 0..n {
            let zi = &z[i * dim..(i + 1) * dim];
            for j in (i + 1)..n {
                let zj = &z[j * dim..(j + 1) * dim];
                let c = (adj[i] * w[j] + adj[j] * w[i]) * zeta.get(i, j);
                if c == 0.0 {
                    continue;
                }
                match spec.base {
                    BaseMetric::L2 => {
                        let dist = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                        if dist == 0.0 {
                            continue;
                        }
                        for k in 0..dim {
                            let t = c * (zi[k] - zj[k]) / dist;
                            g_latent[i * dim + k] += t;
                            g_latent[j * dim + k] -= t;
                        }
                    }
                    _ => {
                        for k in 0..dim {
                            let t = c * sign(zi[k] - zj[k]);
                            g_latent[i * dim + k] += t;
                            g_latent[j * dim + k] -= t;
                        }
                    }
                }
            }
        }
    }
    let grad = model.backward(&pass, patch, g_latent, g_recon, g_input);
    Ok((value, Some(grad)))
}

/// `L_AE + lambda * L_mag` and its gradient with respect to `model.params()`.
pub fn loss(model: &EmbeddingModel, input: &LossInput<'_>) -> Result<(LossValue, Vec<f64>)> {
    let (value, grad) = evaluate(model, input, true)?;
    Ok((value, grad.expect("gradient requested")))
}

pub fn loss_value(model: &EmbeddingModel, input: &LossInput<'_>) -> Result<LossValue> {
    Ok(evaluate(model, input, false)?.0)
}

/// Validation loss of a patch: per-class absolute errors of the pullback weights.
pub fn validation_loss(
    patch: &DigitalImage,
    labels: &[f64],
    model: &EmbeddingModel,
    spec: &MetricSpec,
    margin: usize,
) -> Result<f64> {
    check_labels(patch, labels)?;
    let w = pullback_magnitude(patch, model, spec)?;
    let inner = interior(patch.width(), patch.height(), margin);
    let pred: Vec<f64> = inner.iter().map(|&p| w[p]).collect();
    let lab: Vec<f64> = inner.iter().map(|&p| labels[p]).collect();
    Ok(validation_loss_of(&pred, &lab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Random,
    SingleShot,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "random" => Ok(Self::Random),
            "single-shot" | "singleshot" => Ok(Self::SingleShot),
            _ => Err(Error::config(format!("unknown scenario `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub lambda: f64,
    pub patch: PatchConfig,
    pub epochs: usize,
    pub scenario: Scenario,
    pub validation_fraction: f64,
    pub seed: u64,
    pub blur_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ModelI,
            learning_rate: 1e-3,
            lambda: 1.0,
            patch: PatchConfig::edges(),
            epochs: 100,
            scenario: Scenario::Random,
            validation_fraction: 0.2,
            seed: 0,
            blur_size: BLUR_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.patch.validate()
    }
}

/// A training window: the patch with its context ring and labels on the same grid.
#[derive(Clone, Debug)]
pub struct TrainPatch {
    pub image: DigitalImage,
    pub labels: Vec<f64>,
    pub source: usize,
    pub origin: (usize, usize),
}

fn extract(img: &DigitalImage, labels: &[bool], cfg: &PatchConfig, source: usize, (x0, y0, w, h): (usize, usize, usize, usize)) -> TrainPatch {
    let d = cfg.overlap as isize;
    let (ww, wh) = (w + 2 * cfg.overlap, h + 2 * cfg.overlap);
    let image = img.window(x0 as isize - d, y0 as isize - d, ww, wh, cfg.pad);
    let (iw, ih) = (img.width() as isize, img.height() as isize);
    let labels = (0..wh)
        .flat_map(|y| (0..ww).map(move |x| (x, y)))
        .map(|(x, y)| {
            let gx = (x0 as isize + x as isize - d).clamp(0, iw - 1) as usize;
            let gy = (y0 as isize + y as isize - d).clamp(0, ih - 1) as usize;
            if labels[gy * img.width() + gx] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    TrainPatch {
        image,
        labels,
        source,
        origin: (x0, y0),
    }
}

/// Patches for a run: one random patch per image, or every tile of the first image.
pub fn sample_patches(data: &[(DigitalImage, Vec<bool>)], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TrainPatch>> {
    let (pw, ph) = (cfg.patch.patch_w, cfg.patch.patch_h);
    let mut out = Vec::new();
    for (i, (img, labels)) in data.iter().enumerate() {
        if labels.len() != img.len() {
            return Err(Error::ShapeMismatch(format!("labels of image {i} do not match its size")));
        }
        if cfg.scenario == Scenario::SingleShot && i > 0 {
            break;
        }
        let blurred = gaussian_blur(img, cfg.blur_size, None)?;
        match cfg.scenario {
            Scenario::Random => {
                let (w, h) = (pw.min(img.width()), ph.min(img.height()));
                let x0 = rng.random_range(0..=img.width() - w);
                let y0 = rng.random_range(0..=img.height() - h);
                out.push(extract(&blurred, labels, &cfg.patch, i, (x0, y0, w, h)));
            }
            Scenario::SingleShot => {
                for tile in tiles(img.width(), img.height(), pw, ph) {
                    out.push(extract(&blurred, labels, &cfg.patch, i, tile));
                }
            }
        }
    }
    Ok(out)
}

/// Number of held-out patches among `total`.
pub fn validation_count(total: usize, fraction: f64) -> usize {
    if total < 2 {
        return 0;
    }
    ((total as f64 * fraction).round() as usize).clamp(1, total - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub cfg: TrainConfig,
    pub validation_loss: f64,
    /// Epoch of the stored parameters; 0 is the initialisation.
    pub epoch: usize,
    /// Validation loss after every epoch, starting with the initialisation.
    pub history: Vec<f64>,
    pub train_patches: usize,
    pub validation_patches: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.model.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn mean_validation(model: &EmbeddingModel, patches: &[TrainPatch], cfg: &TrainConfig) -> Result<f64> {
    if patches.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for p in patches {
        total += validation_loss(&p.image, &p.labels, model, &cfg.patch.metric, cfg.patch.overlap)?;
    }
    Ok(total / patches.len() as f64)
}

/// Mean training magnitude loss over a set of patches.
pub fn mean_magnitude_loss(model: &EmbeddingModel, patches: &[TrainPatch], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for p in patches {
        let w = pullback_magnitude(&p.image, model, &cfg.patch.metric)?;
        let inner = interior(p.image.width(), p.image.height(), cfg.patch.overlap);
        let pred: Vec<f64> = inner.iter().map(|&i| w[i]).collect();
        let lab: Vec<f64> = inner.iter().map(|&i| p.labels[i]).collect();
        total += magnitude_loss(&pred, &lab);
    }
    Ok(total / patches.len().max(1) as f64)
}

/// Result of a run together with the fixed patch split it used.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub train: Vec<TrainPatch>,
    pub validation: Vec<TrainPatch>,
    pub initial: EmbeddingModel,
}

/// Plain SGD, one patch per step; keeps the parameters with the smallest validation loss.
pub fn train(data: &[(DigitalImage, Vec<bool>)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (first, _) = data.first().ok_or_else(|| Error::config("training needs at least one image"))?;
    if data.iter().all(|(_, l)| l.iter().all(|&b| !b)) {
        warn!("no edge pixels in any label; training proceeds without the edge term");
    }
    let channels = first.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = EmbeddingModel::new(cfg.architecture, channels, rng.random())?;

    let mut patches = sample_patches(data, cfg, &mut rng)?;
    patches.shuffle(&mut rng);
    let n_val = validation_count(patches.len(), cfg.validation_fraction);
    let train_set = patches.split_off(n_val);
    let mut val_set = patches;
    if val_set.is_empty() {
        warn!("only one patch available; validating on the training patch");
        val_set = train_set.clone();
    }

    let mut model = init.clone();
    let mut best = (mean_validation(&model, &val_set, cfg)?, 0usize, model.clone());
    let mut history = vec![best.0];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut params = model.params();
        for &i in &order {
            let p = &train_set[i];
            let input = LossInput {
                patch: &p.image,
                labels: &p.labels,
                spec: &cfg.patch.metric,
                lambda: cfg.lambda,
                margin: cfg.patch.overlap,
            };
            match loss(&model, &input) {
                Ok((_, grad)) => {
                    for (a, g) in params.iter_mut().zip(&grad) {
                        *a -= cfg.learning_rate * g;
                    }
                    model.set_params(&params)?;
                }
                Err(e) if e.is_numerical() => warn!("epoch {epoch}: skipping patch {i}: {e}"),
                Err(e) => return Err(e),
            }
        }
        let v = match mean_validation(&model, &val_set, cfg) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => f64::INFINITY,
            Err(e) => return Err(e),
        };
        info!("epoch {epoch}: validation loss {v:.6}");
        history.push(v);
        if v < best.0 {
            best = (v, epoch, model.clone());
        }
    }
    let checkpoint = Checkpoint {
        model: best.2,
        cfg: cfg.clone(),
        validation_loss: best.0,
        epoch: best.1,
        history,
        train_patches: train_set.len(),
        validation_patches: n_val,
    };
    Ok(TrainOutcome {
        checkpoint,
        train: train_set,
        validation: val_set,
        initial: init,
    })
}

/// Full-resolution edge map from a learned metric: blur, patched pullback magnitude, abs, min-max.
pub fn transform_image(img: &DigitalImage, model: &Arc<EmbeddingModel>, cfg: &PatchConfig, blur_size: usize) -> Result<EdgeMap> {
    let blurred = gaussian_blur(img, blur_size, None)?;
    let cfg = cfg.clone().with_metric(cfg.metric.clone().with_embedding(Arc::clone(model)));
    let map = patched_magnitude(&blurred, &cfg)?;
    Ok(weights_to_edges(map.width, map.height, &map.weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::magnitude_vector;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> DigitalImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DigitalImage::new(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn architecture_dimensions() {
        for (arch, latent) in [(Architecture::ModelI, 10), (Architecture::ModelII, 40), (Architecture::ModelIII, 40)] {
            let m = EmbeddingModel::new(arch, 3, 1).unwrap();
            assert_eq!(m.latent_dim(), latent);
            let img = random_image(4, 3, 3, 2);
            let (input, recon) = m.reconstruct(&img, &MetricSpec::default()).unwrap();
            assert_eq!(input.len(), recon.len());
            assert_eq!(input.len(), 12 * m.input_dim());
        }
        assert_eq!(EmbeddingModel::new(Architecture::ModelIII, 3, 0).unwrap().input_dim(), 20);
        assert!(EmbeddingModel::new(Architecture::ModelI, 9, 0).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut m = EmbeddingModel::new(Architecture::ModelIII, 3, 5).unwrap();
        let p: Vec<f64> = (0..m.param_count()).map(|i| i as f64).collect();
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert!(m.set_params(&p[1..]).is_err());
    }

    #[test]
    fn identity_pullback_is_vanilla() {
        let img = random_image(5, 4, 3, 3);
        let model = EmbeddingModel::identity_model_i(3).unwrap();
        let spec = MetricSpec::l1(2.0);
        let a = pullback_magnitude(&img, &model, &spec).unwrap();
        let b = magnitude_vector(&img, &spec).unwrap().weights;
        assert_eq!(a, b);
    }

    #[test]
    fn doubled_encoder_doubles_distances() {
        let img = random_image(4, 4, 1, 4);
        let mut model = EmbeddingModel::identity_model_i(1).unwrap();
        for v in &mut model.encoder[0].weight {
            *v *= 2.0;
        }
        let spec = MetricSpec::default();
        let a = pullback_magnitude(&img, &model, &spec).unwrap();
        let scaled = MetricSpec {
            coordinate_scale: 2.0,
            channel_weight: 2.0,
            ..spec.clone()
        };
        let b = magnitude_vector(&img, &scaled).unwrap().weights;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_weight_is_one() {
        let img = random_image(1, 1, 3, 5);
        for arch in [Architecture::ModelI, Architecture::ModelII, Architecture::ModelIII] {
            let m = EmbeddingModel::new(arch, 3, 9).unwrap();
            let w = pullback_magnitude(&img, &m, &MetricSpec::default()).unwrap();
            assert!((w[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        let img = random_image(5, 5, 3, 6);
        let labels: Vec<f64> = (0..25).map(|i| if i % 5 == 2 { 1.0 } else { 0.0 }).collect();
        let model = EmbeddingModel::new(Architecture::ModelII, 3, 7).unwrap();
        let spec = MetricSpec::default();
        let input = |lambda| LossInput {
            patch: &img,
            labels: &labels,
            spec: &spec,
            lambda,
            margin: 0,
        };
        let v0 = loss_value(&model, &input(0.0)).unwrap();
        assert_eq!(v0.total, v0.ae);
        let (input_rows, recon) = model.reconstruct(&img, &spec).unwrap();
        let mse = input_rows.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / input_rows.len() as f64;
        assert!((v0.ae - mse).abs() < 1e-15);
        assert!(loss(&model, &input(1.0)).is_ok());
        let bad = LossInput {
            labels: &labels[1..],
            ..input(1.0)
        };
        assert!(matches!(loss(&model, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn class_losses() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(magnitude_loss(&y, &y), 0.0);
        assert_eq!(validation_loss_of(&y, &y), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
        assert!((validation_loss_of(&shifted, &y) - 0.2).abs() < 1e-12);
        let pred = [0.0, 0.7, 1.0, 0.2];
        assert!((magnitude_loss(&pred, &y) - validation_loss_of(&pred, &y)).abs() < 1e-15);
        assert_eq!(magnitude_loss(&[0.3, 0.1], &[0.0, 0.0]), 0.2);
    }

    #[test]
    fn bookkeeping() {
        assert_eq!(validation_count(4, 0.2), 1);
        assert_eq!(validation_count(10, 0.2), 2);
        assert_eq!(validation_count(1, 0.2), 0);
        let img = random_image(90, 50, 3, 8);
        let labels = vec![false; img.len()];
        let cfg = TrainConfig {
            scenario: Scenario::SingleShot,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = sample_patches(&[(img, labels)], &cfg, &mut rng).unwrap();
        assert_eq!(patches.len(), 3 * 2);
        assert_eq!(patches[0].image.width(), 44);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let img = random_image(12, 12, 3, 9);
        let labels: Vec<bool> = (0..144).map(|i| i % 12 == 5).collect();
        let cfg = TrainConfig {
            epochs: 0,
            patch: PatchConfig::new(8, 8, 1),
            ..TrainConfig::default()
        };
        let out = train(&[(img.clone(), labels.clone()), (img, labels)], &cfg).unwrap();
        assert_eq!(out.checkpoint.model, out.initial);
        assert_eq!(out.checkpoint.epoch, 0);
        assert_eq!(out.checkpoint.history.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = EmbeddingModel::new(Architecture::ModelIII, 3, 11).unwrap();
        let ckpt = Checkpoint {
            model,
            cfg: TrainConfig::default(),
            validation_loss: 0.1234567890123,
            epoch: 3,
            history: vec![0.3, 0.2],
            train_patches: 4,
            validation_patches: 1,
        };
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back, ckpt);
        let img = random_image(10, 10, 3, 12);
        let cfg = PatchConfig::new(6, 6, 1).with_pad(crate::image::PadMode::Replicate);
        let a = transform_image(&img, &Arc::new(ckpt.model), &cfg, 5).unwrap();
        let b = transform_image(&img, &Arc::new(back.model), &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_image_edge_maps() {
        let img = DigitalImage::new(12, 12, 3, vec![0.4; 432]).unwrap();
        let cfg = PatchConfig::new(6, 6, 1).with_pad(crate::image::PadMode::Replicate);
        let identity = Arc::new(EmbeddingModel::identity_model_i(3).unwrap());
        let map = transform_image(&img, &identity, &cfg, 5).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        // a nonlinear encoder of the pixel coordinates warps the flat grid, so the map is not blank
        let warped = Arc::new(EmbeddingModel::new(Architecture::ModelII, 3, 13).unwrap());
        let map = transform_image(&img, &warped, &cfg, 5).unwrap();
        assert!(map.values.iter().any(|&v| v > 0.0));
    }
}
