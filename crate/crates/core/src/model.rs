//! A small collaborative segmentation network with hand-written gradients.
//!
//! ```text
//! per CAV:  x --conv s2--> relu --conv s2--> relu      (encoder E)
//! fusion:   F = mean over CAVs;  z = spatial mean of F
//! decoder:  F --up x2--> conv --> relu --up x2--> conv --> sigmoid
//! ```
//!
//! All filters are `k x k` with zero padding `k / 2`. The flat parameter
//! vector stores, layer by layer, the kernel (`[out][in][ky][kx]`) followed
//! by the bias. The first two layers form the encoder slice.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{mmd2_grad, FeatureBatch, KernelParams};
use crate::error::{Error, Result};
use crate::image::{Image, SegMask};

/// Predicted probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside
/// the loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub enc_channels: [usize; 2],
    pub dec_channels: usize,
    pub classes: usize,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            enc_channels: [8, 16],
            dec_channels: 8,
            classes: 3,
            kernel: 3,
        }
    }
}

impl ArchConfig {
    /// Length of the pooled latent vector.
    pub fn latent_dim(&self) -> usize {
        self.enc_channels[1]
    }

    fn layers(&self) -> [ConvShape; 4] {
        let k = self.kernel;
        [
            ConvShape::new(self.in_channels, self.enc_channels[0], k, 2),
            ConvShape::new(self.enc_channels[0], self.enc_channels[1], k, 2),
            ConvShape::new(self.enc_channels[1], self.dec_channels, k, 1),
            ConvShape::new(self.dec_channels, self.classes, k, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(ConvShape::param_count).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if [self.in_channels, self.enc_channels[0], self.enc_channels[1], self.dec_channels, self.classes]
            .contains(&0)
        {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Stable identifier written into checkpoints.
    pub fn arch_hash(&self) -> u64 {
        let text = format!(
            "in={};enc={},{};dec={};classes={};k={}",
            self.in_channels,
            self.enc_channels[0],
            self.enc_channels[1],
            self.dec_channels,
            self.classes,
            self.kernel
        );
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvShape {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
}

impl ConvShape {
    fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride,
        }
    }

    fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    fn param_count(&self) -> usize {
        self.weight_len() + self.c_out
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.k / 2;
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }
}

/// Where one layer's kernel and bias live in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub name: &'static str,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

const LAYER_NAMES: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ArchConfig,
    theta: Vec<f64>,
    layout: Vec<LayerSlice>,
    encoder_len: usize,
}

impl ModelParams {
    pub fn from_theta(config: ArchConfig, theta: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut layout = Vec::with_capacity(4);
        let mut at = 0;
        for (shape, name) in config.layers().iter().zip(LAYER_NAMES) {
            let weight = at..at + shape.weight_len();
            let bias = weight.end..weight.end + shape.c_out;
            at = bias.end;
            layout.push(LayerSlice { name, weight, bias });
        }
        if theta.len() != at {
            return Err(Error::dims(format!(
                "{} parameters for an architecture with {at}",
                theta.len()
            )));
        }
        let encoder_len = layout[1].bias.end;
        Ok(Self {
            config,
            theta,
            layout,
            encoder_len,
        })
    }

    pub fn zeros(config: ArchConfig) -> Result<Self> {
        Self::from_theta(config, vec![0.0; config.param_count()])
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn layout(&self) -> &[LayerSlice] {
        &self.layout
    }

    /// Encoder parameters.
    pub fn encoder(&self) -> &[f64] {
        &self.theta[..self.encoder_len]
    }

    /// Decoder parameters.
    pub fn decoder(&self) -> &[f64] {
        &self.theta[self.encoder_len..]
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    fn weight(&self, layer: usize) -> &[f64] {
        &self.theta[self.layout[layer].weight.clone()]
    }

    fn bias(&self, layer: usize) -> &[f64] {
        &self.theta[self.layout[layer].bias.clone()]
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.config.hash(&mut h);
        for v in &self.theta {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::dims(format!(
                "{} parameters, expected {}",
                theta.len(),
                self.theta.len()
            )));
        }
        Ok(Self {
            theta,
            ..self.clone()
        })
    }

    /// Checkpoint layout: 8-byte magic `BEVDGCKP`, `u32` version, `u64`
    /// architecture hash, `u64` parameter count, then the parameters as
    /// `f64`. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.theta.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.arch_hash().to_le_bytes());
        out.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], config: ArchConfig) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if hash != config.arch_hash() {
            return Err(Error::Format("checkpoint was written for another architecture".into()));
        }
        let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[28..];
        if payload.len() != count * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload is {} bytes, expected {}",
                payload.len(),
                count * 8
            )));
        }
        let theta = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Self::from_theta(config, theta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, config: ArchConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, config)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"BEVDGCKP";
const CKPT_VERSION: u32 = 1;

/// Uniform weights in `+-sqrt(1 / fan_in)`, zero biases.
pub fn init_params(config: &ArchConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(*config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, shape) in config.layers().iter().enumerate() {
        let bound = (1.0 / (shape.c_in * shape.k * shape.k) as f64).sqrt();
        let range = params.layout[i].weight.clone();
        for v in &mut params.theta[range] {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// `theta - lr * gradient`.
pub fn sgd_step(params: &ModelParams, gradient: &[f64], lr: f64) -> Result<ModelParams> {
    if gradient.len() != params.len() {
        return Err(Error::dims(format!(
            "gradient of length {} for {} parameters",
            gradient.len(),
            params.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let theta = params
        .theta
        .iter()
        .zip(gradient)
        .map(|(t, g)| t - lr * g)
        .collect();
    params.with_theta(theta)
}

fn conv_forward(
    shape: &ConvShape,
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = shape.out_size(h, w);
    let (k, s, p) = (shape.k, shape.stride, shape.k / 2);
    let mut out = vec![0.0; shape.c_out * ho * wo];
    for o in 0..shape.c_out {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..shape.c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * shape.c_in + i) * k + ky) * k + kx];
                    // Output columns whose tap lands inside the row.
                    let x0 = p.saturating_sub(kx).div_ceil(s);
                    let x1 = ((w + p).saturating_sub(kx)).div_ceil(s).min(wo);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..ho {
                        let iy = (y * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[y * wo + x0..y * wo + x1];
                        let start = x0 * s + kx - p;
                        if s == 1 {
                            for (d, &v) in dst.iter_mut().zip(&row[start..]) {
                                *d += wv * v;
                            }
                        } else {
                            for (d, &v) in dst.iter_mut().zip(row[start..].iter().step_by(s)) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Accumulates kernel/bias gradients and returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    shape: &ConvShape,
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (ho, wo) = shape.out_size(h, w);
    let (k, s, p) = (shape.k, shape.stride, shape.k / 2);
    let mut d_in = want_input.then(|| vec![0.0; shape.c_in * h * w]);
    for o in 0..shape.c_out {
        let g = &d_out[o * ho * wo..(o + 1) * ho * wo];
        d_bias[o] += g.iter().sum::<f64>();
        for i in 0..shape.c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * shape.c_in + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in 0..ho {
                        let iy = (y * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for x in 0..wo {
                            let ix = (x * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = g[y * wo + x];
                            acc += gv * src[iy * w + ix as usize];
                            if let Some(d) = d_in.as_mut() {
                                d[(i * h + iy) * w + ix as usize] += wv * gv;
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
    d_in
}

fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
fn upsample2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut d_in = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                d_in[(ch * h + y / 2) * w + x / 2] += d_out[(ch * h2 + y) * w2 + x];
            }
        }
    }
    d_in
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(d: &mut [f64], pre: &[f64]) {
    for (g, &x) in d.iter_mut().zip(pre) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct CavTrace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
}

/// Activations cached by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    fingerprint: u64,
    input_hw: (usize, usize),
    enc1_hw: (usize, usize),
    enc2_hw: (usize, usize),
    cavs: Vec<CavTrace>,
    fused: Vec<f64>,
    z: Vec<f64>,
    up1: Vec<f64>,
    pre3: Vec<f64>,
    up2: Vec<f64>,
    pred: Vec<f64>,
}

impl ForwardTrace {
    /// Spatially averaged fused encoder features.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Fused encoder feature map, `C x H/4 x W/4`.
    pub fn fused(&self) -> &[f64] {
        &self.fused
    }

    pub fn cav_count(&self) -> usize {
        self.cavs.len()
    }

    pub fn input_dims(&self) -> (usize, usize) {
        self.input_hw
    }
}

/// Runs the encoder on every CAV image, fuses by mean and decodes.
/// Returns per-class probabilities as a `classes`-channel image.
pub fn forward(params: &ModelParams, cav_images: &[Image]) -> Result<(Image, ForwardTrace)> {
    let cfg = params.config;
    let first = cav_images
        .first()
        .ok_or_else(|| Error::invalid("forward needs at least one CAV image"))?;
    let (h, w, c) = first.dims();
    if c != cfg.in_channels {
        return Err(Error::dims(format!(
            "model expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    if let Some(bad) = cav_images.iter().find(|i| !i.same_dims(first)) {
        return Err(Error::dims(format!(
            "CAV image {:?} differs from {:?}",
            bad.dims(),
            first.dims()
        )));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::dims(format!(
            "input {h}x{w} must have sides divisible by 4"
        )));
    }
    let layers = cfg.layers();
    let enc1_hw = layers[0].out_size(h, w);
    let enc2_hw = layers[1].out_size(enc1_hw.0, enc1_hw.1);

    let c_lat = cfg.enc_channels[1];
    let mut fused = vec![0.0; c_lat * enc2_hw.0 * enc2_hw.1];
    let mut cavs = Vec::with_capacity(cav_images.len());
    for img in cav_images {
        let input = img.data().to_vec();
        let (pre1, _, _) = conv_forward(&layers[0], &input, h, w, params.weight(0), params.bias(0));
        let act1 = relu(&pre1);
        let (pre2, _, _) = conv_forward(
            &layers[1],
            &act1,
            enc1_hw.0,
            enc1_hw.1,
            params.weight(1),
            params.bias(1),
        );
        for (f, &v) in fused.iter_mut().zip(&pre2) {
            *f += v.max(0.0);
        }
        cavs.push(CavTrace {
            input,
            pre1,
            act1,
            pre2,
        });
    }
    let n_cav = cav_images.len() as f64;
    fused.iter_mut().for_each(|v| *v /= n_cav);

    let area = (enc2_hw.0 * enc2_hw.1) as f64;
    let z = fused
        .chunks_exact(enc2_hw.0 * enc2_hw.1)
        .map(|p| p.iter().sum::<f64>() / area)
        .collect();

    let up1 = upsample2(&fused, c_lat, enc2_hw.0, enc2_hw.1);
    let up1_hw = (2 * enc2_hw.0, 2 * enc2_hw.1);
    let (pre3, _, _) = conv_forward(
        &layers[2],
        &up1,
        up1_hw.0,
        up1_hw.1,
        params.weight(2),
        params.bias(2),
    );
    let act3 = relu(&pre3);
    let up2 = upsample2(&act3, cfg.dec_channels, up1_hw.0, up1_hw.1);
    let (logits, _, _) = conv_forward(&layers[3], &up2, h, w, params.weight(3), params.bias(3));
    let pred: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let image = Image::new(h, w, cfg.classes, pred.clone())?;

    Ok((
        image,
        ForwardTrace {
            fingerprint: params.fingerprint(),
            input_hw: (h, w),
            enc1_hw,
            enc2_hw,
            cavs,
            fused,
            z,
            up1,
            pre3,
            up2,
            pred,
        },
    ))
}

/// Mean binary cross-entropy over pixels and classes, with the
/// conventional leading minus sign.
pub fn cross_entropy(pred: &Image, label: &SegMask) -> Result<f64> {
    check_label(pred.height(), pred.width(), pred.channels(), label)?;
    let n = pred.data().len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(label.data())
        .map(|(&p, &y)| {
            let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    Ok(total / n)
}

fn check_label(h: usize, w: usize, classes: usize, label: &SegMask) -> Result<()> {
    if (label.height(), label.width(), SegMask::CLASSES) != (h, w, classes) {
        return Err(Error::dims(format!(
            "prediction {h}x{w}x{classes} vs label {}x{}x{}",
            label.height(),
            label.width(),
            SegMask::CLASSES
        )));
    }
    Ok(())
}

/// `d CE / d logits`, scaled by `weight`.
fn ce_logit_grad(pred: &[f64], label: &SegMask, weight: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(label.data())
        .map(|(&p, &y)| {
            if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                weight * (p - y as f64) / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Back-propagates `d_logits` and an optional gradient on the pooled latent
/// vector, accumulating into `grad`.
fn backprop(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_logits: &[f64],
    d_z: Option<&[f64]>,
    grad: &mut [f64],
) {
    let cfg = params.config;
    let layers = cfg.layers();
    let (h, w) = trace.input_hw;
    let up1_hw = (2 * trace.enc2_hw.0, 2 * trace.enc2_hw.1);
    let c_lat = cfg.enc_channels[1];

    let split = |grad: &mut [f64], layer: usize| -> (Vec<f64>, Vec<f64>) {
        let l = &params.layout[layer];
        (grad[l.weight.clone()].to_vec(), grad[l.bias.clone()].to_vec())
    };
    let store = |grad: &mut [f64], layer: usize, dw: &[f64], db: &[f64]| {
        let l = &params.layout[layer];
        grad[l.weight.clone()].copy_from_slice(dw);
        grad[l.bias.clone()].copy_from_slice(db);
    };

    // dec2
    let (mut dw, mut db) = split(grad, 3);
    let d_up2 = conv_backward(&layers[3], &trace.up2, h, w, params.weight(3), d_logits, &mut dw, &mut db, true)
        .expect("input gradient requested");
    store(grad, 3, &dw, &db);

    // dec1
    let mut d_pre3 = upsample2_backward(&d_up2, cfg.dec_channels, up1_hw.0, up1_hw.1);
    relu_backward(&mut d_pre3, &trace.pre3);
    let (mut dw, mut db) = split(grad, 2);
    let d_up1 = conv_backward(
        &layers[2],
        &trace.up1,
        up1_hw.0,
        up1_hw.1,
        params.weight(2),
        &d_pre3,
        &mut dw,
        &mut db,
        true,
    )
    .expect("input gradient requested");
    store(grad, 2, &dw, &db);

    let (eh, ew) = trace.enc2_hw;
    let mut d_fused = upsample2_backward(&d_up1, c_lat, eh, ew);
    if let Some(dz) = d_z {
        let area = (eh * ew) as f64;
        for (plane, &g) in d_fused.chunks_exact_mut(eh * ew).zip(dz) {
            plane.iter_mut().for_each(|v| *v += g / area);
        }
    }

    let n_cav = trace.cavs.len() as f64;
    let (mut dw1, mut db1) = split(grad, 0);
    let (mut dw2, mut db2) = split(grad, 1);
    for cav in &trace.cavs {
        let mut d_pre2: Vec<f64> = d_fused.iter().map(|g| g / n_cav).collect();
        relu_backward(&mut d_pre2, &cav.pre2);
        let mut d_pre1 = conv_backward(
            &layers[1],
            &cav.act1,
            trace.enc1_hw.0,
            trace.enc1_hw.1,
            params.weight(1),
            &d_pre2,
            &mut dw2,
            &mut db2,
            true,
        )
        .expect("input gradient requested");
        relu_backward(&mut d_pre1, &cav.pre1);
        conv_backward(&layers[0], &cav.input, h, w, params.weight(0), &d_pre1, &mut dw1, &mut db1, false);
    }
    store(grad, 0, &dw1, &db1);
    store(grad, 1, &dw2, &db2);
}

fn check_trace(params: &ModelParams, trace: &ForwardTrace) -> Result<()> {
    if trace.fingerprint != params.fingerprint() {
        return Err(Error::StaleTrace);
    }
    Ok(())
}

/// Gradient of [`cross_entropy`] with respect to every parameter.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, label: &SegMask) -> Result<Vec<f64>> {
    check_trace(params, trace)?;
    let (h, w) = trace.input_hw;
    check_label(h, w, params.config.classes, label)?;
    let d_logits = ce_logit_grad(&trace.pred, label, 1.0);
    let mut grad = vec![0.0; params.len()];
    backprop(params, trace, &d_logits, None, &mut grad);
    Ok(grad)
}

/// Pooled latent vectors of a batch of traces.
pub fn latent_batch(traces: &[ForwardTrace]) -> Result<FeatureBatch> {
    let rows: Vec<Vec<f64>> = traces.iter().map(|t| t.z.clone()).collect();
    FeatureBatch::from_rows(&rows)
}

/// Gradient of `mean_j CE(target_j) + beta * MMD^2(z_s, z_t)` with respect
/// to the parameters that produced `traces_t`. The source latents are
/// constants.
pub fn backward_with_consistency(
    params: &ModelParams,
    traces_s: &[ForwardTrace],
    traces_t: &[ForwardTrace],
    labels_t: &[SegMask],
    beta: f64,
    kp: &KernelParams,
) -> Result<Vec<f64>> {
    if traces_t.is_empty() || traces_t.len() != labels_t.len() {
        return Err(Error::dims(format!(
            "{} target traces with {} labels",
            traces_t.len(),
            labels_t.len()
        )));
    }
    for (t, label) in traces_t.iter().zip(labels_t) {
        check_trace(params, t)?;
        let (h, w) = t.input_hw;
        check_label(h, w, params.config.classes, label)?;
    }
    let d_z = if beta != 0.0 {
        let zs = latent_batch(traces_s)?;
        let zt = latent_batch(traces_t)?;
        Some(mmd2_grad(&zs, &zt, kp)?)
    } else {
        None
    };
    let d = params.config.latent_dim();
    let weight = 1.0 / traces_t.len() as f64;
    let grads: Vec<Vec<f64>> = traces_t
        .par_iter()
        .zip(labels_t)
        .enumerate()
        .map(|(j, (trace, label))| {
            let d_logits = ce_logit_grad(&trace.pred, label, weight);
            let dz: Option<Vec<f64>> = d_z
                .as_ref()
                .map(|g| g[j * d..(j + 1) * d].iter().map(|v| beta * v).collect());
            let mut grad = vec![0.0; params.len()];
            backprop(params, trace, &d_logits, dz.as_deref(), &mut grad);
            grad
        })
        .collect();
    Ok(sum_in_order(grads, params.len()))
}

/// Backprops only a latent-vector gradient (no loss on the outputs).
pub fn backward_latent(
    params: &ModelParams,
    traces: &[ForwardTrace],
    d_z: &[f64],
) -> Result<Vec<f64>> {
    let d = params.config.latent_dim();
    if d_z.len() != traces.len() * d {
        return Err(Error::dims("latent gradient does not match the batch"));
    }
    let grads: Vec<Vec<f64>> = traces
        .par_iter()
        .enumerate()
        .map(|(j, trace)| -> Result<Vec<f64>> {
            check_trace(params, trace)?;
            let zeros = vec![0.0; trace.pred.len()];
            let mut grad = vec![0.0; params.len()];
            backprop(params, trace, &zeros, Some(&d_z[j * d..(j + 1) * d]), &mut grad);
            Ok(grad)
        })
        .collect::<Result<_>>()?;
    Ok(sum_in_order(grads, params.len()))
}

fn sum_in_order(grads: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for g in grads {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total
}

/// Forward pass over a batch of scenes (each a set of CAV images).
pub fn forward_batch(
    params: &ModelParams,
    inputs: &[&[Image]],
) -> Result<Vec<(Image, ForwardTrace)>> {
    inputs.par_iter().map(|imgs| forward(params, imgs)).collect()
}

/// Mean cross-entropy of a batch and its gradient, plus the traces.
pub fn batch_ce(
    params: &ModelParams,
    inputs: &[&[Image]],
    labels: &[SegMask],
) -> Result<(f64, Vec<f64>, Vec<ForwardTrace>)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} inputs with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let n = inputs.len() as f64;
    let per_scene: Vec<(f64, Vec<f64>, ForwardTrace)> = inputs
        .par_iter()
        .zip(labels)
        .map(|(imgs, label)| -> Result<_> {
            let (pred, trace) = forward(params, imgs)?;
            let loss = cross_entropy(&pred, label)?;
            let d_logits = ce_logit_grad(&trace.pred, label, 1.0 / n);
            let mut grad = vec![0.0; params.len()];
            backprop(params, &trace, &d_logits, None, &mut grad);
            Ok((loss, grad, trace))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(per_scene.len());
    let mut traces = Vec::with_capacity(per_scene.len());
    for (l, g, t) in per_scene {
        loss += l;
        grads.push(g);
        traces.push(t);
    }
    Ok((loss / n, sum_in_order(grads, params.len()), traces))
}
