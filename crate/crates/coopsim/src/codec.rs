//! Convolutional autoencoder compressing feature maps 64x.
//!
//! Two strided convolution stages (default strides 4 and 2, so 8x per
//! spatial axis with unchanged channel count = exactly 64x fewer elements),
//! mirrored by two transposed convolutions. Leaky-rectifier activations on
//! hidden layers, linear reconstruction output. Everything is written from
//! scratch: forward, exact analytic backprop (verified against central
//! finite differences), and an adaptive-moment optimizer.
//!
//! Training can optionally push each latent through the V2V channel
//! (normalize, transmit, zero-force, denormalize) so the decoder learns to
//! cope with link noise; the channel perturbation is treated as a constant
//! offset when backpropagating into the encoder.

use crate::channel::{self, ChannelParams};
use crate::perception::FeatureMapBEV;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("autoencoder config invalid: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("parameter file malformed: {0}")]
    Format(String),
}

/// Autoencoder architecture. Spatial compression is
/// `stage_strides[0] * stage_strides[1] = 8` per axis with latent channels
/// equal to input channels, i.e. exactly 64x fewer elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AEConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of the intermediate stage.
    pub hidden_channels: usize,
    pub stage_strides: [usize; 2],
    /// Kernel sizes per stage; must be >= the stage stride so every cell
    /// is covered by the decoder scatter.
    pub stage_kernels: [usize; 2],
    pub leaky_slope: f64,
}

impl AEConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self, CodecError> {
        let cfg = Self {
            channels,
            height,
            width,
            hidden_channels: 4 * channels,
            stage_strides: [4, 2],
            stage_kernels: [4, 3],
            leaky_slope: 0.01,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.channels == 0 || self.hidden_channels == 0 {
            return Err(CodecError::InvalidConfig("channel counts must be positive".into()));
        }
        let total_stride: usize = self.stage_strides.iter().product();
        if total_stride != 8 {
            return Err(CodecError::InvalidConfig(format!(
                "stage strides {:?} must multiply to 8",
                self.stage_strides
            )));
        }
        for (k, s) in self.stage_kernels.iter().zip(&self.stage_strides) {
            if k < s {
                return Err(CodecError::InvalidConfig(format!(
                    "kernel {k} smaller than stride {s} leaves uncovered cells"
                )));
            }
        }
        if self.height % total_stride != 0 || self.width % total_stride != 0 {
            return Err(CodecError::InvalidConfig(format!(
                "dims {}x{} not divisible by total stride {total_stride}",
                self.height, self.width
            )));
        }
        // The 64x ratio is counted, not assumed.
        let input = self.channels * self.height * self.width;
        let latent = self.latent_elements();
        if latent == 0 || input % latent != 0 || input / latent != 64 {
            return Err(CodecError::InvalidConfig(format!(
                "element compression {input}/{latent} is not exactly 64"
            )));
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> [usize; 2] {
        let t = self.stage_strides[0] * self.stage_strides[1];
        [self.height / t, self.width / t]
    }

    pub fn latent_elements(&self) -> usize {
        let [h, w] = self.latent_dims();
        self.channels * h * w
    }
}

/// Weights of one (transposed) convolution layer; layout documented by the
/// save format: weights `[c_primary][c_secondary][k][k]`, then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// All autoencoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AEParams {
    pub cfg: AEConfig,
    pub enc1: LayerParams,
    pub enc2: LayerParams,
    pub dec1: LayerParams,
    pub dec2: LayerParams,
    pub init_seed: u64,
}

impl AEParams {
    /// He-style initialization, deterministic for a given rng state.
    pub fn init<R: Rng + ?Sized>(cfg: AEConfig, init_seed: u64, rng: &mut R) -> Result<Self, CodecError> {
        cfg.validate()?;
        let [k0, k1] = cfg.stage_kernels;
        let mk = |c_in: usize, c_out: usize, k: usize, rng: &mut R| {
            let fan_in = (c_in * k * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            LayerParams {
                weights: (0..c_out * c_in * k * k)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                bias: vec![0.0; c_out],
            }
        };
        // Encoder weights are [c_out][c_in][k][k]; decoder weights are
        // [c_in][c_out][k][k] (scatter orientation). Bias is per output
        // channel in both cases.
        let enc1 = mk(cfg.channels, cfg.hidden_channels, k0, rng);
        let enc2 = mk(cfg.hidden_channels, cfg.channels, k1, rng);
        let dec1 = mk(cfg.channels, cfg.hidden_channels, k1, rng);
        let dec2 = mk(cfg.hidden_channels, cfg.channels, k0, rng);
        Ok(Self {
            cfg,
            enc1,
            enc2,
            dec1,
            dec2,
            init_seed,
        })
    }

    fn zeros_like(&self) -> AEGrads {
        AEGrads {
            enc1: self.enc1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            dec1: self.dec1.zeros_like(),
            dec2: self.dec2.zeros_like(),
        }
    }
}

/// Gradients, mirroring [`AEParams`] layer by layer.
#[derive(Debug, Clone)]
pub struct AEGrads {
    pub enc1: LayerParams,
    pub enc2: LayerParams,
    pub dec1: LayerParams,
    pub dec2: LayerParams,
}

/// Training hyper-parameters for the adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// When set, latents traverse this channel during training.
    pub channel_in_loop: Option<ChannelParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            epochs: 60,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            channel_in_loop: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CodecError> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(CodecError::InvalidConfig(
                "learning rate, epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainedCodec {
    pub params: AEParams,
    /// Full-dataset MSE with the freshly initialized parameters.
    pub initial_loss: f64,
    /// Full-dataset MSE after the final epoch.
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

// Minimal dense (C, H, W) tensor used internally.
#[derive(Debug, Clone)]
struct T3 {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl T3 {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            v: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

fn map_to_t3(f: &FeatureMapBEV) -> T3 {
    T3 {
        c: f.channels,
        h: f.dims[0],
        w: f.dims[1],
        v: f.values.clone(),
    }
}

fn t3_to_map(t: &T3, origin: [f64; 2], cell_size: f64) -> FeatureMapBEV {
    FeatureMapBEV {
        channels: t.c,
        dims: [t.h, t.w],
        origin,
        cell_size,
        values: t.v.clone(),
    }
}

fn pad_before(k: usize, s: usize) -> i64 {
    ((k - s) / 2) as i64
}

/// Strided convolution (gather). Weights `[c_out][c_in][k][k]`.
fn conv_forward(x: &T3, layer: &LayerParams, c_out: usize, k: usize, s: usize) -> T3 {
    let pb = pad_before(k, s);
    let (oh, ow) = (x.h / s, x.w / s);
    let mut out = T3::zeros(c_out, oh, ow);
    for co in 0..c_out {
        let b = layer.bias[co];
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b;
                for ci in 0..x.c {
                    for kh in 0..k {
                        let iy = (y * s) as i64 + kh as i64 - pb;
                        if iy < 0 || iy >= x.h as i64 {
                            continue;
                        }
                        for kw in 0..k {
                            let ix = (xo * s) as i64 + kw as i64 - pb;
                            if ix < 0 || ix >= x.w as i64 {
                                continue;
                            }
                            let wv = layer.weights[((co * x.c + ci) * k + kh) * k + kw];
                            acc += wv * x.v[x.idx(ci, iy as usize, ix as usize)];
                        }
                    }
                }
                let i = out.idx(co, y, xo);
                out.v[i] = acc;
            }
        }
    }
    out
}

/// Backward pass of [`conv_forward`]: accumulates weight/bias grads and
/// returns the gradient w.r.t. the layer input.
fn conv_backward(
    x: &T3,
    layer: &LayerParams,
    grads: &mut LayerParams,
    g_out: &T3,
    k: usize,
    s: usize,
) -> T3 {
    let pb = pad_before(k, s);
    let mut g_x = T3::zeros(x.c, x.h, x.w);
    for co in 0..g_out.c {
        for y in 0..g_out.h {
            for xo in 0..g_out.w {
                let g = g_out.v[g_out.idx(co, y, xo)];
                if g == 0.0 {
                    continue;
                }
                grads.bias[co] += g;
                for ci in 0..x.c {
                    for kh in 0..k {
                        let iy = (y * s) as i64 + kh as i64 - pb;
                        if iy < 0 || iy >= x.h as i64 {
                            continue;
                        }
                        for kw in 0..k {
                            let ix = (xo * s) as i64 + kw as i64 - pb;
                            if ix < 0 || ix >= x.w as i64 {
                                continue;
                            }
                            let widx = ((co * x.c + ci) * k + kh) * k + kw;
                            let xidx = x.idx(ci, iy as usize, ix as usize);
                            grads.weights[widx] += g * x.v[xidx];
                            g_x.v[xidx] += g * layer.weights[widx];
                        }
                    }
                }
            }
        }
    }
    g_x
}

/// Transposed convolution (scatter). Weights `[c_in][c_out][k][k]`.
fn tconv_forward(z: &T3, layer: &LayerParams, c_out: usize, k: usize, s: usize) -> T3 {
    let pb = pad_before(k, s);
    let (oh, ow) = (z.h * s, z.w * s);
    let mut out = T3::zeros(c_out, oh, ow);
    for co in 0..c_out {
        let b = layer.bias[co];
        for i in 0..oh * ow {
            out.v[co * oh * ow + i] = b;
        }
    }
    for ci in 0..z.c {
        for iy in 0..z.h {
            for ix in 0..z.w {
                let zv = z.v[z.idx(ci, iy, ix)];
                if zv == 0.0 {
                    continue;
                }
                for co in 0..c_out {
                    for kh in 0..k {
                        let oy = (iy * s) as i64 + kh as i64 - pb;
                        if oy < 0 || oy >= oh as i64 {
                            continue;
                        }
                        for kw in 0..k {
                            let ox = (ix * s) as i64 + kw as i64 - pb;
                            if ox < 0 || ox >= ow as i64 {
                                continue;
                            }
                            let wv = layer.weights[((ci * c_out + co) * k + kh) * k + kw];
                            let oidx = out.idx(co, oy as usize, ox as usize);
                            out.v[oidx] += wv * zv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`tconv_forward`].
fn tconv_backward(
    z: &T3,
    layer: &LayerParams,
    grads: &mut LayerParams,
    g_out: &T3,
    k: usize,
    s: usize,
) -> T3 {
    let pb = pad_before(k, s);
    let c_out = g_out.c;
    let mut g_z = T3::zeros(z.c, z.h, z.w);
    for co in 0..c_out {
        for y in 0..g_out.h {
            for x in 0..g_out.w {
                grads.bias[co] += g_out.v[g_out.idx(co, y, x)];
            }
        }
    }
    for ci in 0..z.c {
        for iy in 0..z.h {
            for ix in 0..z.w {
                let zidx = z.idx(ci, iy, ix);
                let zv = z.v[zidx];
                let mut acc = 0.0;
                for co in 0..c_out {
                    for kh in 0..k {
                        let oy = (iy * s) as i64 + kh as i64 - pb;
                        if oy < 0 || oy >= g_out.h as i64 {
                            continue;
                        }
                        for kw in 0..k {
                            let ox = (ix * s) as i64 + kw as i64 - pb;
                            if ox < 0 || ox >= g_out.w as i64 {
                                continue;
                            }
                            let widx = ((ci * c_out + co) * k + kh) * k + kw;
                            let g = g_out.v[g_out.idx(co, oy as usize, ox as usize)];
                            grads.weights[widx] += g * zv;
                            acc += g * layer.weights[widx];
                        }
                    }
                }
                g_z.v[zidx] = acc;
            }
        }
    }
    g_z
}

fn leaky(t: &T3, slope: f64) -> T3 {
    let mut out = t.clone();
    for v in out.v.iter_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Gradient through the rectifier given its pre-activation values.
fn leaky_backward(pre: &T3, g: &T3, slope: f64) -> T3 {
    let mut out = g.clone();
    for (o, p) in out.v.iter_mut().zip(&pre.v) {
        if *p < 0.0 {
            *o *= slope;
        }
    }
    out
}

struct ForwardCache {
    x: T3,
    enc1_pre: T3,
    enc1_act: T3,
    enc2_pre: T3,
    /// Latent actually fed to the decoder (after an optional channel pass).
    latent_used: T3,
    dec1_pre: T3,
    dec1_act: T3,
    recon: T3,
}

fn forward_cache(p: &AEParams, x: T3, latent_noise: Option<&T3>) -> ForwardCache {
    let cfg = &p.cfg;
    let [k0, k1] = cfg.stage_kernels;
    let [s0, s1] = cfg.stage_strides;
    let enc1_pre = conv_forward(&x, &p.enc1, cfg.hidden_channels, k0, s0);
    let enc1_act = leaky(&enc1_pre, cfg.leaky_slope);
    let enc2_pre = conv_forward(&enc1_act, &p.enc2, cfg.channels, k1, s1);
    let latent_used = match latent_noise {
        Some(noisy) => noisy.clone(),
        None => leaky(&enc2_pre, cfg.leaky_slope),
    };
    let dec1_pre = tconv_forward(&latent_used, &p.dec1, cfg.hidden_channels, k1, s1);
    let dec1_act = leaky(&dec1_pre, cfg.leaky_slope);
    let recon = tconv_forward(&dec1_act, &p.dec2, cfg.channels, k0, s0);
    ForwardCache {
        x,
        enc1_pre,
        enc1_act,
        enc2_pre,
        latent_used,
        dec1_pre,
        dec1_act,
        recon,
    }
}

/// Backprop one sample's reconstruction gradient into `grads`.
/// The channel disturbance (latent_used - latent) is treated as constant,
/// so the gradient crosses back to the encoder unchanged.
fn backward_cache(p: &AEParams, cache: &ForwardCache, g_recon: &T3, grads: &mut AEGrads) {
    let cfg = &p.cfg;
    let [k0, k1] = cfg.stage_kernels;
    let [s0, s1] = cfg.stage_strides;
    let g_dec1_act = tconv_backward(&cache.dec1_act, &p.dec2, &mut grads.dec2, g_recon, k0, s0);
    let g_dec1_pre = leaky_backward(&cache.dec1_pre, &g_dec1_act, cfg.leaky_slope);
    let g_latent = tconv_backward(&cache.latent_used, &p.dec1, &mut grads.dec1, &g_dec1_pre, k1, s1);
    let g_enc2_pre = leaky_backward(&cache.enc2_pre, &g_latent, cfg.leaky_slope);
    let g_enc1_act = conv_backward(&cache.enc1_act, &p.enc2, &mut grads.enc2, &g_enc2_pre, k1, s1);
    let g_enc1_pre = leaky_backward(&cache.enc1_pre, &g_enc1_act, cfg.leaky_slope);
    let _ = conv_backward(&cache.x, &p.enc1, &mut grads.enc1, &g_enc1_pre, k0, s0);
}

fn check_input_shape(cfg: &AEConfig, f: &FeatureMapBEV) -> Result<(), CodecError> {
    if f.channels != cfg.channels || f.dims != [cfg.height, cfg.width] {
        return Err(CodecError::ShapeMismatch(format!(
            "map is {}x{}x{}, config wants {}x{}x{}",
            f.channels, f.dims[0], f.dims[1], cfg.channels, cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// Encode a feature map to its latent (1/64 of the elements).
pub fn ae_encode(f: &FeatureMapBEV, p: &AEParams) -> Result<FeatureMapBEV, CodecError> {
    check_input_shape(&p.cfg, f)?;
    let cfg = &p.cfg;
    let [k0, k1] = cfg.stage_kernels;
    let [s0, s1] = cfg.stage_strides;
    let x = map_to_t3(f);
    let h1 = leaky(&conv_forward(&x, &p.enc1, cfg.hidden_channels, k0, s0), cfg.leaky_slope);
    let z = leaky(&conv_forward(&h1, &p.enc2, cfg.channels, k1, s1), cfg.leaky_slope);
    let total = (s0 * s1) as f64;
    Ok(t3_to_map(&z, f.origin, f.cell_size * total))
}

/// Decode a latent back to full resolution.
pub fn ae_decode(z: &FeatureMapBEV, p: &AEParams) -> Result<FeatureMapBEV, CodecError> {
    let cfg = &p.cfg;
    let [lh, lw] = cfg.latent_dims();
    if z.channels != cfg.channels || z.dims != [lh, lw] {
        return Err(CodecError::ShapeMismatch(format!(
            "latent is {}x{}x{}, config wants {}x{}x{}",
            z.channels, z.dims[0], z.dims[1], cfg.channels, lh, lw
        )));
    }
    let [k0, k1] = cfg.stage_kernels;
    let [s0, s1] = cfg.stage_strides;
    let t = map_to_t3(z);
    let d1 = leaky(&tconv_forward(&t, &p.dec1, cfg.hidden_channels, k1, s1), cfg.leaky_slope);
    let out = tconv_forward(&d1, &p.dec2, cfg.channels, k0, s0);
    let total = (s0 * s1) as f64;
    Ok(t3_to_map(&out, z.origin, z.cell_size / total))
}

/// Mean squared error between two same-shaped maps.
pub fn ae_loss(f: &FeatureMapBEV, recon: &FeatureMapBEV) -> Result<f64, CodecError> {
    if f.channels != recon.channels || f.dims != recon.dims {
        return Err(CodecError::ShapeMismatch(
            "loss operands differ in shape".into(),
        ));
    }
    let n = f.values.len() as f64;
    Ok(f
        .values
        .iter()
        .zip(&recon.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Exact analytic gradients of the mean reconstruction MSE over a batch.
/// Returns (gradients, batch loss).
pub fn ae_gradients(p: &AEParams, batch: &[&FeatureMapBEV]) -> Result<(AEGrads, f64), CodecError> {
    if batch.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    let mut grads = p.zeros_like();
    let mut loss = 0.0;
    let n_elems = (p.cfg.channels * p.cfg.height * p.cfg.width) as f64;
    let scale = 1.0 / (batch.len() as f64 * n_elems);
    for f in batch {
        check_input_shape(&p.cfg, f)?;
        let cache = forward_cache(p, map_to_t3(f), None);
        let mut g_recon = T3::zeros(cache.recon.c, cache.recon.h, cache.recon.w);
        for i in 0..g_recon.v.len() {
            let d = cache.recon.v[i] - f.values[i];
            loss += d * d * scale;
            g_recon.v[i] = 2.0 * d * scale;
        }
        backward_cache(p, &cache, &g_recon, &mut grads);
    }
    Ok((grads, loss))
}

struct AdamState {
    m: AEGrads,
    v: AEGrads,
    t: u64,
}

fn adam_step(params: &mut AEParams, grads: &AEGrads, state: &mut AdamState, tc: &TrainConfig) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - tc.beta1.powf(t);
    let bc2 = 1.0 - tc.beta2.powf(t);
    let update = |p: &mut LayerParams, g: &LayerParams, m: &mut LayerParams, v: &mut LayerParams| {
        for i in 0..p.weights.len() {
            m.weights[i] = tc.beta1 * m.weights[i] + (1.0 - tc.beta1) * g.weights[i];
            v.weights[i] = tc.beta2 * v.weights[i] + (1.0 - tc.beta2) * g.weights[i] * g.weights[i];
            p.weights[i] -=
                tc.learning_rate * (m.weights[i] / bc1) / ((v.weights[i] / bc2).sqrt() + tc.epsilon);
        }
        for i in 0..p.bias.len() {
            m.bias[i] = tc.beta1 * m.bias[i] + (1.0 - tc.beta1) * g.bias[i];
            v.bias[i] = tc.beta2 * v.bias[i] + (1.0 - tc.beta2) * g.bias[i] * g.bias[i];
            p.bias[i] -=
                tc.learning_rate * (m.bias[i] / bc1) / ((v.bias[i] / bc2).sqrt() + tc.epsilon);
        }
    };
    update(&mut params.enc1, &grads.enc1, &mut state.m.enc1, &mut state.v.enc1);
    update(&mut params.enc2, &grads.enc2, &mut state.m.enc2, &mut state.v.enc2);
    update(&mut params.dec1, &grads.dec1, &mut state.m.dec1, &mut state.v.dec1);
    update(&mut params.dec2, &grads.dec2, &mut state.m.dec2, &mut state.v.dec2);
}

/// Push a latent tensor through the channel (normalize per channel,
/// transmit, zero-force, denormalize). Falls back to the clean latent when
/// equalization is singular so a training step never aborts.
fn latent_through_channel<R: Rng + ?Sized>(
    latent: &T3,
    ch: &ChannelParams,
    rng: &mut R,
) -> T3 {
    let map = t3_to_map(latent, [0.0, 0.0], 1.0);
    let flat = map.to_interleaved();
    let Ok(payload) = channel::normalize_payload(&flat, map.channels) else {
        return latent.clone();
    };
    match channel::transmit_payload(&payload, ch, rng) {
        Ok((_, tx)) => match FeatureMapBEV::from_interleaved(&tx.recovered, &map) {
            Ok(noisy) => map_to_t3(&noisy),
            Err(_) => latent.clone(),
        },
        Err(_) => latent.clone(),
    }
}

fn dataset_loss(p: &AEParams, dataset: &[FeatureMapBEV]) -> Result<f64, CodecError> {
    let mut acc = 0.0;
    for f in dataset {
        let recon = ae_decode(&ae_encode(f, p)?, p)?;
        acc += ae_loss(f, &recon)?;
    }
    Ok(acc / dataset.len() as f64)
}

/// Train the autoencoder. Deterministic for a fixed rng stream.
pub fn ae_train<R: Rng + ?Sized>(
    dataset: &[FeatureMapBEV],
    cfg: AEConfig,
    tc: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedCodec, CodecError> {
    if dataset.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    tc.validate()?;
    for f in dataset {
        check_input_shape(&cfg, f)?;
    }
    let init_seed = rng.random::<u64>();
    let mut params = AEParams::init(cfg, init_seed, rng)?;
    let initial_loss = dataset_loss(&params, dataset)?;
    let mut state = AdamState {
        m: params.zeros_like(),
        v: params.zeros_like(),
        t: 0,
    };
    let n_elems = (cfg.channels * cfg.height * cfg.width) as f64;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        // Fisher-Yates shuffle from the training stream.
        for i in (1..order.len()).rev() {
            let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let mut grads = params.zeros_like();
            let scale = 1.0 / (chunk.len() as f64 * n_elems);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let f = &dataset[idx];
                let x = map_to_t3(f);
                let noisy = tc.channel_in_loop.as_ref().map(|ch| {
                    // One clean encode to get the latent for the channel.
                    let cfg_ref = &params.cfg;
                    let [k0, k1] = cfg_ref.stage_kernels;
                    let [s0, s1] = cfg_ref.stage_strides;
                    let h1 = leaky(
                        &conv_forward(&x, &params.enc1, cfg_ref.hidden_channels, k0, s0),
                        cfg_ref.leaky_slope,
                    );
                    let z = leaky(
                        &conv_forward(&h1, &params.enc2, cfg_ref.channels, k1, s1),
                        cfg_ref.leaky_slope,
                    );
                    latent_through_channel(&z, ch, rng)
                });
                let cache = forward_cache(&params, x, noisy.as_ref());
                let mut g_recon = T3::zeros(cache.recon.c, cache.recon.h, cache.recon.w);
                for i in 0..g_recon.v.len() {
                    let d = cache.recon.v[i] - f.values[i];
                    batch_loss += d * d * scale;
                    g_recon.v[i] = 2.0 * d * scale;
                }
                backward_cache(&params, &cache, &g_recon, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(CodecError::Divergence { epoch });
            }
            adam_step(&mut params, &grads, &mut state, tc);
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    let final_loss = dataset_loss(&params, dataset)?;
    if !final_loss.is_finite() {
        return Err(CodecError::Divergence { epoch: tc.epochs });
    }
    Ok(TrainedCodec {
        params,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

const MAGIC: &[u8; 4] = b"CPAE";
const FORMAT_VERSION: u32 = 1;

/// Serialize parameters: magic, version, config, then little-endian f64
/// tensors in order enc1.w enc1.b enc2.w enc2.b dec1.w dec1.b dec2.w dec2.b.
pub fn save_params(p: &AEParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        p.cfg.channels,
        p.cfg.height,
        p.cfg.width,
        p.cfg.hidden_channels,
        p.cfg.stage_strides[0],
        p.cfg.stage_strides[1],
        p.cfg.stage_kernels[0],
        p.cfg.stage_kernels[1],
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&p.cfg.leaky_slope.to_le_bytes());
    out.extend_from_slice(&p.init_seed.to_le_bytes());
    for layer in [&p.enc1, &p.enc2, &p.dec1, &p.dec2] {
        for &w in &layer.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

/// Parse a parameter blob written by [`save_params`].
pub fn load_params(bytes: &[u8]) -> Result<AEParams, CodecError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CodecError> {
        if *pos + n > bytes.len() {
            return Err(CodecError::Format("unexpected end of file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CodecError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CodecError::Format(format!("unsupported version {version}")));
    }
    let read_u32 = |pos: &mut usize| -> Result<usize, CodecError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize)
    };
    let channels = read_u32(&mut pos)?;
    let height = read_u32(&mut pos)?;
    let width = read_u32(&mut pos)?;
    let hidden_channels = read_u32(&mut pos)?;
    let s0 = read_u32(&mut pos)?;
    let s1 = read_u32(&mut pos)?;
    let k0 = read_u32(&mut pos)?;
    let k1 = read_u32(&mut pos)?;
    let leaky_slope = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let init_seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let cfg = AEConfig {
        channels,
        height,
        width,
        hidden_channels,
        stage_strides: [s0, s1],
        stage_kernels: [k0, k1],
        leaky_slope,
    };
    cfg.validate()
        .map_err(|e| CodecError::Format(format!("invalid stored config: {e}")))?;
    let read_layer = |pos: &mut usize, n_w: usize, n_b: usize| -> Result<LayerParams, CodecError> {
        let mut weights = Vec::with_capacity(n_w);
        for _ in 0..n_w {
            weights.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
        }
        let mut bias = Vec::with_capacity(n_b);
        for _ in 0..n_b {
            bias.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
        }
        Ok(LayerParams { weights, bias })
    };
    let enc1 = read_layer(&mut pos, hidden_channels * channels * k0 * k0, hidden_channels)?;
    let enc2 = read_layer(&mut pos, channels * hidden_channels * k1 * k1, channels)?;
    let dec1 = read_layer(&mut pos, channels * hidden_channels * k1 * k1, hidden_channels)?;
    let dec2 = read_layer(&mut pos, hidden_channels * channels * k0 * k0, channels)?;
    if pos != bytes.len() {
        return Err(CodecError::Format(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(AEParams {
        cfg,
        enc1,
        enc2,
        dec1,
        dec2,
        init_seed,
    })
}
