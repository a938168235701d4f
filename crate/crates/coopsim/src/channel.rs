//! Complex-baseband V2V link model.
//!
//! A transmission runs the chain
//! normalize -> pack to complex symbols -> path loss + Rician fading + AWGN
//! -> zero-forcing recovery (perfect or perturbed CSI) -> unpack -> denormalize.
//!
//! The received signal per symbol is `y = lambda * h * x + w` with
//! `lambda = sqrt(p0 / d^n)`, `h` Rician with unit mean power and `w`
//! circularly-symmetric complex Gaussian noise. SNR is referenced at the
//! receiver: the noise variance is the measured received signal power
//! divided by the linear SNR, less a fixed despreading gain between the
//! channel SNR and the per-element SNR. For path-loss-factor sweeps a
//! fixed noise reference pins the noise level to a baseline geometry
//! instead, so that increasing the path loss factor genuinely degrades
//! the link.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Default despreading gain of the link (chips per payload element).
pub const DEFAULT_PROCESSING_GAIN_DB: f64 = 9.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("channel parameter `{name}` must be {requirement}, got {value}")]
    InvalidParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("payload is empty")]
    EmptyPayload,
    #[error("payload length {len} is not divisible by axis arity {arity}")]
    ShapeMismatch { len: usize, arity: usize },
    #[error("equalization singular: |lambda * h_est| = {gain:.3e} is below 1e-12")]
    EqualizationSingular { gain: f64 },
}

/// How the AWGN variance is derived from the target SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Noise variance = measured received signal power / linear SNR.
    /// The SNR at the receiver is then exactly `snr_db` regardless of
    /// distance or path loss factor.
    SnrAtReceiver,
    /// Noise variance = (p0 / d^n at the given reference geometry) *
    /// mean transmit symbol power / linear SNR, using the unit mean power
    /// of the fading process. Sweeping the actual path loss factor away
    /// from the reference then shifts the effective SNR.
    FixedReference { path_loss_factor: f64, distance_m: f64 },
}

/// Link parameters for one CAV-to-ego transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub p0: f64,
    pub distance_m: f64,
    pub path_loss_factor: f64,
    pub rician_k: f64,
    pub snr_db: f64,
    pub csi_error_variance: f64,
    pub noise_mode: NoiseMode,
    /// Despreading gain between the channel SNR and the per-element SNR:
    /// each payload element's energy is spread over several chips, so the
    /// effective per-element SNR is `snr_db + processing_gain_db`.
    pub processing_gain_db: f64,
}

impl ChannelParams {
    pub fn new(
        p0: f64,
        distance_m: f64,
        path_loss_factor: f64,
        rician_k: f64,
        snr_db: f64,
        csi_error_variance: f64,
    ) -> Result<Self, ChannelError> {
        let check = |name: &'static str, requirement: &'static str, ok: bool, value: f64| {
            if ok {
                Ok(())
            } else {
                Err(ChannelError::InvalidParameter {
                    name,
                    requirement,
                    value,
                })
            }
        };
        check("p0", "> 0", p0 > 0.0 && p0.is_finite(), p0)?;
        check(
            "distance_m",
            "> 0",
            distance_m > 0.0 && distance_m.is_finite(),
            distance_m,
        )?;
        check(
            "path_loss_factor",
            ">= 0",
            path_loss_factor >= 0.0 && path_loss_factor.is_finite(),
            path_loss_factor,
        )?;
        check(
            "rician_k",
            ">= 0",
            rician_k >= 0.0 && rician_k.is_finite(),
            rician_k,
        )?;
        check("snr_db", "finite or +inf", !snr_db.is_nan() && snr_db != f64::NEG_INFINITY, snr_db)?;
        check(
            "csi_error_variance",
            ">= 0",
            csi_error_variance >= 0.0 && csi_error_variance.is_finite(),
            csi_error_variance,
        )?;
        Ok(Self {
            p0,
            distance_m,
            path_loss_factor,
            rician_k,
            snr_db,
            csi_error_variance,
            noise_mode: NoiseMode::SnrAtReceiver,
            processing_gain_db: DEFAULT_PROCESSING_GAIN_DB,
        })
    }

    pub fn with_noise_mode(mut self, mode: NoiseMode) -> Self {
        self.noise_mode = mode;
        self
    }

    pub fn with_processing_gain_db(mut self, gain_db: f64) -> Self {
        self.processing_gain_db = gain_db;
        self
    }

    pub fn with_distance(mut self, distance_m: f64) -> Self {
        self.distance_m = distance_m;
        self
    }
}

/// One fading/noise draw for a transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRealization {
    /// True fading coefficient.
    pub h: Complex64,
    /// CSI available to the receiver (`h` plus optional disturbance).
    pub h_est: Complex64,
    /// Real amplitude gain from path loss.
    pub lambda: f64,
    /// Variance of one complex noise sample.
    pub noise_variance: f64,
}

/// Per-axis statistics recorded when a payload is normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStats {
    pub mean: f64,
    pub std: f64,
}

/// A flat real payload, normalized per axis to zero mean and unit variance.
/// Element `i` belongs to axis `i % axis_arity` (interleaved layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub values: Vec<f64>,
    pub axis_stats: Vec<AxisStats>,
    pub axis_arity: usize,
}

/// Complex symbols packed from a real vector, remembering the real length
/// so zero-padding can be stripped again.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSignal {
    pub symbols: Vec<Complex64>,
    pub real_len: usize,
}

/// Result of a full transmit chain.
#[derive(Debug, Clone)]
pub struct Transmission {
    /// Recovered real payload after denormalization.
    pub recovered: Vec<f64>,
    /// RMS error between sent and recovered values in normalized units.
    pub normalized_rms_error: f64,
    /// Number of complex symbols on the air.
    pub symbols_sent: usize,
    pub realization: ChannelRealization,
}

/// Path-loss amplitude gain `sqrt(p0 / d^n)`.
pub fn path_loss_gain(p0: f64, distance_m: f64, n: f64) -> Result<f64, ChannelError> {
    if !(p0 > 0.0) || !p0.is_finite() {
        return Err(ChannelError::InvalidParameter {
            name: "p0",
            requirement: "> 0",
            value: p0,
        });
    }
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(ChannelError::InvalidParameter {
            name: "distance_m",
            requirement: "> 0",
            value: distance_m,
        });
    }
    if !(n >= 0.0) || !n.is_finite() {
        return Err(ChannelError::InvalidParameter {
            name: "path_loss_factor",
            requirement: ">= 0",
            value: n,
        });
    }
    Ok((p0 / distance_m.powf(n)).sqrt())
}

/// Draw a Rician fading coefficient with unit mean power:
/// `h = sqrt(K/(K+1)) + g`, `g` circularly symmetric with total variance
/// `1/(K+1)`, so `E[|h|^2] = 1` and the LOS/diffuse power ratio is `K`.
pub fn sample_rician<R: Rng + ?Sized>(rician_k: f64, rng: &mut R) -> Result<Complex64, ChannelError> {
    if !(rician_k >= 0.0) || !rician_k.is_finite() {
        return Err(ChannelError::InvalidParameter {
            name: "rician_k",
            requirement: ">= 0",
            value: rician_k,
        });
    }
    let los = (rician_k / (rician_k + 1.0)).sqrt();
    let sigma = (0.5 / (rician_k + 1.0)).sqrt();
    let gi: f64 = rng.sample(StandardNormal);
    let gq: f64 = rng.sample(StandardNormal);
    Ok(Complex64::new(los + sigma * gi, sigma * gq))
}

/// Normalize a flat vector per interleaved axis to sample mean 0 and
/// population variance 1. Constant axes keep std 1 so nothing divides by
/// zero; their values transmit as zeros and the mean is restored on receive.
pub fn normalize_payload(values: &[f64], axis_arity: usize) -> Result<Payload, ChannelError> {
    if values.is_empty() {
        return Err(ChannelError::EmptyPayload);
    }
    if axis_arity == 0 || values.len() % axis_arity != 0 {
        return Err(ChannelError::ShapeMismatch {
            len: values.len(),
            arity: axis_arity,
        });
    }
    let rows = values.len() / axis_arity;
    let mut stats = Vec::with_capacity(axis_arity);
    for axis in 0..axis_arity {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += values[r * axis_arity + axis];
        }
        mean /= rows as f64;
        let mut var = 0.0;
        for r in 0..rows {
            let d = values[r * axis_arity + axis] - mean;
            var += d * d;
        }
        var /= rows as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        stats.push(AxisStats { mean, std });
    }
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let s = stats[i % axis_arity];
        out.push((v - s.mean) / s.std);
    }
    Ok(Payload {
        values: out,
        axis_stats: stats,
        axis_arity,
    })
}

/// Inverse of [`normalize_payload`].
pub fn denormalize_payload(p: &Payload) -> Vec<f64> {
    p.values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = p.axis_stats[i % p.axis_arity];
            v * s.std + s.mean
        })
        .collect()
}

/// Pack consecutive real pairs into (I, Q) of complex symbols; an odd tail
/// is zero-padded.
pub fn pack_complex(reals: &[f64]) -> PackedSignal {
    let mut symbols = Vec::with_capacity((reals.len() + 1) / 2);
    let mut it = reals.chunks_exact(2);
    for pair in &mut it {
        symbols.push(Complex64::new(pair[0], pair[1]));
    }
    if let [last] = it.remainder() {
        symbols.push(Complex64::new(*last, 0.0));
    }
    PackedSignal {
        symbols,
        real_len: reals.len(),
    }
}

/// Recover the real vector from a packed signal, stripping zero-padding.
pub fn unpack_complex(signal: &PackedSignal) -> Vec<f64> {
    let mut out = Vec::with_capacity(signal.real_len);
    for s in &signal.symbols {
        out.push(s.re);
        if out.len() < signal.real_len {
            out.push(s.im);
        }
    }
    out.truncate(signal.real_len);
    out
}

/// Noise variance hitting a target SNR given the received signal power.
pub fn noise_variance_for_snr(snr_db: f64, rx_signal_power: f64) -> Result<f64, ChannelError> {
    if !(rx_signal_power > 0.0) || !rx_signal_power.is_finite() {
        return Err(ChannelError::InvalidParameter {
            name: "rx_signal_power",
            requirement: "> 0",
            value: rx_signal_power,
        });
    }
    Ok(rx_signal_power / 10f64.powf(snr_db / 10.0))
}

/// Apply `y_i = lambda * h * x_i + w_i` with i.i.d. circularly-symmetric
/// complex Gaussian noise of the realization's variance.
pub fn apply_channel<R: Rng + ?Sized>(
    x: &[Complex64],
    real: &ChannelRealization,
    rng: &mut R,
) -> Vec<Complex64> {
    let gain = real.h * real.lambda;
    let sigma = (0.5 * real.noise_variance).sqrt();
    x.iter()
        .map(|&s| {
            let wi: f64 = rng.sample(StandardNormal);
            let wq: f64 = rng.sample(StandardNormal);
            gain * s + Complex64::new(sigma * wi, sigma * wq)
        })
        .collect()
}

/// Disturb CSI: `h_est = h + e`, `e` circularly symmetric with the given
/// total variance. Zero variance returns `h` unchanged.
pub fn perturb_csi<R: Rng + ?Sized>(
    h: Complex64,
    csi_error_variance: f64,
    rng: &mut R,
) -> Result<Complex64, ChannelError> {
    if !(csi_error_variance >= 0.0) || !csi_error_variance.is_finite() {
        return Err(ChannelError::InvalidParameter {
            name: "csi_error_variance",
            requirement: ">= 0",
            value: csi_error_variance,
        });
    }
    if csi_error_variance == 0.0 {
        return Ok(h);
    }
    let sigma = (0.5 * csi_error_variance).sqrt();
    let ei: f64 = rng.sample(StandardNormal);
    let eq: f64 = rng.sample(StandardNormal);
    Ok(h + Complex64::new(sigma * ei, sigma * eq))
}

/// Zero-forcing recovery `x_hat_i = y_i / (lambda * h_est)`.
pub fn zero_forcing(
    y: &[Complex64],
    lambda: f64,
    h_est: Complex64,
) -> Result<Vec<Complex64>, ChannelError> {
    let gain = h_est * lambda;
    let mag = gain.norm();
    if mag < 1e-12 {
        return Err(ChannelError::EqualizationSingular { gain: mag });
    }
    Ok(y.iter().map(|&s| s / gain).collect())
}

/// Draw the fading, CSI and noise level for one transmission.
///
/// `mean_symbol_power` is the measured mean `|x|^2` of the packed payload.
/// Draw order (fixed for reproducibility): fading, then CSI disturbance;
/// the per-symbol noise is drawn later by [`apply_channel`].
pub fn draw_realization<R: Rng + ?Sized>(
    params: &ChannelParams,
    mean_symbol_power: f64,
    rng: &mut R,
) -> Result<ChannelRealization, ChannelError> {
    let lambda = path_loss_gain(params.p0, params.distance_m, params.path_loss_factor)?;
    let h = sample_rician(params.rician_k, rng)?;
    let h_est = perturb_csi(h, params.csi_error_variance, rng)?;
    let rx_power = match params.noise_mode {
        NoiseMode::SnrAtReceiver => lambda * lambda * h.norm_sqr() * mean_symbol_power,
        NoiseMode::FixedReference {
            path_loss_factor,
            distance_m,
        } => {
            let lambda_ref = path_loss_gain(params.p0, distance_m, path_loss_factor)?;
            lambda_ref * lambda_ref * mean_symbol_power
        }
    };
    let noise_variance = if params.snr_db == f64::INFINITY || rx_power == 0.0 {
        0.0
    } else {
        noise_variance_for_snr(params.snr_db + params.processing_gain_db, rx_power)?
    };
    Ok(ChannelRealization {
        h,
        h_est,
        lambda,
        noise_variance,
    })
}

/// Full transmit chain for an already-normalized payload. The recovered
/// payload reuses the sender's axis statistics (assumed shared out of band).
pub fn transmit_payload<R: Rng + ?Sized>(
    payload: &Payload,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<(Payload, Transmission), ChannelError> {
    if payload.values.is_empty() {
        return Err(ChannelError::EmptyPayload);
    }
    let packed = pack_complex(&payload.values);
    let mean_power = packed.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>()
        / packed.symbols.len() as f64;
    let realization = draw_realization(params, mean_power.max(1e-300), rng)?;
    let received = apply_channel(&packed.symbols, &realization, rng);
    let equalized = zero_forcing(&received, realization.lambda, realization.h_est)?;
    let recovered_norm = unpack_complex(&PackedSignal {
        symbols: equalized,
        real_len: packed.real_len,
    });
    let mse = recovered_norm
        .iter()
        .zip(&payload.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / recovered_norm.len() as f64;
    let recovered_payload = Payload {
        values: recovered_norm,
        axis_stats: payload.axis_stats.clone(),
        axis_arity: payload.axis_arity,
    };
    let transmission = Transmission {
        recovered: denormalize_payload(&recovered_payload),
        normalized_rms_error: mse.sqrt(),
        symbols_sent: packed.symbols.len(),
        realization,
    };
    Ok((recovered_payload, transmission))
}

/// Convenience chain on raw values: normalize, transmit, denormalize.
pub fn transmit<R: Rng + ?Sized>(
    values: &[f64],
    axis_arity: usize,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<Transmission, ChannelError> {
    let payload = normalize_payload(values, axis_arity)?;
    let (_, transmission) = transmit_payload(&payload, params, rng)?;
    Ok(transmission)
}
