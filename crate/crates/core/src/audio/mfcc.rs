//! MFCC extraction: Hann window, magnitude spectrum, triangular mel
//! filterbank, log compression and an orthonormal DCT-II.
//!
//! The default configuration (40 ms frames, 20 ms stride, 1024-point FFT,
//! 40 mel filters over 20–4000 Hz, 10 coefficients) turns a one-second
//! 16 kHz clip into a 49x10 feature map.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub frame_ms: f64,
    pub stride_ms: f64,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub coefficients: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_ms: 40.0,
            stride_ms: 20.0,
            fft_size: 1024,
            mel_filters: 40,
            coefficients: 10,
            mel_low_hz: 20.0,
            mel_high_hz: 4000.0,
            log_floor: 1e-6,
        }
    }
}

impl MfccConfig {
    pub fn frame_samples(&self) -> usize {
        (self.frame_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn stride_samples(&self) -> usize {
        (self.stride_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Frames produced from a clip of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + (len - self.frame_samples()) / self.stride_samples()
    }

    /// Feature-map shape for a one-second clip: `[frames, coefficients, 1]`.
    pub fn feature_shape(&self) -> [usize; 3] {
        [self.frames(CLIP_SAMPLES), self.coefficients, 1]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed MFCC pipeline. Stateless per clip; safe to share across
/// threads.
pub struct Mfcc {
    config: MfccConfig,
    window: Vec<f64>,
    /// Per filter: first FFT bin with nonzero weight, then the weights.
    filters: Vec<(usize, Vec<f64>)>,
    /// Row-major [coefficients x mel_filters] orthonormal DCT-II matrix.
    dct: Vec<f64>,
    // The pipeline runs in f64 internally so stored f32 features carry no
    // accumulated rounding beyond the final cast.
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(config: MfccConfig) -> Self {
        let frame = config.frame_samples();
        let window: Vec<f64> = (0..frame)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / (frame - 1) as f64;
                0.5 - 0.5 * x.cos()
            })
            .collect();
        let filters = mel_filterbank(&config);
        let dct = dct_matrix(config.coefficients, config.mel_filters);
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Mfcc {
            config,
            window,
            filters,
            dct,
            fft,
        }
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    /// Extracts the (pre-standardization) feature map of a one-second clip.
    pub fn extract(&self, clip: &AudioClip) -> Result<Tensor> {
        if clip.sample_rate != SAMPLE_RATE {
            return Err(KwsError::Dataset(format!(
                "mfcc requires {SAMPLE_RATE} Hz input, got {}",
                clip.sample_rate
            )));
        }
        if clip.samples.len() != CLIP_SAMPLES {
            return Err(KwsError::Dataset(format!(
                "mfcc requires a {CLIP_SAMPLES}-sample clip, got {}",
                clip.samples.len()
            )));
        }
        let frame = self.config.frame_samples();
        let stride = self.config.stride_samples();
        let n_frames = self.config.frames(clip.samples.len());
        let n_bins = self.config.fft_size / 2 + 1;
        let n_coeffs = self.config.coefficients;
        let n_mels = self.config.mel_filters;

        let mut out = Tensor::zeros(&[n_frames, n_coeffs, 1]);
        let mut buf = vec![Complex::new(0.0f64, 0.0); self.config.fft_size];
        let mut magnitude = vec![0.0f64; n_bins];
        let mut log_mel = vec![0.0f64; n_mels];

        for fi in 0..n_frames {
            let start = fi * stride;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = clip.samples[start + i] as f64 * w;
            }
            self.fft.process(&mut buf);
            for (m, c) in magnitude.iter_mut().zip(&buf[..n_bins]) {
                *m = c.norm();
            }
            for (lm, (first, weights)) in log_mel.iter_mut().zip(&self.filters) {
                let mut e = 0.0f64;
                for (w, m) in weights.iter().zip(&magnitude[*first..]) {
                    e += w * m;
                }
                *lm = (e + self.config.log_floor).ln();
            }
            let row = &mut out.data_mut()[fi * n_coeffs..(fi + 1) * n_coeffs];
            for (ci, r) in row.iter_mut().enumerate() {
                let drow = &self.dct[ci * n_mels..(ci + 1) * n_mels];
                let mut acc = 0.0f64;
                for (d, lm) in drow.iter().zip(&log_mel) {
                    acc += d * lm;
                }
                *r = acc as f32;
            }
        }
        if !out.all_finite() {
            return Err(KwsError::NonFinite("mfcc feature map".into()));
        }
        Ok(out)
    }
}

fn mel_filterbank(config: &MfccConfig) -> Vec<(usize, Vec<f64>)> {
    let n_bins = config.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(config.mel_low_hz);
    let mel_hi = hz_to_mel(config.mel_high_hz);
    let n = config.mel_filters;
    let edges: Vec<f64> = (0..n + 2)
        .map(|j| mel_to_hz(mel_lo + (mel_hi - mel_lo) * j as f64 / (n + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / config.fft_size as f64;

    (0..n)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = if f > lo && f < center {
                    (f - lo) / (center - lo)
                } else if (center..hi).contains(&f) {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    if first.is_none() {
                        first = Some(k);
                    }
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            (first.unwrap_or(0), weights)
        })
        .collect()
}

fn dct_matrix(coefficients: usize, mels: usize) -> Vec<f64> {
    let mut dct = vec![0.0f64; coefficients * mels];
    for j in 0..coefficients {
        let scale = if j == 0 {
            (1.0 / mels as f64).sqrt()
        } else {
            (2.0 / mels as f64).sqrt()
        };
        for m in 0..mels {
            let angle = std::f64::consts::PI * j as f64 * (m as f64 + 0.5) / mels as f64;
            dct[j * mels + m] = scale * angle.cos();
        }
    }
    dct
}

/// Per-coefficient standardization statistics, computed on the pretraining
/// split and stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity(coefficients: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; coefficients],
            std: vec![1.0; coefficients],
        }
    }
}

const STD_GUARD: f32 = 1e-6;

/// Population mean and standard deviation per coefficient over all frames of
/// all maps.
pub fn compute_feature_stats<'a, I>(maps: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut sums: Vec<f64> = Vec::new();
    let mut sq_sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for map in maps {
        let c = map.shape()[1];
        if sums.is_empty() {
            sums = vec![0.0; c];
            sq_sums = vec![0.0; c];
        }
        for row in map.data().chunks_exact(c) {
            for (i, x) in row.iter().enumerate() {
                sums[i] += *x as f64;
                sq_sums[i] += (*x as f64) * (*x as f64);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(KwsError::Dataset(
            "cannot compute feature statistics from an empty set".into(),
        ));
    }
    let mean: Vec<f32> = sums.iter().map(|s| (s / count as f64) as f32).collect();
    let std: Vec<f32> = sq_sums
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / count as f64 - (*m as f64) * (*m as f64)).max(0.0);
            var.sqrt() as f32
        })
        .collect();
    Ok(FeatureStats { mean, std })
}

/// `(x - mean) / std` per coefficient, with the standard deviation guarded
/// away from zero.
pub fn standardize(map: &Tensor, stats: &FeatureStats) -> Tensor {
    let c = map.shape()[1];
    let mut out = map.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (i, x) in row.iter_mut().enumerate() {
            *x = (*x - stats.mean[i]) / stats.std[i].max(STD_GUARD);
        }
    }
    out
}
