//! Frame-level feature extraction: the quantizer front end and the mel
//! spectrogram used for vocoder reconstruction loss.
//!
//! [`extract_features`] produces an 80-dimensional log-mel matrix at a
//! fixed 50 Hz frame rate (20 ms hop, 25 ms window) from 16 kHz audio.
//! It stands in for a pretrained self-supervised encoder's hidden
//! activations: the interface (waveform in, `T x D` frame matrix at 50 Hz
//! out) is what the rest of the pipeline depends on, so a learned encoder
//! adapter can replace it without touching any caller.
//!
//! [`mel_spectrogram`] is the vocoder's reconstruction target: 80 mel
//! bands from a 1024-point transform with hop 256, log-compressed with a
//! fixed floor so every entry is finite. The vocoder trains against an
//! autodiff re-implementation of the same transform; a unit test in the
//! vocoder module pins the two to each other numerically.

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::data::Waveform;
use crate::error::{CoreError, CoreResult};
use crate::{FRAME_RATE_HZ, MODEL_SAMPLE_RATE};

/// Feature dimension of [`extract_features`] output.
pub const FEATURE_DIM: usize = 80;
/// Analysis window of the 50 Hz extractor, in samples (25 ms at 16 kHz).
pub const FEATURE_WIN: usize = 400;
/// Hop of the 50 Hz extractor, in samples (20 ms at 16 kHz).
pub const FEATURE_HOP: usize = 320;
/// FFT size of the 50 Hz extractor (next power of two above the window).
pub const FEATURE_FFT: usize = 512;
/// Log floor of the 50 Hz extractor's power spectrum.
pub const FEATURE_LOG_FLOOR: f32 = 1e-10;

/// Mel bands of the vocoder-loss spectrogram.
pub const MEL_N_MELS: usize = 80;
/// Transform size of the vocoder-loss spectrogram.
pub const MEL_N_FFT: usize = 1024;
/// Hop of the vocoder-loss spectrogram, in samples.
pub const MEL_HOP: usize = 256;
/// Log floor of the vocoder-loss spectrogram (applied before the log so
/// silence maps to a finite value).
pub const MEL_LOG_FLOOR: f32 = 1e-5;

/// Frame-level feature matrix: `T x D` rows of real features at a fixed
/// frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    /// `T x D` feature rows.
    pub frames: Array2<f32>,
    /// Frames per second.
    pub frame_rate: usize,
    /// Feature dimension `D`.
    pub feature_dim: usize,
}

/// Log-mel spectrogram: `T x M` rows of log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelMatrix {
    /// `T x M` log-mel rows.
    pub frames: Array2<f32>,
    /// Analysis hop in samples.
    pub hop: usize,
    /// Number of mel bands `M`.
    pub n_mels: usize,
}

/// Hz → mel (HTK convention).
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Mel → Hz (HTK convention).
fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank as an `n_mels x (n_fft/2 + 1)` matrix over
/// `[0, f_max]` Hz at `sample_rate`. Filters are unit-peak triangles (no
/// area normalization).
pub fn mel_filterbank(n_fft: usize, n_mels: usize, sample_rate: u32, f_max: f64) -> Array2<f32> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 edge points, linear in mel.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let weight = if f > lo && f < center {
                (f - lo) / (center - lo)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            bank[[m, k]] = weight as f32;
        }
    }
    bank
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Array1<f32> {
    Array1::from_iter((0..n).map(|i| {
        let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        (0.5 * (1.0 - x.cos())) as f32
    }))
}

/// Short-time power spectrum: frames of `|FFT(window * signal)|^2`.
///
/// The signal is right-padded with `win - hop` zeros so the frame count is
/// exactly `floor(len / hop)` — the property that keeps token counts
/// proportional to duration.
fn stft_power(samples: &[f32], win: usize, hop: usize, n_fft: usize) -> Array2<f32> {
    debug_assert!(win >= hop && n_fft >= win);
    let n_frames = samples.len() / hop;
    let n_bins = n_fft / 2 + 1;
    let window = hann_window(win);
    let mut power = Array2::zeros((n_frames, n_bins));
    if n_frames == 0 {
        return power;
    }
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); n_fft];
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < win {
                let idx = start + i;
                let s = samples.get(idx).copied().unwrap_or(0.0); // right pad
                s * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[t, k]] = buf[k].norm_sqr();
        }
    }
    power
}

/// Extracts the 50 Hz log-mel frame features that feed the quantizer.
///
/// Output is `floor(duration * 50)` rows of [`FEATURE_DIM`] log-mel
/// energies; deterministic for a fixed input.
///
/// # Errors
///
/// [`CoreError::Contract`] when the sample rate is not 16 kHz (callers
/// must resample explicitly — no silent conversion) or the waveform is
/// shorter than one frame.
pub fn extract_features(w: &Waveform) -> CoreResult<FrameMatrix> {
    if w.sample_rate != MODEL_SAMPLE_RATE {
        return Err(CoreError::contract(format!(
            "extract_features requires {MODEL_SAMPLE_RATE} Hz input, got {} Hz",
            w.sample_rate
        )));
    }
    if w.samples.len() < FEATURE_HOP {
        return Err(CoreError::contract(format!(
            "waveform too short for one frame: {} samples < {FEATURE_HOP}",
            w.samples.len()
        )));
    }
    let power = stft_power(&w.samples, FEATURE_WIN, FEATURE_HOP, FEATURE_FFT);
    let bank = mel_filterbank(FEATURE_FFT, FEATURE_DIM, MODEL_SAMPLE_RATE, 8000.0);
    let mel = power.dot(&bank.t());
    let frames = mel.mapv(|e| e.max(FEATURE_LOG_FLOOR).ln());
    Ok(FrameMatrix {
        frames,
        frame_rate: FRAME_RATE_HZ,
        feature_dim: FEATURE_DIM,
    })
}

/// Computes the log-mel spectrogram used as the vocoder reconstruction
/// target: [`MEL_N_MELS`] bands of a [`MEL_N_FFT`]-point transform with
/// hop [`MEL_HOP`], magnitude-domain, floored at [`MEL_LOG_FLOOR`] before
/// the natural log.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty waveform.
pub fn mel_spectrogram(w: &Waveform) -> CoreResult<MelMatrix> {
    if w.samples.is_empty() {
        return Err(CoreError::contract("mel_spectrogram of empty waveform"));
    }
    let power = stft_power(&w.samples, MEL_N_FFT, MEL_HOP, MEL_N_FFT);
    let magnitude = power.mapv(|p| p.sqrt());
    let bank = mel_filterbank(MEL_N_FFT, MEL_N_MELS, w.sample_rate, w.sample_rate as f64 / 2.0);
    let mel = magnitude.dot(&bank.t());
    let frames = mel.mapv(|e| e.max(MEL_LOG_FLOOR).ln());
    Ok(MelMatrix {
        frames,
        hop: MEL_HOP,
        n_mels: MEL_N_MELS,
    })
}

/// Mean absolute difference between two equal-shaped log-mel matrices.
///
/// # Errors
///
/// [`CoreError::Contract`] on shape mismatch.
pub fn mel_l1(a: &MelMatrix, b: &MelMatrix) -> CoreResult<f32> {
    if a.frames.dim() != b.frames.dim() {
        return Err(CoreError::contract(format!(
            "mel matrices differ in shape: {:?} vs {:?}",
            a.frames.dim(),
            b.frames.dim()
        )));
    }
    let n = a.frames.len().max(1);
    let sum: f32 = a
        .frames
        .iter()
        .zip(b.frames.iter())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / n as f32)
}
