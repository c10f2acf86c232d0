//! Speaker embedding: fixed-dimension vectors summarizing vocal identity.
//!
//! Two *functionally distinct* embedders are provided on purpose: the
//! `cond` embedder conditions the vocoder, while the `eval` embedder
//! scores speaker similarity during evaluation. Keeping them separate
//! prevents the evaluation from trivially rewarding whatever statistic the
//! vocoder was conditioned on.
//!
//! Both are deterministic DSP pipelines — pooled spectral statistics
//! followed by a fixed random projection and L2 normalization. The pooled
//! statistic is the per-frame *relative power distribution* (filterbank
//! power normalized to sum 1, mean+std over frames): normalizing per
//! frame makes the vector gain-invariant and lets spectral peaks — where
//! vocal identity lives — dominate over broadband leakage:
//!
//! - `cond`: over the 80-band mel filterbank frames from
//!   [`crate::features::extract_features`], projected 160 → 192.
//! - `eval`: over a *linear*-spaced 40-band filterbank (512-point
//!   transform, hop 256), projected 80 → 192 with an independent
//!   projection matrix.
//!
//! They sit behind plain functions with a stable signature so pretrained
//! verification-model adapters can replace them without touching callers.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::data::Waveform;
use crate::error::{CoreError, CoreResult};
use crate::features::{extract_features, hann_window};
use crate::MODEL_SAMPLE_RATE;

/// Dimension of every speaker vector (`D_sp`).
pub const SPEAKER_DIM: usize = 192;

/// Minimum audio length accepted by the embedders, in seconds.
pub const MIN_EMBED_SEC: f64 = 1.0;

/// Fixed RNG seed of the `cond` projection matrix.
const COND_PROJECTION_SEED: u64 = 0x5EED_C04D;
/// Fixed RNG seed of the `eval` projection matrix.
const EVAL_PROJECTION_SEED: u64 = 0x5EED_E7A1;

/// A unit-norm speaker vector tagged with the embedder that produced it.
/// Vectors from different embedders live in different spaces and must not
/// be compared; [`crate::metrics::cosine_similarity`] enforces this.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVec {
    /// Unit-norm embedding values, length [`SPEAKER_DIM`].
    pub values: Vec<f32>,
    /// Which embedder produced this vector ("cond" or "eval").
    pub embedder_id: &'static str,
}

/// Deterministic `rows x cols` projection with entries uniform in [-1, 1].
fn fixed_projection(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0f32..1.0))
}

/// Converts log-energy frames to per-frame relative power: exponentiate
/// back to linear power and normalize each frame to sum 1. An all-zero
/// frame becomes uniform.
fn relative_power(frames: &Array2<f32>) -> Array2<f32> {
    let d = frames.ncols();
    let mut out = frames.mapv(|v| v.exp());
    for mut row in out.rows_mut() {
        let sum: f32 = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        } else {
            row.fill(1.0 / d.max(1) as f32);
        }
    }
    out
}

/// Mean and population-std pooling over frame rows: `T x D` → `2D`.
fn mean_std_pool(frames: &Array2<f32>) -> Array1<f32> {
    let t = frames.nrows().max(1) as f32;
    let d = frames.ncols();
    let mut pooled = Array1::zeros(2 * d);
    for j in 0..d {
        let col = frames.column(j);
        let mean: f32 = col.sum() / t;
        let var: f32 = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / t;
        pooled[j] = mean;
        pooled[d + j] = var.sqrt();
    }
    pooled
}

fn project_and_normalize(
    pooled: &Array1<f32>,
    projection: &Array2<f32>,
    embedder_id: &'static str,
) -> CoreResult<SpeakerVec> {
    // Center the pooled statistics: relative-power vectors share a
    // common simplex offset, which would otherwise make every embedding
    // partially collinear.
    let mean = pooled.sum() / pooled.len().max(1) as f32;
    let centered = pooled.mapv(|v| v - mean);
    let raw = centered.dot(projection);
    let norm: f32 = raw.iter().map(|&v| v * v).sum::<f32>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(CoreError::contract(
            "speaker embedding degenerated to a zero or non-finite vector",
        ));
    }
    Ok(SpeakerVec {
        values: raw.iter().map(|&v| v / norm).collect(),
        embedder_id,
    })
}

fn check_input(w: &Waveform) -> CoreResult<()> {
    if w.sample_rate != MODEL_SAMPLE_RATE {
        return Err(CoreError::contract(format!(
            "speaker embedding requires {MODEL_SAMPLE_RATE} Hz input, got {} Hz",
            w.sample_rate
        )));
    }
    if w.duration_sec() < MIN_EMBED_SEC {
        return Err(CoreError::contract(format!(
            "speaker embedding requires at least {MIN_EMBED_SEC} s of audio, got {:.3} s",
            w.duration_sec()
        )));
    }
    Ok(())
}

/// Embeds a waveform for **vocoder conditioning** (`embedder_id = "cond"`).
/// Deterministic; output is unit-norm with dimension [`SPEAKER_DIM`].
///
/// # Errors
///
/// [`CoreError::Contract`] for audio shorter than [`MIN_EMBED_SEC`] or not
/// at 16 kHz.
pub fn embed_speaker(w: &Waveform) -> CoreResult<SpeakerVec> {
    check_input(w)?;
    let feats = extract_features(w)?;
    let pooled = mean_std_pool(&relative_power(&feats.frames));
    let projection = fixed_projection(pooled.len(), SPEAKER_DIM, COND_PROJECTION_SEED);
    project_and_normalize(&pooled, &projection, "cond")
}

/// Number of linear bands in the eval embedder's filterbank.
const EVAL_BANDS: usize = 40;
/// Transform size of the eval embedder.
const EVAL_FFT: usize = 512;
/// Hop of the eval embedder.
const EVAL_HOP: usize = 256;

/// Linear-spaced triangular filterbank (in contrast to the mel-spaced one
/// the cond embedder sees): `EVAL_BANDS x (EVAL_FFT/2+1)`.
fn linear_filterbank() -> Array2<f32> {
    let n_bins = EVAL_FFT / 2 + 1;
    let f_max = MODEL_SAMPLE_RATE as f64 / 2.0;
    let edges: Vec<f64> = (0..EVAL_BANDS + 2)
        .map(|i| f_max * i as f64 / (EVAL_BANDS + 1) as f64)
        .collect();
    let mut bank = Array2::zeros((EVAL_BANDS, n_bins));
    for m in 0..EVAL_BANDS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * MODEL_SAMPLE_RATE as f64 / EVAL_FFT as f64;
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

/// Log-energy frames of the eval embedder's linear filterbank.
fn eval_frames(samples: &[f32]) -> Array2<f32> {
    let n_frames = samples.len() / EVAL_HOP;
    let window = hann_window(EVAL_FFT);
    let bank = linear_filterbank();
    let fft = FftPlanner::new().plan_fft_forward(EVAL_FFT);
    let n_bins = EVAL_FFT / 2 + 1;
    let mut out = Array2::zeros((n_frames, EVAL_BANDS));
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); EVAL_FFT];
    let mut power = Array1::zeros(n_bins);
    for t in 0..n_frames {
        let start = t * EVAL_HOP;
        for i in 0..EVAL_FFT {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[k] = buf[k].norm_sqr();
        }
        let mel = bank.dot(&power);
        for (m, &e) in mel.iter().enumerate() {
            out[[t, m]] = e.max(1e-10).ln();
        }
    }
    out
}

/// Embeds a waveform for **evaluation** (`embedder_id = "eval"`): same
/// pooling recipe as [`embed_speaker`] but over a differently
/// parameterized filterbank with an independent projection, so the two
/// mappings are functionally distinct.
///
/// # Errors
///
/// As [`embed_speaker`].
pub fn embed_speaker_eval(w: &Waveform) -> CoreResult<SpeakerVec> {
    check_input(w)?;
    let frames = eval_frames(&w.samples);
    let pooled = mean_std_pool(&relative_power(&frames));
    let projection = fixed_projection(pooled.len(), SPEAKER_DIM, EVAL_PROJECTION_SEED);
    project_and_normalize(&pooled, &projection, "eval")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine_similarity;
    use approx::assert_abs_diff_eq;

    /// A synthetic "voice": harmonic stack on `f0` with per-utterance
    /// content tones so two utterances of one voice differ.
    fn voice(f0: f64, content_freq: f64, seconds: f64) -> Waveform {
        let rate = MODEL_SAMPLE_RATE;
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let mut v = 0.0;
                for (h, amp) in [(1.0, 0.5), (2.0, 0.3), (3.0, 0.2)] {
                    v += amp * (2.0 * std::f64::consts::PI * f0 * h * t).sin();
                }
                v += 0.15 * (2.0 * std::f64::consts::PI * content_freq * t).sin();
                (v * 0.5) as f32
            })
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn same_waveform_embeds_identically() {
        let w = voice(120.0, 3000.0, 1.2);
        let a = embed_speaker(&w).unwrap();
        let b = embed_speaker(&w).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(cosine_similarity(&a, &b).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn output_dimension_and_norm_are_fixed() {
        let w = voice(180.0, 2500.0, 1.0);
        for vec in [embed_speaker(&w).unwrap(), embed_speaker_eval(&w).unwrap()] {
            assert_eq!(vec.values.len(), SPEAKER_DIM);
            let norm: f32 = vec.values.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn embedder_ids_differ() {
        let w = voice(150.0, 2000.0, 1.0);
        let cond = embed_speaker(&w).unwrap();
        let eval = embed_speaker_eval(&w).unwrap();
        assert_eq!(cond.embedder_id, "cond");
        assert_eq!(eval.embedder_id, "eval");
        // Different spaces: direct comparison must be rejected.
        assert!(cosine_similarity(&cond, &eval).is_err());
    }

    #[test]
    fn disjoint_pitch_voices_separate_in_both_embedders() {
        // Oracle computed on generated tone-complex voices: within-voice
        // similarity must exceed cross-voice similarity for 120 Hz vs
        // 240 Hz fundamentals.
        let a1 = voice(120.0, 2800.0, 1.5);
        let a2 = voice(120.0, 3600.0, 1.5);
        let b1 = voice(240.0, 2800.0, 1.5);
        let b2 = voice(240.0, 3600.0, 1.5);
        for embed in [embed_speaker, embed_speaker_eval] {
            let (ea1, ea2) = (embed(&a1).unwrap(), embed(&a2).unwrap());
            let (eb1, eb2) = (embed(&b1).unwrap(), embed(&b2).unwrap());
            let same_a = cosine_similarity(&ea1, &ea2).unwrap();
            let same_b = cosine_similarity(&eb1, &eb2).unwrap();
            let cross = cosine_similarity(&ea1, &eb1).unwrap();
            assert!(
                same_a > cross && same_b > cross,
                "within-voice {same_a:.3}/{same_b:.3} vs cross {cross:.3}"
            );
        }
    }

    #[test]
    fn short_audio_is_rejected() {
        let w = voice(120.0, 2000.0, 0.5);
        assert!(embed_speaker(&w).is_err());
        assert!(embed_speaker_eval(&w).is_err());
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let w = Waveform::new(vec![0.1; 48_000], 24_000).unwrap();
        assert!(embed_speaker(&w).is_err());
    }

    #[test]
    fn batch_order_does_not_leak_between_items() {
        let w1 = voice(130.0, 2200.0, 1.0);
        let w2 = voice(210.0, 3100.0, 1.0);
        let fwd: Vec<SpeakerVec> = [&w1, &w2].iter().map(|w| embed_speaker(w).unwrap()).collect();
        let rev: Vec<SpeakerVec> = [&w2, &w1].iter().map(|w| embed_speaker(w).unwrap()).collect();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
    }
}
