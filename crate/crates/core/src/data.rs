//! Data ingestion: utterance manifests, audio I/O, resampling, prompt
//! cropping, and token-budget batching.
//!
//! The manifest is a JSON-lines text file (one object per line) with the
//! exact field set of [`Utterance`]; it is streamable and diff-friendly.
//! Audio lives in PCM16 mono little-endian WAV containers — multi-channel
//! files are rejected rather than silently averaged so that provenance
//! stays explicit.
//!
//! Training corpora are length-filtered to [1, 18] seconds via
//! [`filter_by_duration`]; out-of-range utterances are skipped with a
//! logged warning rather than erroring.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::TokenSequence;

/// Language domain of an utterance; conditions the vocoder via a binary
/// learned embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Hebrew-domain audio.
    Heb,
    /// English-domain audio.
    En,
}

impl Domain {
    /// Index into the vocoder's two-row domain embedding table.
    pub fn index(self) -> usize {
        match self {
            Domain::Heb => 0,
            Domain::En => 1,
        }
    }
}

/// One manifest record: an audio file plus its transcript and metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    /// Path to the utterance's WAV file (absolute, or relative to the
    /// manifest's directory).
    pub audio_path: PathBuf,
    /// Ground-truth transcript.
    pub transcript: String,
    /// Opaque speaker identity label.
    pub speaker_id: String,
    /// Language domain flag.
    pub domain: Domain,
    /// Duration in seconds; must be positive.
    pub duration_sec: f64,
}

/// Mono audio: samples in [-1, 1] plus the sample rate they were captured
/// at.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Mono samples, nominally within [-1, 1].
    pub samples: Vec<f32>,
    /// Samples per second.
    pub sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform; `sample_rate` must be positive.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> CoreResult<Self> {
        if sample_rate == 0 {
            return Err(CoreError::contract("sample_rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Duration in seconds.
    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// True when the waveform holds no samples.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a manifest file: one JSON object per line, one [`Utterance`] per
/// object, in file order. Blank lines are not permitted (a manifest is a
/// record stream, not a document).
///
/// # Errors
///
/// I/O errors propagate as [`CoreError::Io`]; a malformed line yields a
/// [`CoreError::Parse`] naming its 1-based line number. Records violating
/// the `Utterance` invariants (non-positive duration, empty transcript)
/// are also parse errors.
pub fn load_manifest(path: &Path) -> CoreResult<Vec<Utterance>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut utterances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let parse_err = |message: String| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let utt: Utterance =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if utt.duration_sec <= 0.0 {
            return Err(parse_err(format!(
                "duration_sec must be positive, got {}",
                utt.duration_sec
            )));
        }
        if utt.transcript.trim().is_empty() {
            return Err(parse_err("transcript is empty".into()));
        }
        utterances.push(utt);
    }
    Ok(utterances)
}

/// Writes a manifest as JSON-lines, one record per utterance, preserving
/// order. Inverse of [`load_manifest`].
pub fn save_manifest(path: &Path, utterances: &[Utterance]) -> CoreResult<()> {
    let mut file = fs::File::create(path)?;
    for utt in utterances {
        let line = serde_json::to_string(utt)
            .map_err(|e| CoreError::format(format!("manifest record serialization: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Minimum training-utterance duration in seconds.
pub const MIN_UTTERANCE_SEC: f64 = 1.0;
/// Maximum training-utterance duration in seconds.
pub const MAX_UTTERANCE_SEC: f64 = 18.0;

/// Drops utterances outside the [1, 18] second training window, logging a
/// warning for each skip. Order of survivors is preserved.
pub fn filter_by_duration(utterances: Vec<Utterance>) -> Vec<Utterance> {
    utterances
        .into_iter()
        .filter(|u| {
            let keep =
                u.duration_sec >= MIN_UTTERANCE_SEC && u.duration_sec <= MAX_UTTERANCE_SEC;
            if !keep {
                log::warn!(
                    "skipping {} ({}s): outside [{MIN_UTTERANCE_SEC}, {MAX_UTTERANCE_SEC}]s",
                    u.audio_path.display(),
                    u.duration_sec
                );
            }
            keep
        })
        .collect()
}

// --- WAV container ---------------------------------------------------------

/// Reads a PCM16 mono little-endian WAV file.
///
/// # Errors
///
/// [`CoreError::Format`] for anything that is not a canonical PCM16 mono
/// RIFF/WAVE file (multi-channel audio is rejected, not downmixed).
pub fn read_wav(path: &Path) -> CoreResult<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes).map_err(|msg| CoreError::format(format!("{}: {msg}", path.display())))
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, String> {
    let u16_at = |off: usize| -> Result<u16, String> {
        bytes
            .get(off..off + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| "truncated header".to_string())
    };
    let u32_at = |off: usize| -> Result<u32, String> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| "truncated header".to_string())
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }

    // Walk the chunk list; require an `fmt ` chunk before `data`.
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(format!(
                "chunk '{}' overruns file",
                String::from_utf8_lossy(id)
            ));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too small".into());
                }
                fmt = Some((
                    u16_at(body)?,
                    u16_at(body + 2)?,
                    u32_at(body + 4)?,
                    u16_at(body + 14)?,
                ));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        // Chunks are word-aligned: odd sizes carry a pad byte.
        pos = body + size + (size & 1);
    }

    let (format, channels, sample_rate, bits) = fmt.ok_or("missing fmt chunk")?;
    let (data_off, data_len) = data.ok_or("missing data chunk")?;
    if format != 1 {
        return Err(format!("unsupported WAV format code {format} (want PCM=1)"));
    }
    if channels != 1 {
        return Err(format!(
            "unsupported channel count {channels}: only mono is accepted"
        ));
    }
    if bits != 16 {
        return Err(format!("unsupported bit depth {bits} (want 16)"));
    }
    if data_len % 2 != 0 {
        return Err("data chunk length is odd".into());
    }

    let samples = bytes[data_off..data_off + data_len]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate,
    })
}

/// Writes a waveform as PCM16 mono little-endian WAV. Samples are clamped
/// to [-1, 1] and rounded half-away-from-zero, so the byte output is a
/// pure function of the input — two identical waveforms serialize
/// byte-identically.
pub fn write_wav(path: &Path, waveform: &Waveform) -> CoreResult<()> {
    let n = waveform.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&waveform.sample_rate.to_le_bytes());
    out.extend_from_slice(&(waveform.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &waveform.samples {
        let clamped = s.clamp(-1.0, 1.0);
        let scaled = (clamped * 32767.0).round() as i16;
        out.extend_from_slice(&scaled.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

// --- Resampling ------------------------------------------------------------

/// Half-width of the windowed-sinc interpolation kernel, in source
/// samples. 32 taps per side keeps the 440 Hz test tone's spectral peak
/// within a fraction of a hertz through a 24 kHz to 16 kHz conversion.
const SINC_HALF_WIDTH: usize = 32;

/// Resamples to `target_rate` with a Hann-windowed sinc interpolator whose
/// cutoff sits at the lower of the two Nyquist frequencies (alias-safe for
/// downsampling, transparent for upsampling). Output length is
/// `round(len * target / source)`.
///
/// A same-rate call returns the input unchanged.
///
/// # Errors
///
/// [`CoreError::Contract`] when `target_rate` is zero.
pub fn resample(w: &Waveform, target_rate: u32) -> CoreResult<Waveform> {
    if target_rate == 0 {
        return Err(CoreError::contract("target_rate must be positive"));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let src_rate = w.sample_rate as f64;
    let dst_rate = target_rate as f64;
    let out_len = ((w.samples.len() as f64) * dst_rate / src_rate).round() as usize;

    // Normalized cutoff (cycles per *source* sample): the smaller Nyquist.
    let cutoff = 0.5 * (dst_rate / src_rate).min(1.0);
    let half = SINC_HALF_WIDTH as f64;
    let src = &w.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        // Position of output sample n on the source-time axis.
        let t = n as f64 * src_rate / dst_rate;
        let center = t.floor() as isize;
        let mut acc = 0.0f64;
        let lo = center - SINC_HALF_WIDTH as isize + 1;
        let hi = center + SINC_HALF_WIDTH as isize;
        for m in lo..=hi {
            if m < 0 || m as usize >= src.len() {
                continue;
            }
            let dt = m as f64 - t;
            // 2*cutoff*sinc(2*cutoff*dt), Hann-windowed over [-half, half].
            let sinc = {
                let x = 2.0 * cutoff * dt;
                if x.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                }
            };
            let window = 0.5 * (1.0 + (std::f64::consts::PI * dt / half).cos());
            acc += src[m as usize] as f64 * 2.0 * cutoff * sinc * window;
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_rate)
}

// --- Prompt cropping --------------------------------------------------------

/// Returns the first `d_p` seconds of `y` (exactly `round(d_p * f_s)`
/// samples). `d_p = 0` yields an empty waveform at the same rate.
///
/// # Errors
///
/// [`CoreError::Range`] when `d_p` exceeds the waveform's duration.
pub fn crop_prompt(y: &Waveform, d_p: f64) -> CoreResult<Waveform> {
    if d_p < 0.0 {
        return Err(CoreError::range(format!("negative prompt duration {d_p}")));
    }
    let n = (d_p * y.sample_rate as f64).round() as usize;
    if n > y.samples.len() {
        return Err(CoreError::range(format!(
            "prompt duration {d_p}s exceeds waveform duration {:.3}s",
            y.duration_sec()
        )));
    }
    Waveform::new(y.samples[..n].to_vec(), y.sample_rate)
}

// --- Token-budget batching ---------------------------------------------------

/// Packs token sequences into batches greedily, in input order, such that
/// the summed token count of each batch never exceeds `budget`. The
/// concatenation of the returned batches is exactly the input sequence of
/// items (nothing dropped, duplicated, or reordered).
///
/// # Errors
///
/// [`CoreError::Capacity`] when any single item is longer than `budget`.
pub fn batch_by_token_count(
    items: &[TokenSequence],
    budget: usize,
) -> CoreResult<Vec<Vec<TokenSequence>>> {
    let mut batches: Vec<Vec<TokenSequence>> = Vec::new();
    let mut current: Vec<TokenSequence> = Vec::new();
    let mut current_total = 0usize;
    for (idx, item) in items.iter().enumerate() {
        if item.len() > budget {
            return Err(CoreError::Capacity(format!(
                "item {idx} has {} tokens, exceeding the batch budget of {budget}",
                item.len()
            )));
        }
        if current_total + item.len() > budget {
            batches.push(std::mem::take(&mut current));
            current_total = 0;
        }
        current_total += item.len();
        current.push(item.clone());
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}
