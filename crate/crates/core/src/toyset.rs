//! Deterministic synthetic corpus with an exact inverse transcription.
//!
//! Each "phoneme" of a 12-symbol alphabet is rendered as a chord of three
//! pure tones in spectrally disjoint bands, so a waveform can be decoded
//! back to its text by narrowband energy matching — no pretrained ASR
//! needed. The decoder ([`invert`]) is the identity transcription oracle
//! used by the evaluation harness.
//!
//! Timing layout at rate 1.0: every character (symbol or space) occupies a
//! 0.2 s slot; a symbol slot is 80% tone + 20% silence, a space slot is
//! fully silent. The speaking-rate multiplier divides slot duration, so
//! `duration = |text| * 0.2 / rate` exactly — speaking rate is therefore
//! controllable and measurable, which the rate-transfer analysis needs.
//!
//! Speaker identity enters only through amplitude: a low pitch hum (120 vs
//! 240 Hz, below every symbol band) and a formant-style spectral tilt that
//! re-weights the three tones. Tone *frequencies* are speaker-independent,
//! which is what keeps inversion unambiguous across speakers.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_manifest, write_wav, Domain, Utterance, Waveform};
use crate::error::{CoreError, CoreResult};
use crate::MODEL_SAMPLE_RATE;

/// The symbol alphabet. Texts over the toyset use these characters plus
/// the space word separator.
pub const ALPHABET: [char; 12] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l'];

/// Base frequency of each tone band, in Hz. Symbol `i` places its tone
/// `t` at `BAND_BASE[t] + i * SYMBOL_SPACING_HZ`; the bands are disjoint
/// (band 0 tops out at 1950 Hz, band 1 spans 2700..4350, band 2 spans
/// 4500..6150) and everything stays under the 8 kHz Nyquist.
pub const BAND_BASE: [f64; 3] = [300.0, 2700.0, 4500.0];

/// Frequency spacing between adjacent symbols within a band, in Hz.
pub const SYMBOL_SPACING_HZ: f64 = 150.0;

/// The unknown-symbol marker emitted by [`invert`] for undecodable
/// segments. Deliberately outside [`ALPHABET`].
pub const UNK_SYMBOL: char = '?';

/// A synthetic voice: pitch hum frequency plus a formant-like spectral
/// emphasis center that re-weights tone amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    /// Stable identifier used as `speaker_id` in manifests.
    pub id: String,
    /// Pitch hum frequency in Hz (kept below [`BAND_BASE`][0]).
    pub pitch_hz: f64,
    /// Center of the amplitude emphasis curve, in Hz.
    pub formant_center_hz: f64,
    /// Manifest domain flag for utterances of this speaker.
    pub domain: Domain,
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    /// Number of symbols actually used (≤ [`ALPHABET`] length).
    pub alphabet_size: usize,
    /// Tones per symbol (≤ [`BAND_BASE`] length).
    pub tones_per_symbol: usize,
    /// Slot duration at rate 1.0, in seconds.
    pub symbol_duration: f64,
    /// Available voices.
    pub speakers: Vec<SpeakerProfile>,
    /// Inclusive speaking-rate multiplier range for corpus sampling.
    pub rate_range: (f64, f64),
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            alphabet_size: 12,
            tones_per_symbol: 3,
            symbol_duration: 0.2,
            speakers: vec![
                SpeakerProfile {
                    id: "spk_low".into(),
                    pitch_hz: 120.0,
                    formant_center_hz: 1500.0,
                    domain: Domain::Heb,
                },
                SpeakerProfile {
                    id: "spk_high".into(),
                    pitch_hz: 240.0,
                    formant_center_hz: 4000.0,
                    domain: Domain::En,
                },
            ],
            rate_range: (0.5, 2.0),
        }
    }
}

/// Frequency of tone `t` of symbol index `i`.
fn tone_freq(i: usize, t: usize) -> f64 {
    BAND_BASE[t] + i as f64 * SYMBOL_SPACING_HZ
}

/// Speaker-dependent amplitude weight of a tone at frequency `f`.
fn formant_weight(speaker: &SpeakerProfile, f: f64) -> f64 {
    let z = (f - speaker.formant_center_hz) / 1500.0;
    0.5 + 0.5 * (-0.5 * z * z).exp()
}

/// Base per-tone amplitude before speaker weighting.
const TONE_AMP: f64 = 0.22;
/// Pitch hum amplitude.
const HUM_AMP: f64 = 0.18;
/// Fraction of a symbol slot carrying tone (the rest is a gap).
const TONE_FRACTION: f64 = 0.8;
/// Attack/release ramp length in samples (5 ms at 16 kHz).
const RAMP: usize = 80;

/// Renders `text` (symbols from the alphabet plus spaces) to audio.
/// Deterministic; duration is exactly `|text| * symbol_duration / rate`
/// seconds (rounded to whole samples).
///
/// # Errors
///
/// [`CoreError::Contract`] on a character outside the alphabet, a rate
/// outside (0, ∞), or a speaker index out of range.
pub fn render(
    spec: &ToySpec,
    text: &str,
    speaker_idx: usize,
    rate: f64,
) -> CoreResult<Waveform> {
    if !(rate > 0.0) {
        return Err(CoreError::contract(format!("rate must be positive, got {rate}")));
    }
    let speaker = spec
        .speakers
        .get(speaker_idx)
        .ok_or_else(|| CoreError::contract(format!("speaker index {speaker_idx} out of range")))?;
    let symbol_index = |c: char| -> CoreResult<Option<usize>> {
        if c == ' ' {
            return Ok(None);
        }
        match ALPHABET[..spec.alphabet_size].iter().position(|&a| a == c) {
            Some(i) => Ok(Some(i)),
            None => Err(CoreError::contract(format!(
                "character {c:?} is outside the toyset alphabet"
            ))),
        }
    };

    let chars: Vec<char> = text.chars().collect();
    let slot_len = spec.symbol_duration / rate * MODEL_SAMPLE_RATE as f64;
    let total = (chars.len() as f64 * slot_len).round() as usize;
    let mut samples = vec![0.0f32; total];

    for (slot, &c) in chars.iter().enumerate() {
        let Some(sym) = symbol_index(c)? else {
            continue; // space: silent slot
        };
        let start = (slot as f64 * slot_len).round() as usize;
        let end = ((slot + 1) as f64 * slot_len).round() as usize;
        let tone_len = ((end - start) as f64 * TONE_FRACTION).round() as usize;
        let ramp = RAMP.min(tone_len / 4);
        for n in 0..tone_len {
            let tau = n as f64 / MODEL_SAMPLE_RATE as f64;
            let mut v = HUM_AMP * (2.0 * PI * speaker.pitch_hz * tau).sin();
            for t in 0..spec.tones_per_symbol {
                let f = tone_freq(sym, t);
                let amp = TONE_AMP * formant_weight(speaker, f);
                v += amp * (2.0 * PI * f * tau).sin();
            }
            // Raised-cosine attack/release against spectral splatter.
            let env = if n < ramp {
                0.5 * (1.0 - (PI * (n as f64 + 1.0) / (ramp as f64 + 1.0)).cos())
            } else if n >= tone_len - ramp {
                let k = tone_len - n;
                0.5 * (1.0 - (PI * k as f64 / (ramp as f64 + 1.0)).cos())
            } else {
                1.0
            };
            samples[start + n] = (v * env) as f32;
        }
    }
    Waveform::new(samples, MODEL_SAMPLE_RATE)
}

// --- Inversion ---------------------------------------------------------------

/// Envelope analysis frame length in samples (10 ms).
const ENV_FRAME: usize = 160;
/// Envelope hop in samples (5 ms).
const ENV_HOP: usize = 80;
/// Active-frame threshold as a fraction of the peak RMS.
const ACTIVITY_THRESHOLD: f64 = 0.3;
/// Absolute silence floor: below this peak RMS the input is silence.
const SILENCE_FLOOR: f64 = 1e-4;
/// Minimum credible tone length in seconds (anything shorter is a blip).
const MIN_TONE_SEC: f64 = 0.02;
/// A gap longer than this multiple of the median tone duration separates
/// words (intra-word gaps are 0.25x the tone duration, word gaps 1.5x).
const WORD_GAP_FACTOR: f64 = 0.75;
/// A decoded symbol requires each of its tones to carry at least this
/// multiple of the median probe energy; otherwise the segment is [`UNK_SYMBOL`].
const PRESENCE_FACTOR: f64 = 8.0;

/// Hann-windowed Goertzel energy of `samples` at frequency `f` Hz.
fn goertzel_energy(samples: &[f32], f: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let omega = 2.0 * PI * f / MODEL_SAMPLE_RATE as f64;
    let coeff = 2.0 * omega.cos();
    let (mut s_prev, mut s_prev2) = (0.0f64, 0.0f64);
    for (i, &x) in samples.iter().enumerate() {
        let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos());
        let s = x as f64 * w + coeff * s_prev - s_prev2;
        s_prev2 = s_prev;
        s_prev = s;
    }
    let power = s_prev * s_prev + s_prev2 * s_prev2 - coeff * s_prev * s_prev2;
    power.max(0.0) / (n as f64 * n as f64)
}

/// One detected tone segment, in samples.
#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    end: usize,
}

/// Energy-gated segmentation: RMS envelope, threshold at a fraction of
/// the peak, merge active frames into segments.
fn segment_activity(samples: &[f32]) -> Vec<Segment> {
    if samples.len() < ENV_FRAME {
        return Vec::new();
    }
    let n_frames = (samples.len() - ENV_FRAME) / ENV_HOP + 1;
    let rms: Vec<f64> = (0..n_frames)
        .map(|t| {
            let s = &samples[t * ENV_HOP..t * ENV_HOP + ENV_FRAME];
            (s.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / ENV_FRAME as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().copied().fold(0.0f64, f64::max);
    if peak < SILENCE_FLOOR {
        return Vec::new();
    }
    let threshold = ACTIVITY_THRESHOLD * peak;
    let mut segments = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &v) in rms.iter().enumerate() {
        if v >= threshold && open.is_none() {
            open = Some(t);
        }
        if v < threshold {
            if let Some(s) = open.take() {
                segments.push(Segment {
                    start: s * ENV_HOP,
                    end: t * ENV_HOP + ENV_FRAME - ENV_HOP, // frame start of t
                });
            }
        }
    }
    if let Some(s) = open {
        segments.push(Segment {
            start: s * ENV_HOP,
            end: samples.len(),
        });
    }
    let min_len = (MIN_TONE_SEC * MODEL_SAMPLE_RATE as f64) as usize;
    segments.retain(|s| s.end - s.start >= min_len);
    segments
}

/// Decodes one tone segment to a symbol via per-frequency energy probes.
fn classify_segment(spec: &ToySpec, samples: &[f32]) -> char {
    let n_symbols = spec.alphabet_size;
    let n_tones = spec.tones_per_symbol;
    // Probe every candidate frequency once.
    let mut energies = vec![vec![0.0f64; n_tones]; n_symbols];
    let mut all = Vec::with_capacity(n_symbols * n_tones);
    for (i, row) in energies.iter_mut().enumerate() {
        for (t, slot) in row.iter_mut().enumerate() {
            let e = goertzel_energy(samples, tone_freq(i, t));
            *slot = e;
            all.push(e);
        }
    }
    all.sort_by(|a, b| a.total_cmp(b));
    let median = all[all.len() / 2].max(1e-15);

    let (best_sym, best_score) = energies
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let score: f64 = row.iter().map(|&e| (e + 1e-15).ln()).sum();
            (i, score)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty alphabet");

    // All tones of the winning symbol must clearly stand out over the
    // probe noise floor; otherwise the frame is ambiguous.
    let present = energies[best_sym]
        .iter()
        .all(|&e| e > PRESENCE_FACTOR * median);
    let _ = best_score;
    if present {
        ALPHABET[best_sym]
    } else {
        UNK_SYMBOL
    }
}

/// Exact inverse transcription of toyset audio: energy-gated
/// segmentation, per-segment narrowband classification, and adaptive
/// word-gap detection. Clean [`render`] output decodes to its original
/// text; digital silence decodes to the empty string; undecodable
/// segments become [`UNK_SYMBOL`].
///
/// # Errors
///
/// [`CoreError::Contract`] when the sample rate is not 16 kHz.
pub fn invert(spec: &ToySpec, w: &Waveform) -> CoreResult<String> {
    if w.sample_rate != MODEL_SAMPLE_RATE {
        return Err(CoreError::contract(format!(
            "invert requires {MODEL_SAMPLE_RATE} Hz input, got {} Hz",
            w.sample_rate
        )));
    }
    let segments = segment_activity(&w.samples);
    if segments.is_empty() {
        return Ok(String::new());
    }

    // Median tone duration calibrates the gap classifier (and implicitly
    // the speaking rate: tone duration = 0.16 / rate seconds).
    let mut durations: Vec<usize> = segments.iter().map(|s| s.end - s.start).collect();
    durations.sort_unstable();
    let median_tone = durations[durations.len() / 2] as f64;
    let word_gap = WORD_GAP_FACTOR * median_tone;

    let mut text = String::new();
    for (idx, seg) in segments.iter().enumerate() {
        if idx > 0 {
            let gap = seg.start.saturating_sub(segments[idx - 1].end) as f64;
            if gap > word_gap {
                text.push(' ');
            }
        }
        text.push(classify_segment(spec, &w.samples[seg.start..seg.end]));
    }
    Ok(text)
}

/// Estimated speaking rate of toyset audio in slots/sec units matching
/// [`render`]'s `rate` parameter: derived from the median tone duration.
/// Returns `None` when no tone segments are found.
pub fn estimate_rate(w: &Waveform) -> Option<f64> {
    let segments = segment_activity(&w.samples);
    if segments.is_empty() {
        return None;
    }
    let mut durations: Vec<usize> = segments.iter().map(|s| s.end - s.start).collect();
    durations.sort_unstable();
    let median = durations[durations.len() / 2] as f64 / MODEL_SAMPLE_RATE as f64;
    Some(0.2 * TONE_FRACTION / median)
}

// --- Corpus generation --------------------------------------------------------

/// Generated corpus: manifest records plus the text/speaker/rate behind
/// each one (the manifest itself carries only the standard fields).
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    /// Manifest records, in generation order; audio files exist on disk.
    pub utterances: Vec<Utterance>,
    /// Rendering rate of each utterance.
    pub rates: Vec<f64>,
    /// Speaker index of each utterance.
    pub speaker_indices: Vec<usize>,
}

/// Samples a random toyset text: `words` words of 2–4 symbols, single
/// spaces, at least 6 slots total (so every utterance is long enough for
/// speaker embedding at moderate rates).
pub fn sample_text(spec: &ToySpec, rng: &mut ChaCha8Rng) -> String {
    loop {
        let n_words = rng.gen_range(2..=3);
        let words: Vec<String> = (0..n_words)
            .map(|_| {
                let len = rng.gen_range(2..=4);
                (0..len)
                    .map(|_| ALPHABET[rng.gen_range(0..spec.alphabet_size)])
                    .collect()
            })
            .collect();
        let text = words.join(" ");
        if text.chars().count() >= 6 {
            return text;
        }
    }
}

/// Renders `n` random utterances into `out_dir` (WAV files plus
/// `manifest.jsonl`), alternating speakers, rates uniform over the spec's
/// range. Deterministic for a fixed seed.
pub fn make_corpus(
    spec: &ToySpec,
    out_dir: &Path,
    n: usize,
    seed: u64,
) -> CoreResult<ToyCorpus> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    let mut speaker_indices = Vec::with_capacity(n);
    for i in 0..n {
        let text = sample_text(spec, &mut rng);
        let (lo, hi) = spec.rate_range;
        let rate = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let speaker_idx = i % spec.speakers.len();
        let audio = render(spec, &text, speaker_idx, rate)?;
        let filename = format!("toy_{i:04}.wav");
        let path = out_dir.join(&filename);
        write_wav(&path, &audio)?;
        utterances.push(Utterance {
            audio_path: path,
            transcript: text,
            speaker_id: spec.speakers[speaker_idx].id.clone(),
            domain: spec.speakers[speaker_idx].domain,
            duration_sec: audio.duration_sec(),
        });
        rates.push(rate);
        speaker_indices.push(speaker_idx);
    }
    save_manifest(&out_dir.join("manifest.jsonl"), &utterances)?;
    Ok(ToyCorpus {
        utterances,
        rates,
        speaker_indices,
    })
}
