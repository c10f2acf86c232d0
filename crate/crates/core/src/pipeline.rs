//! End-to-end synthesis cascade and the best-of-k stability wrapper.
//!
//! A request carries a text condition, an audio prompt (whose first `d_p`
//! seconds are tokenized into the acoustic prefix), and a speaker
//! reference. Synthesis runs prompt tokenization → autoregressive token
//! generation → vocoding; the waveform covers the prompt tokens plus the
//! generated continuation, so a transcript of the output is comparable to
//! the full input text.
//!
//! `best_of_k` re-runs synthesis with seeds `seed+0 .. seed+k-1`, scores
//! each candidate's transcript (from a pluggable [`AsrOracle`]) by word
//! error rate against the request text, and returns the lowest-WER
//! candidate (ties break toward the lowest index). A candidate whose
//! transcription fails is kept, scored at the worst-case WER of 1, and
//! flagged in the report rather than aborting the run.

use std::process::Command;

use serde::Serialize;

use crate::data::{crop_prompt, resample, Domain, Waveform};
use crate::error::{CoreError, CoreResult};
use crate::features::extract_features;
use crate::lm::{generate, LMParams};
use crate::metrics::{error_rate, ErrorUnit};
use crate::quantizer::{quantize, Codebook};
use crate::speaker::{embed_speaker, SpeakerVec};
use crate::text_tok::{encode, TextVocab};
use crate::toyset::{invert, ToySpec};
use crate::vocoder::{vocoder_forward, VocoderParams};
use crate::{TokenSequence, FRAME_RATE_HZ, MODEL_SAMPLE_RATE};

/// Default prompt length in seconds.
pub const DEFAULT_PROMPT_SEC: f64 = 3.0;

/// One synthesis job: what to say, what to continue from, and who should
/// say it.
#[derive(Debug, Clone)]
pub struct SynthesisRequest {
    /// Text condition `c`.
    pub text: String,
    /// Audio prompt `x_r`; its first `d_p` seconds become the acoustic
    /// prefix.
    pub prompt_audio: Waveform,
    /// Speaker reference `x_s` (embedded, never tokenized).
    pub speaker_audio: Waveform,
    /// Nucleus sampling mass.
    pub top_p: f64,
    /// Sampling seed; candidate `i` of best-of-k uses `seed + i`.
    pub seed: u64,
    /// Number of candidates for best-of-k selection.
    pub k: usize,
    /// Prompt length in seconds; must not exceed the prompt audio.
    pub d_p: f64,
    /// Domain flag forwarded to the vocoder.
    pub domain: Domain,
}

impl SynthesisRequest {
    /// A request with the default sampling settings (`top_p` 0.9, one
    /// candidate, 3 s prompt, Hebrew domain).
    pub fn new(text: impl Into<String>, prompt_audio: Waveform, speaker_audio: Waveform) -> Self {
        SynthesisRequest {
            text: text.into(),
            prompt_audio,
            speaker_audio,
            top_p: 0.9,
            seed: 0,
            k: 1,
            d_p: DEFAULT_PROMPT_SEC,
            domain: Domain::Heb,
        }
    }

    fn validate(&self) -> CoreResult<()> {
        if self.text.trim().is_empty() {
            return Err(CoreError::contract("empty text condition"));
        }
        if self.k == 0 {
            return Err(CoreError::contract("candidate count k must be >= 1"));
        }
        if self.d_p <= 0.0 || self.d_p > self.prompt_audio.duration_sec() {
            return Err(CoreError::contract(format!(
                "prompt length {}s must lie in (0, {:.3}s] (the prompt audio's duration)",
                self.d_p,
                self.prompt_audio.duration_sec()
            )));
        }
        Ok(())
    }
}

/// The loaded model stack the cascade runs on.
#[derive(Debug)]
pub struct SynthesisModels {
    pub quantizer: Codebook,
    pub text_vocab: TextVocab,
    pub lm: LMParams,
    pub vocoder: VocoderParams,
}

impl SynthesisModels {
    /// Checks that the three models agree on vocabulary sizes and that
    /// the vocoder accepts the speaker embedder's output width.
    ///
    /// # Errors
    ///
    /// [`CoreError::Contract`] naming the first mismatch.
    pub fn validate(&self) -> CoreResult<()> {
        let k = self.quantizer.k();
        if self.lm.config().acoustic_vocab != k {
            return Err(CoreError::contract(format!(
                "language model expects {} acoustic tokens but the quantizer produces {k}",
                self.lm.config().acoustic_vocab
            )));
        }
        if self.vocoder.config.token_vocab as usize != k {
            return Err(CoreError::contract(format!(
                "vocoder expects {} acoustic tokens but the quantizer produces {k}",
                self.vocoder.config.token_vocab
            )));
        }
        if self.lm.config().text_vocab != self.text_vocab.size() {
            return Err(CoreError::contract(format!(
                "language model expects {} text tokens but the vocabulary holds {}",
                self.lm.config().text_vocab,
                self.text_vocab.size()
            )));
        }
        if self.vocoder.config.speaker_dim != crate::speaker::SPEAKER_DIM {
            return Err(CoreError::contract(format!(
                "vocoder speaker width {} differs from the embedder's {}",
                self.vocoder.config.speaker_dim,
                crate::speaker::SPEAKER_DIM
            )));
        }
        Ok(())
    }
}

/// Everything one synthesis run produced, for callers that need more
/// than the audio.
#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    /// The synthesized waveform (16 kHz).
    pub audio: Waveform,
    /// Acoustic tokens behind the audio: prompt prefix plus generated
    /// continuation.
    pub tokens: TokenSequence,
    /// How many of `tokens` came from the prompt.
    pub prompt_len: usize,
    /// The conditioning speaker vector.
    pub speaker: SpeakerVec,
    /// True when generation hit its length budget before emitting EOS.
    pub truncated: bool,
}

impl SynthesisOutput {
    /// Output duration implied by the token count (tokens / frame rate).
    pub fn duration_sec(&self) -> f64 {
        self.tokens.len() as f64 / FRAME_RATE_HZ as f64
    }
}

/// Brings a waveform to the model sample rate if it is not there already.
fn at_model_rate(w: &Waveform) -> CoreResult<Waveform> {
    if w.sample_rate == MODEL_SAMPLE_RATE {
        Ok(w.clone())
    } else {
        resample(w, MODEL_SAMPLE_RATE)
    }
}

/// Runs the full cascade and keeps every intermediate worth inspecting.
/// The acoustic tokens fed to the vocoder are the prompt's tokens
/// followed by the generated continuation, so the output speaks the
/// whole text rather than only its tail.
///
/// # Errors
///
/// Component errors propagate labeled with their stage; an inconsistent
/// model stack or invalid request is a [`CoreError::Contract`].
pub fn synthesize_detailed(
    req: &SynthesisRequest,
    models: &SynthesisModels,
) -> CoreResult<SynthesisOutput> {
    req.validate()?;
    models.validate()?;

    // Prompt → acoustic prefix.
    let prompt = at_model_rate(&req.prompt_audio).map_err(|e| e.in_stage("prompt"))?;
    let prompt = crop_prompt(&prompt, req.d_p).map_err(|e| e.in_stage("prompt"))?;
    let feats = extract_features(&prompt).map_err(|e| e.in_stage("prompt"))?;
    let z_prompt = quantize(&feats, &models.quantizer).map_err(|e| e.in_stage("prompt"))?;

    // Text → token ids.
    let z_txt = encode(&req.text, &models.text_vocab);

    // Autoregressive continuation. The budget is whatever fits in the
    // model's position range after the text, separator, and prompt.
    let cfg = models.lm.config();
    let used = z_txt.len() + 1 + z_prompt.len();
    let budget = cfg.max_positions.saturating_sub(used);
    if budget == 0 {
        return Err(CoreError::contract(format!(
            "prompt and text occupy all {} positions; nothing left to generate",
            cfg.max_positions
        ))
        .in_stage("generation"));
    }
    let gen = generate(&models.lm, &z_txt, &z_prompt, req.top_p, req.seed, budget)
        .map_err(|e| e.in_stage("generation"))?;

    // Speaker reference → conditioning vector.
    let spk_audio = at_model_rate(&req.speaker_audio).map_err(|e| e.in_stage("speaker"))?;
    let speaker = embed_speaker(&spk_audio).map_err(|e| e.in_stage("speaker"))?;

    // Tokens → waveform.
    let mut ids = z_prompt.ids.clone();
    ids.extend_from_slice(&gen.tokens.ids);
    let tokens = TokenSequence::new(ids, models.quantizer.k() as u32)?;
    let audio = vocoder_forward(&models.vocoder, &tokens, &speaker, req.domain)
        .map_err(|e| e.in_stage("vocoder"))?;

    Ok(SynthesisOutput {
        audio,
        prompt_len: z_prompt.len(),
        tokens,
        speaker,
        truncated: gen.truncated,
    })
}

/// Runs the cascade once and returns the waveform: text and prompt in,
/// speech out. Deterministic given the request (including its seed).
///
/// # Errors
///
/// As [`synthesize_detailed`].
pub fn synthesize(req: &SynthesisRequest, models: &SynthesisModels) -> CoreResult<Waveform> {
    Ok(synthesize_detailed(req, models)?.audio)
}

/// Anything that can turn audio into text for scoring candidates.
/// Implementations must be deterministic for a fixed configuration.
pub trait AsrOracle {
    /// Transcribes a waveform; the result is compared against the
    /// request text after normalization.
    fn transcribe(&self, w: &Waveform) -> CoreResult<String>;
}

/// Scores toy-corpus audio by inverting its deterministic construction:
/// exact on clean renders, noise-tolerant within the documented SNR
/// bound. This stands in for a real speech recognizer at desk scale.
#[derive(Debug, Clone, Default)]
pub struct ToysetOracle {
    pub spec: ToySpec,
}

impl AsrOracle for ToysetOracle {
    fn transcribe(&self, w: &Waveform) -> CoreResult<String> {
        invert(&self.spec, w)
    }
}

/// Adapter for an external recognizer: writes the candidate to a
/// temporary WAV file, invokes `program args... <wav-path>`, and reads
/// the transcript from standard output.
#[derive(Debug, Clone)]
pub struct ExternalAsr {
    /// Executable to invoke.
    pub program: String,
    /// Arguments placed before the WAV path.
    pub args: Vec<String>,
}

impl AsrOracle for ExternalAsr {
    fn transcribe(&self, w: &Waveform) -> CoreResult<String> {
        let dir = tempfile::tempdir()?;
        let wav = dir.path().join("candidate.wav");
        crate::data::write_wav(&wav, w)?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&wav)
            .output()
            .map_err(|e| CoreError::contract(format!("asr command {:?}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(CoreError::contract(format!(
                "asr command {:?} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&output.stdout).trim().to_string())
    }
}

/// One row of the best-of-k report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateReport {
    /// Candidate index (0-based; also the seed offset).
    pub index: usize,
    /// Seed this candidate was sampled with.
    pub seed: u64,
    /// Word error rate of its transcript against the request text.
    pub wer: f64,
    /// True on the returned candidate only.
    pub selected: bool,
    /// True when transcription failed and the WER is the 1.0 fallback.
    pub asr_failed: bool,
}

/// Synthesizes `k` candidates with seeds `seed+0 .. seed+k-1`, scores
/// each transcript by WER against the request text, and returns the
/// best candidate with the full per-candidate report (ordered by index;
/// exactly one row is marked selected, ties broken toward the lowest
/// index). With `k = 1` the audio is identical to [`synthesize`].
///
/// # Errors
///
/// Synthesis errors abort; transcription errors do not (the candidate
/// scores 1.0 and is flagged).
pub fn best_of_k(
    req: &SynthesisRequest,
    models: &SynthesisModels,
    asr: &dyn AsrOracle,
) -> CoreResult<(Waveform, Vec<CandidateReport>)> {
    req.validate()?;
    let mut reports = Vec::with_capacity(req.k);
    let mut best: Option<(f64, usize, Waveform)> = None;
    for i in 0..req.k {
        let candidate_req = SynthesisRequest {
            seed: req.seed.wrapping_add(i as u64),
            ..req.clone()
        };
        let out = synthesize_detailed(&candidate_req, models)?;
        let (wer, asr_failed) = match asr.transcribe(&out.audio) {
            Ok(hyp) => (error_rate(&req.text, &hyp, ErrorUnit::Word)?, false),
            Err(e) => {
                log::warn!("candidate {i}: transcription failed ({e}); scoring WER 1.0");
                (1.0, true)
            }
        };
        reports.push(CandidateReport {
            index: i,
            seed: candidate_req.seed,
            wer,
            selected: false,
            asr_failed,
        });
        let better = match &best {
            Some((best_wer, _, _)) => wer < *best_wer,
            None => true,
        };
        if better {
            best = Some((wer, i, out.audio));
        }
    }
    let (_, chosen, audio) = best.expect("k >= 1 guarantees a candidate");
    reports[chosen].selected = true;
    Ok((audio, reports))
}

/// Serializes a candidate report as JSON lines (one candidate per line).
pub fn report_jsonl(reports: &[CandidateReport]) -> CoreResult<String> {
    let mut out = String::new();
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::format(format!("report serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}
