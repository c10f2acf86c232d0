//! Semantic-token text-to-speech pipeline with a stability-evaluation harness.
//!
//! The system synthesizes speech in three cascaded stages:
//!
//! 1. a **quantizer** ([`quantizer`]) that k-means-clusters frame-level
//!    audio features ([`features`]) into a discrete acoustic token stream,
//! 2. an **autoregressive token language model** ([`lm`]) that maps a text
//!    token sequence ([`text_tok`]) plus an optional acoustic prompt to a
//!    generated acoustic token sequence, and
//! 3. a **unit vocoder** ([`vocoder`]) that renders acoustic tokens back to
//!    a waveform, conditioned on a speaker vector ([`speaker`]) and a binary
//!    language-domain embedding.
//!
//! [`pipeline`] wires the stages together and adds best-of-k candidate
//! selection: k seeded samples are drawn, each is transcribed by a pluggable
//! ASR oracle, and the candidate with the lowest word error rate wins.
//! [`metrics`] holds the objective evaluation toolkit (edit distance,
//! WER/CER, speaker cosine similarity, speaking-rate statistics, Pearson
//! correlation), and [`toyset`] provides a fully synthetic, exactly
//! invertible corpus so the whole cascade can be trained and scored
//! end-to-end without any pretrained models.
//!
//! Tensor math (the LM and the vocoder) runs on CPU via `candle`; the
//! signal-processing front end ([`data`], [`features`], [`toyset`]) is
//! plain `ndarray`/`rustfft`. All entry points are deterministic for a
//! fixed seed.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod features;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod quantizer;
pub mod speaker;
pub mod text_tok;
pub mod toyset;
pub mod vocoder;

pub use error::{CoreError, CoreResult};

/// Project-wide acoustic frame rate in Hz: the number of discrete tokens
/// produced per second of 16 kHz audio. Ties token-sequence length to
/// duration everywhere (feature extraction hop, vocoder upsampling, prompt
/// cropping).
pub const FRAME_RATE_HZ: usize = 50;

/// Canonical model sample rate. Audio is resampled here before feature
/// extraction, and the vocoder emits audio at this rate.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

/// Samples per acoustic token frame at the canonical rate:
/// `MODEL_SAMPLE_RATE / FRAME_RATE_HZ`. The vocoder's total upsampling
/// factor must equal this.
pub const SAMPLES_PER_FRAME: usize = MODEL_SAMPLE_RATE as usize / FRAME_RATE_HZ;

/// A discrete token sequence with its vocabulary size attached, so that
/// out-of-range ids are detectable at module boundaries. Used for acoustic
/// tokens, text tokens, and generated sequences alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Token ids, each `< vocab_size`.
    pub ids: Vec<u32>,
    /// Exclusive upper bound on ids in this sequence.
    pub vocab_size: u32,
}

impl TokenSequence {
    /// Builds a sequence, validating every id against `vocab_size`.
    pub fn new(ids: Vec<u32>, vocab_size: u32) -> CoreResult<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(CoreError::contract(format!(
                "token id {bad} out of range for vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True when the sequence holds no tokens.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_sequence_rejects_out_of_range_ids() {
        let err = TokenSequence::new(vec![0, 5], 5).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn token_sequence_accepts_boundary_ids() {
        let seq = TokenSequence::new(vec![0, 4], 5).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(!seq.is_empty());
    }

    #[test]
    fn frame_constants_are_consistent() {
        assert_eq!(SAMPLES_PER_FRAME * FRAME_RATE_HZ, MODEL_SAMPLE_RATE as usize);
        assert_eq!(SAMPLES_PER_FRAME, 320);
    }
}
