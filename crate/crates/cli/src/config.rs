//! Run configuration: one nested structure covering every stage's knobs.
//!
//! A run is reproducible from `(config, seed)` alone, so the resolved
//! configuration is hashed (SHA-256 over its canonical TOML form) and the
//! hash is embedded in evaluation reports. Resolution order, lowest to
//! highest precedence:
//!
//! 1. the named preset (`desk` by default, `paper` for full-scale runs),
//! 2. a TOML file given via `--config` (partial: any subset of keys),
//! 3. command-line flags (`--seed`, `--workers`, and per-command flags).
//!
//! Unknown keys anywhere in the file are rejected rather than ignored, so
//! a typo cannot silently fall back to a default.

use std::fmt;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semtts_core::data::Domain;
use semtts_core::lm::{LMConfig, LmTrainOptions};
use semtts_core::metrics::Pooling;
use semtts_core::optim::LrSchedule;
use semtts_core::vocoder::{VocoderConfig, VocoderTrainOptions};

/// A configuration problem: bad file, bad key, bad value. Always maps to
/// exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(message: impl Into<String>) -> ConfigError {
    ConfigError(message.into())
}

/// Named starting points for the resolution chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-scale settings: 2000-centroid quantizer, 12-layer/16-head
    /// language model, 512-channel vocoder. Sized for a GPU cluster, not
    /// for this machine; useful as the reference hyperparameter set.
    Paper,
    /// Scaled-down settings that train in minutes on a CPU. The default.
    Desk,
}

/// Language domain selector as spelled in config files and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DomainName {
    /// Hebrew domain flag (bit 0).
    Heb,
    /// English domain flag (bit 1).
    En,
}

impl DomainName {
    pub fn to_domain(self) -> Domain {
        match self {
            DomainName::Heb => Domain::Heb,
            DomainName::En => Domain::En,
        }
    }
}

/// Pooling selector as spelled in config files and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PoolingName {
    /// Average per-utterance rates (each utterance counts once).
    Macro,
    /// Pool error counts over the corpus before dividing.
    Micro,
}

impl PoolingName {
    pub fn to_pooling(self) -> Pooling {
        match self {
            PoolingName::Macro => Pooling::Macro,
            PoolingName::Micro => Pooling::Micro,
        }
    }
}

// --- Sections -------------------------------------------------------------

/// K-means quantizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSection {
    /// Number of centroids (the acoustic token vocabulary).
    pub k: usize,
    /// Cap on pooled training frames; corpora above it are subsampled by
    /// a deterministic stride.
    pub max_frames: usize,
}

/// Text tokenizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSection {
    /// Total text vocabulary size (specials + bytes + merges).
    pub vocab_size: usize,
}

/// Token language model: architecture and training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    /// Maximum combined sequence length (text + separator + acoustic).
    pub max_positions: usize,
    /// Optimizer steps for `train-lm` (flag-overridable).
    pub steps: usize,
    pub base_lr: f64,
    /// Linear warmup length of the inverse-square-root schedule.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Stop once the per-target loss drops below this; 0 disables.
    pub early_stop_loss: f64,
}

/// Unit vocoder: generator/discriminator shape and GAN loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderSection {
    pub token_embed_dim: usize,
    pub domain_embed_dim: usize,
    pub base_channels: usize,
    /// Per-stage upsampling factors; their product must equal the 320
    /// samples per token.
    pub upsample_factors: Vec<usize>,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<usize>,
    pub mpd_periods: Vec<usize>,
    pub msd_scales: Vec<usize>,
    pub lambda_feat_match: f64,
    pub lambda_mel: f64,
    /// Optimizer steps for `train-vocoder` (flag-overridable).
    pub steps: usize,
    pub batch_size: usize,
    /// Random-crop length in tokens; 0 trains on full utterances (which
    /// must then all share one length).
    pub crop_frames: usize,
    pub base_lr: f64,
    /// Per-epoch exponential learning-rate decay.
    pub lr_gamma: f64,
}

/// Inference-time defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    /// Nucleus sampling threshold.
    pub top_p: f64,
    /// Candidates per request; the lowest-error transcription wins when
    /// more than one is drawn.
    pub k: usize,
    /// Seconds of the reference clip used as the acoustic prompt.
    pub prompt_sec: f64,
    /// Domain flag passed to the vocoder.
    pub domain: DomainName,
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// How per-utterance errors are pooled into the summary.
    pub pooling: PoolingName,
    /// Number of equally spaced prompt-rate bins for rate correlation.
    pub bins: usize,
    /// Maximum records kept per rate bin.
    pub bin_cap: usize,
    /// Candidates per utterance (1 = single-sample paradigm).
    pub best_of: usize,
}

/// The complete resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master RNG seed; every stage derives from it.
    pub seed: u64,
    /// Worker threads for data-parallel sections; 0 = all cores.
    pub workers: usize,
    pub quantizer: QuantizerSection,
    pub text: TextSection,
    pub lm: LmSection,
    pub vocoder: VocoderSection,
    pub synthesis: SynthesisSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    /// Desk-scale defaults: everything trains in minutes on a CPU.
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            quantizer: QuantizerSection {
                k: 64,
                max_frames: 200_000,
            },
            text: TextSection { vocab_size: 64 },
            lm: LmSection {
                layers: 4,
                heads: 4,
                embed_dim: 256,
                ffn_dim: 1024,
                max_positions: 2048,
                steps: 2000,
                base_lr: 1e-3,
                warmup_steps: 50,
                max_grad_norm: 1.0,
                early_stop_loss: 0.0,
            },
            vocoder: VocoderSection {
                token_embed_dim: 128,
                domain_embed_dim: 16,
                base_channels: 128,
                upsample_factors: vec![8, 5, 4, 2],
                resblock_kernels: vec![3, 7],
                resblock_dilations: vec![1, 3],
                mpd_periods: vec![2, 3, 5, 7, 11],
                msd_scales: vec![1, 2, 4],
                lambda_feat_match: 2.0,
                lambda_mel: 45.0,
                steps: 500,
                batch_size: 16,
                crop_frames: 24,
                base_lr: 2e-4,
                lr_gamma: 0.999,
            },
            synthesis: SynthesisSection {
                top_p: 0.9,
                k: 1,
                prompt_sec: 3.0,
                domain: DomainName::Heb,
            },
            evaluate: EvaluateSection {
                pooling: PoolingName::Macro,
                bins: 70,
                bin_cap: 10,
                best_of: 3,
            },
        }
    }

    /// Full-scale defaults: the reference hyperparameter set (2000
    /// acoustic tokens, 12-layer/16-head LM, 512-channel vocoder).
    pub fn paper() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.quantizer = QuantizerSection {
            k: 2000,
            max_frames: 2_000_000,
        };
        cfg.text = TextSection { vocab_size: 256 };
        cfg.lm = LmSection {
            layers: 12,
            heads: 16,
            embed_dim: 1024,
            ffn_dim: 4096,
            max_positions: 2048,
            steps: 500_000,
            base_lr: 5e-4,
            warmup_steps: 5000,
            max_grad_norm: 1.0,
            early_stop_loss: 0.0,
        };
        cfg.vocoder = VocoderSection {
            token_embed_dim: 512,
            domain_embed_dim: 32,
            base_channels: 512,
            upsample_factors: vec![8, 5, 4, 2],
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![1, 3, 5],
            mpd_periods: vec![2, 3, 5, 7, 11],
            msd_scales: vec![1, 2, 4],
            lambda_feat_match: 2.0,
            lambda_mel: 45.0,
            steps: 500_000,
            batch_size: 16,
            crop_frames: 32,
            base_lr: 2e-4,
            lr_gamma: 0.999,
        };
        cfg
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig::paper(),
            Preset::Desk => RunConfig::desk(),
        }
    }

    /// Resolves preset + optional file (flags are applied by the caller).
    pub fn load(preset: Preset, file: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::preset(preset);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
            let patch: RunConfigPatch = toml::from_str(&text)
                .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
            patch.apply(&mut cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sanity checks beyond what types enforce. Deep validation (e.g.
    /// upsampling product, head divisibility) happens when the stage
    /// configs are built.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.quantizer.k < 2 {
            return Err(cfg_err("quantizer.k must be at least 2"));
        }
        if self.quantizer.max_frames == 0 {
            return Err(cfg_err("quantizer.max_frames must be positive"));
        }
        if self.text.vocab_size < 3 {
            return Err(cfg_err("text.vocab_size must be at least 3"));
        }
        if !(0.0..=1.0).contains(&self.synthesis.top_p) || self.synthesis.top_p == 0.0 {
            return Err(cfg_err("synthesis.top_p must be in (0, 1]"));
        }
        if self.synthesis.k == 0 {
            return Err(cfg_err("synthesis.k must be at least 1"));
        }
        if self.synthesis.prompt_sec <= 0.0 {
            return Err(cfg_err("synthesis.prompt_sec must be positive"));
        }
        if self.evaluate.best_of == 0 {
            return Err(cfg_err("evaluate.best_of must be at least 1"));
        }
        if self.evaluate.bins == 0 || self.evaluate.bin_cap == 0 {
            return Err(cfg_err("evaluate.bins and evaluate.bin_cap must be positive"));
        }
        if self.lm.steps == 0 || self.vocoder.steps == 0 {
            return Err(cfg_err("lm.steps and vocoder.steps must be positive"));
        }
        if self.vocoder.batch_size == 0 {
            return Err(cfg_err("vocoder.batch_size must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical TOML form; embedded in reports so a
    /// result can be traced back to the exact settings that produced it.
    pub fn sha256_hex(&self) -> String {
        let canonical = toml::to_string(self).expect("RunConfig always serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Language-model architecture for the given vocabulary sizes.
    pub fn lm_config(&self, text_vocab: usize, acoustic_vocab: usize) -> LMConfig {
        let mut c = LMConfig::desk(text_vocab, acoustic_vocab);
        c.layers = self.lm.layers;
        c.heads = self.lm.heads;
        c.embed_dim = self.lm.embed_dim;
        c.ffn_dim = self.lm.ffn_dim;
        c.max_positions = self.lm.max_positions;
        c.top_p_default = self.synthesis.top_p;
        c
    }

    pub fn lm_train_options(&self) -> LmTrainOptions {
        LmTrainOptions {
            steps: self.lm.steps,
            base_lr: self.lm.base_lr,
            schedule: LrSchedule::WarmupInvSqrt {
                warmup_steps: self.lm.warmup_steps,
            },
            max_grad_norm: (self.lm.max_grad_norm > 0.0).then_some(self.lm.max_grad_norm),
            early_stop_loss: (self.lm.early_stop_loss > 0.0).then_some(self.lm.early_stop_loss),
        }
    }

    /// Vocoder architecture for the given acoustic vocabulary.
    pub fn vocoder_config(&self, token_vocab: u32) -> VocoderConfig {
        let mut c = VocoderConfig::desk(token_vocab);
        c.token_embed_dim = self.vocoder.token_embed_dim;
        c.domain_embed_dim = self.vocoder.domain_embed_dim;
        c.base_channels = self.vocoder.base_channels;
        c.upsample_factors = self.vocoder.upsample_factors.clone();
        c.resblock_kernels = self.vocoder.resblock_kernels.clone();
        c.resblock_dilations = self.vocoder.resblock_dilations.clone();
        c.mpd_periods = self.vocoder.mpd_periods.clone();
        c.msd_scales = self.vocoder.msd_scales.clone();
        c.lambda_feat_match = self.vocoder.lambda_feat_match;
        c.lambda_mel = self.vocoder.lambda_mel;
        c
    }

    pub fn vocoder_train_options(&self) -> VocoderTrainOptions {
        VocoderTrainOptions {
            steps: self.vocoder.steps,
            batch_size: self.vocoder.batch_size,
            crop_frames: (self.vocoder.crop_frames > 0).then_some(self.vocoder.crop_frames),
            base_lr: self.vocoder.base_lr,
            lr_gamma: self.vocoder.lr_gamma,
            steps_per_epoch: None,
            seed: self.seed,
        }
    }
}

// --- File overlay ----------------------------------------------------------

/// Partial mirror of [`RunConfig`]: every field optional, unknown keys
/// rejected. A config file sets any subset; the rest stays at the preset.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigPatch {
    seed: Option<u64>,
    workers: Option<usize>,
    quantizer: Option<QuantizerPatch>,
    text: Option<TextPatch>,
    lm: Option<LmPatch>,
    vocoder: Option<VocoderPatch>,
    synthesis: Option<SynthesisPatch>,
    evaluate: Option<EvaluatePatch>,
}

macro_rules! apply_fields {
    ($patch:expr, $target:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $patch.$field {
            $target.$field = v;
        })+
    };
}

impl RunConfigPatch {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(p) = self.quantizer {
            apply_fields!(p, cfg.quantizer, k, max_frames);
        }
        if let Some(p) = self.text {
            apply_fields!(p, cfg.text, vocab_size);
        }
        if let Some(p) = self.lm {
            apply_fields!(
                p,
                cfg.lm,
                layers,
                heads,
                embed_dim,
                ffn_dim,
                max_positions,
                steps,
                base_lr,
                warmup_steps,
                max_grad_norm,
                early_stop_loss,
            );
        }
        if let Some(p) = self.vocoder {
            apply_fields!(
                p,
                cfg.vocoder,
                token_embed_dim,
                domain_embed_dim,
                base_channels,
                upsample_factors,
                resblock_kernels,
                resblock_dilations,
                mpd_periods,
                msd_scales,
                lambda_feat_match,
                lambda_mel,
                steps,
                batch_size,
                crop_frames,
                base_lr,
                lr_gamma,
            );
        }
        if let Some(p) = self.synthesis {
            apply_fields!(p, cfg.synthesis, top_p, k, prompt_sec, domain);
        }
        if let Some(p) = self.evaluate {
            apply_fields!(p, cfg.evaluate, pooling, bins, bin_cap, best_of);
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizerPatch {
    k: Option<usize>,
    max_frames: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextPatch {
    vocab_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LmPatch {
    layers: Option<usize>,
    heads: Option<usize>,
    embed_dim: Option<usize>,
    ffn_dim: Option<usize>,
    max_positions: Option<usize>,
    steps: Option<usize>,
    base_lr: Option<f64>,
    warmup_steps: Option<usize>,
    max_grad_norm: Option<f64>,
    early_stop_loss: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocoderPatch {
    token_embed_dim: Option<usize>,
    domain_embed_dim: Option<usize>,
    base_channels: Option<usize>,
    upsample_factors: Option<Vec<usize>>,
    resblock_kernels: Option<Vec<usize>>,
    resblock_dilations: Option<Vec<usize>>,
    mpd_periods: Option<Vec<usize>>,
    msd_scales: Option<Vec<usize>>,
    lambda_feat_match: Option<f64>,
    lambda_mel: Option<f64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    crop_frames: Option<usize>,
    base_lr: Option<f64>,
    lr_gamma: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthesisPatch {
    top_p: Option<f64>,
    k: Option<usize>,
    prompt_sec: Option<f64>,
    domain: Option<DomainName>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluatePatch {
    pooling: Option<PoolingName>,
    bins: Option<usize>,
    bin_cap: Option<usize>,
    best_of: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn desk_preset_validates_and_hash_is_stable() {
        let a = RunConfig::desk();
        a.validate().unwrap();
        let b = RunConfig::desk();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        assert_eq!(a.sha256_hex().len(), 64);
    }

    #[test]
    fn paper_preset_carries_full_scale_values() {
        let cfg = RunConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(cfg.quantizer.k, 2000);
        assert_eq!(cfg.lm.layers, 12);
        assert_eq!(cfg.lm.heads, 16);
        assert_eq!(cfg.lm.embed_dim, 1024);
        assert_eq!(cfg.vocoder.base_channels, 512);
        assert_ne!(cfg.sha256_hex(), RunConfig::desk().sha256_hex());
    }

    #[test]
    fn file_overrides_preset_and_leaves_the_rest() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "seed = 7\n[quantizer]\nk = 12\n[lm]\nsteps = 3").unwrap();
        let cfg = RunConfig::load(Preset::Desk, Some(f.path())).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.quantizer.k, 12);
        assert_eq!(cfg.lm.steps, 3);
        // Untouched keys keep the preset values.
        let desk = RunConfig::desk();
        assert_eq!(cfg.lm.layers, desk.lm.layers);
        assert_eq!(cfg.vocoder, desk.vocoder);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[quantizer]\nnum_clusters = 8").unwrap();
        let err = RunConfig::load(Preset::Desk, Some(f.path())).unwrap_err();
        assert!(err.to_string().contains("num_clusters"), "{err}");

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "[mystery]\nx = 1").unwrap();
        assert!(RunConfig::load(Preset::Desk, Some(g.path())).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[synthesis]\ntop_p = 1.5").unwrap();
        assert!(RunConfig::load(Preset::Desk, Some(f.path())).is_err());
    }

    #[test]
    fn stage_config_mapping_matches_sections() {
        let cfg = RunConfig::desk();
        let lm = cfg.lm_config(64, 64);
        assert_eq!(lm.layers, cfg.lm.layers);
        assert_eq!(lm.text_vocab, 64);
        assert_eq!(lm.acoustic_vocab, 64);
        lm.validate().unwrap();

        let voc = cfg.vocoder_config(64);
        assert_eq!(voc.token_vocab, 64);
        assert_eq!(voc.base_channels, cfg.vocoder.base_channels);
        voc.validate().unwrap();

        let opts = cfg.lm_train_options();
        assert_eq!(opts.steps, cfg.lm.steps);
        assert_eq!(opts.max_grad_norm, Some(1.0));
        assert_eq!(opts.early_stop_loss, None);

        let vopts = cfg.vocoder_train_options();
        assert_eq!(vopts.crop_frames, Some(24));
    }
}
