//! Unit vocoder: a HiFi-GAN-style generator that maps an acoustic token
//! sequence, a speaker vector, and a binary domain embedding to a 16 kHz
//! waveform, trained adversarially against multi-period and multi-scale
//! discriminators with feature-matching and log-mel reconstruction terms.
//!
//! Layout notes, all forced by what the autodiff backend supports on CPU:
//!
//! * Upsampling stages are nearest-neighbor repetition followed by a
//!   smoothing convolution (kernel `2·factor + 1`) instead of transposed
//!   convolutions, which have no backward pass here. The length
//!   arithmetic is identical: each stage multiplies the frame axis by its
//!   factor, so `|ŷ| = 320·|q|` exactly.
//! * The period-`p` discriminator folds the phase axis into the batch
//!   dimension and runs 1-D convolutions of kernel 5 / stride 3, which is
//!   arithmetically the same as the usual `(5,1)`-kernel 2-D convolution
//!   over a `(T/p, p)` reshape.
//! * The scale discriminators downsample with a fixed (non-trainable)
//!   width-4 average kernel, stride 2, because pooling ops lack a
//!   backward pass when kernel and stride differ.
//! * The mel term is computed in-graph with a fixed Hann-windowed DFT
//!   basis as a strided convolution; it matches
//!   [`features::mel_spectrogram`] to within float tolerance, so training
//!   logs and offline evaluation agree.
//!
//! Generator convolutions are weight-normalized (`W = g·v/‖v‖`, norm per
//! output channel); discriminator convolutions are plain. All activations
//! are leaky ReLU with slope [`LEAKY_SLOPE`] except the final `tanh`.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Domain, Waveform};
use crate::error::{CoreError, CoreResult};
use crate::features::{self, MEL_HOP, MEL_LOG_FLOOR, MEL_N_FFT, MEL_N_MELS};
use crate::optim::{check_finite, randn_vec, Adam, LrSchedule, ParamSet};
use crate::speaker::SpeakerVec;
use crate::{TokenSequence, MODEL_SAMPLE_RATE, SAMPLES_PER_FRAME};

/// Negative-side slope of every leaky ReLU in the vocoder.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Checkpoint kind tag for this model.
pub const VOCODER_KIND: &str = "vocoder";

/// Init std of generator convolution directions.
const GEN_INIT_STD: f64 = 0.01;
/// Low-rate kernel width of the sub-pixel upsampling convolutions; ±1
/// frame of context is what lets adjacent frames keep phase continuity.
const UPSAMPLE_KERNEL: usize = 3;
/// Init std of discriminator convolutions.
const DISC_INIT_STD: f64 = 0.02;
/// Init std of the token/domain embedding tables.
const EMBED_INIT_STD: f64 = 0.02;
/// Added under the square root when turning spectral power into
/// magnitude, so the gradient at silent bins stays finite.
const MEL_EPS: f64 = 1e-12;

/// Sizes and loss weights of the vocoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    /// Acoustic token vocabulary size (`k` of the quantizer).
    pub token_vocab: u32,
    /// Width of the learned token embedding.
    pub token_embed_dim: usize,
    /// Length of the conditioning speaker vector.
    pub speaker_dim: usize,
    /// Width of the binary (two-row) domain embedding.
    pub domain_embed_dim: usize,
    /// Generator channels entering the first upsampling stage; halved at
    /// every stage after that.
    pub base_channels: usize,
    /// Per-stage upsampling factors; their product must equal the
    /// samples-per-token ratio (320 at 16 kHz / 50 Hz).
    pub upsample_factors: Vec<usize>,
    /// Kernel sizes of the multi-receptive-field residual stacks.
    pub resblock_kernels: Vec<usize>,
    /// Dilations applied (one residual convolution each) per kernel.
    pub resblock_dilations: Vec<usize>,
    /// Periods of the period discriminators.
    pub mpd_periods: Vec<usize>,
    /// Downsampling factors of the scale discriminators (powers of two).
    pub msd_scales: Vec<usize>,
    /// Weight of the feature-matching term in the generator loss.
    pub lambda_feat_match: f64,
    /// Weight of the log-mel L1 term in the generator loss.
    pub lambda_mel: f64,
    /// Spacing of the fixed carrier-phasor bank appended to the
    /// conditioning, in Hz; 0 disables the bank.
    #[serde(default = "default_carrier_step_hz")]
    pub carrier_step_hz: f64,
    /// Highest carrier frequency of the bank, in Hz; must stay below
    /// the Nyquist frequency.
    #[serde(default = "default_carrier_max_hz")]
    pub carrier_max_hz: f64,
}

fn default_carrier_step_hz() -> f64 {
    20.0
}

fn default_carrier_max_hz() -> f64 {
    7980.0
}

impl VocoderConfig {
    /// CPU-trainable configuration: narrow generator, standard
    /// discriminator complement.
    pub fn desk(token_vocab: u32) -> Self {
        VocoderConfig {
            token_vocab,
            token_embed_dim: 128,
            speaker_dim: crate::speaker::SPEAKER_DIM,
            domain_embed_dim: 16,
            base_channels: 128,
            upsample_factors: vec![8, 5, 4, 2],
            resblock_kernels: vec![3, 7],
            resblock_dilations: vec![1, 3],
            mpd_periods: vec![2, 3, 5, 7, 11],
            msd_scales: vec![1, 2, 4],
            lambda_feat_match: 2.0,
            lambda_mel: 45.0,
            carrier_step_hz: default_carrier_step_hz(),
            carrier_max_hz: default_carrier_max_hz(),
        }
    }

    /// Full-width configuration matching the published generator sizes.
    pub fn full_scale(token_vocab: u32) -> Self {
        VocoderConfig {
            token_embed_dim: 512,
            base_channels: 512,
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![1, 3, 5],
            domain_embed_dim: 32,
            ..Self::desk(token_vocab)
        }
    }

    /// Checks the structural invariants; every build and load goes
    /// through this.
    ///
    /// # Errors
    ///
    /// [`CoreError::Contract`] with the violated condition.
    pub fn validate(&self) -> CoreResult<()> {
        if self.token_vocab == 0 {
            return Err(CoreError::contract("token_vocab must be positive"));
        }
        for (what, v) in [
            ("token_embed_dim", self.token_embed_dim),
            ("speaker_dim", self.speaker_dim),
            ("domain_embed_dim", self.domain_embed_dim),
            ("base_channels", self.base_channels),
        ] {
            if v == 0 {
                return Err(CoreError::contract(format!("{what} must be positive")));
            }
        }
        let product: usize = self.upsample_factors.iter().product();
        if self.upsample_factors.is_empty() || product != SAMPLES_PER_FRAME {
            return Err(CoreError::contract(format!(
                "upsample factors {:?} multiply to {product}, need {SAMPLES_PER_FRAME}",
                self.upsample_factors
            )));
        }
        if self.upsample_factors.iter().any(|&u| u == 0) {
            return Err(CoreError::contract("zero upsample factor"));
        }
        if self.resblock_kernels.is_empty() || self.resblock_kernels.iter().any(|k| k % 2 == 0) {
            return Err(CoreError::contract(format!(
                "residual kernels {:?} must be a non-empty list of odd sizes",
                self.resblock_kernels
            )));
        }
        if self.resblock_dilations.is_empty() || self.resblock_dilations.contains(&0) {
            return Err(CoreError::contract("residual dilations must be positive"));
        }
        if self.mpd_periods.is_empty() || self.mpd_periods.contains(&0) {
            return Err(CoreError::contract("periods must be positive"));
        }
        if self.msd_scales.is_empty() || self.msd_scales.iter().any(|s| !s.is_power_of_two()) {
            return Err(CoreError::contract(format!(
                "scale factors {:?} must be powers of two",
                self.msd_scales
            )));
        }
        if !(self.lambda_feat_match.is_finite() && self.lambda_feat_match >= 0.0)
            || !(self.lambda_mel.is_finite() && self.lambda_mel >= 0.0)
        {
            return Err(CoreError::contract("loss weights must be finite and >= 0"));
        }
        if !self.carrier_step_hz.is_finite() || self.carrier_step_hz < 0.0 {
            return Err(CoreError::contract("carrier_step_hz must be finite and >= 0"));
        }
        if self.carrier_step_hz > 0.0 {
            if !self.carrier_max_hz.is_finite() || self.carrier_max_hz < self.carrier_step_hz {
                return Err(CoreError::contract(
                    "carrier_max_hz must be finite and >= carrier_step_hz",
                ));
            }
            if self.carrier_max_hz >= f64::from(MODEL_SAMPLE_RATE) / 2.0 {
                return Err(CoreError::contract(format!(
                    "carrier_max_hz {} must stay below the Nyquist frequency {}",
                    self.carrier_max_hz,
                    MODEL_SAMPLE_RATE / 2
                )));
            }
        }
        Ok(())
    }

    /// Number of frequencies in the carrier bank.
    pub fn carrier_count(&self) -> usize {
        if self.carrier_step_hz <= 0.0 {
            0
        } else {
            (self.carrier_max_hz / self.carrier_step_hz).floor() as usize
        }
    }

    /// Per-frame conditioning width: token ⊕ speaker ⊕ domain ⊕ carrier
    /// phasors.
    pub fn input_dim(&self) -> usize {
        self.token_embed_dim + self.speaker_dim + self.domain_embed_dim + 2 * self.carrier_count()
    }

    /// Generator channel counts: entry `i` feeds upsampling stage `i`;
    /// the last entry feeds the output convolution.
    fn gen_channels(&self) -> Vec<usize> {
        (0..=self.upsample_factors.len())
            .map(|i| (self.base_channels >> i).max(1))
            .collect()
    }

    /// Channel plan of one period-discriminator stack.
    fn mpd_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [(b / 8).max(1), (b / 2).max(1), b, b]
    }

    /// Channel plan of one scale-discriminator stack.
    fn msd_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [(b / 8).max(1), (b / 4).max(1), (b / 2).max(1), (b / 2).max(1)]
    }
}

/// Generator and discriminator parameters plus the fixed spectral basis
/// of the in-graph mel loss.
#[derive(Debug)]
pub struct VocoderParams {
    pub config: VocoderConfig,
    /// Trainable generator tensors (names prefixed `gen.`).
    pub gen: ParamSet,
    /// Trainable discriminator tensors (names prefixed `disc.`).
    pub disc: ParamSet,
    pub device: Device,
    /// Hann-windowed DFT basis, `(2·(n_fft/2+1), 1, n_fft)`; constant.
    mel_dft: Tensor,
    /// Mel filterbank, `(n_mels, n_fft/2+1)`; constant.
    mel_bank: Tensor,
}

/// Kernel sizes / strides / paddings of the period-discriminator stack.
const MPD_LAYERS: [(usize, usize, usize); 4] = [(5, 3, 2), (5, 3, 2), (5, 3, 2), (5, 1, 2)];
/// Kernel sizes / strides / paddings of the scale-discriminator stack.
const MSD_LAYERS: [(usize, usize, usize); 4] = [(15, 1, 7), (41, 4, 20), (41, 4, 20), (5, 1, 2)];

/// Registers a weight-normalized convolution: direction `v ~ N(0, σ)`,
/// gain `g = ‖v‖` per output channel (so the initial effective weight is
/// exactly `v`), zero bias.
fn add_wn_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    device: &Device,
) -> CoreResult<()> {
    let v = randn_vec(rng, out_c * in_c * k, GEN_INIT_STD);
    let row = in_c * k;
    let g: Vec<f32> = (0..out_c)
        .map(|o| {
            v[o * row..(o + 1) * row]
                .iter()
                .map(|x| (*x as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32
        })
        .collect();
    params.create(format!("{name}.v"), v, &[out_c, in_c, k], device)?;
    params.create(format!("{name}.g"), g, &[out_c, 1, 1], device)?;
    params.create(format!("{name}.b"), vec![0.0; out_c], &[out_c], device)?;
    Ok(())
}

/// Registers a plain convolution (weight + zero bias).
fn add_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    device: &Device,
) -> CoreResult<()> {
    let w = randn_vec(rng, out_c * in_c * k, DISC_INIT_STD);
    params.create(format!("{name}.w"), w, &[out_c, in_c, k], device)?;
    params.create(format!("{name}.b"), vec![0.0; out_c], &[out_c], device)?;
    Ok(())
}

/// Builds the fixed Hann-windowed DFT basis and mel filterbank used by
/// the in-graph spectral loss.
fn mel_constants(device: &Device) -> CoreResult<(Tensor, Tensor)> {
    let n_bins = MEL_N_FFT / 2 + 1;
    let window = features::hann_window(MEL_N_FFT);
    let mut basis = vec![0.0f32; 2 * n_bins * MEL_N_FFT];
    for k in 0..n_bins {
        for i in 0..MEL_N_FFT {
            let angle = 2.0 * std::f64::consts::PI * (k * i) as f64 / MEL_N_FFT as f64;
            let w = window[i] as f64;
            basis[k * MEL_N_FFT + i] = (w * angle.cos()) as f32;
            basis[(n_bins + k) * MEL_N_FFT + i] = (w * angle.sin()) as f32;
        }
    }
    let dft = Tensor::from_vec(basis, (2 * n_bins, 1, MEL_N_FFT), device)?;
    let bank = features::mel_filterbank(
        MEL_N_FFT,
        MEL_N_MELS,
        MODEL_SAMPLE_RATE,
        MODEL_SAMPLE_RATE as f64 / 2.0,
    );
    let (rows, cols) = bank.dim();
    let bank = Tensor::from_vec(bank.into_raw_vec_and_offset().0, (rows, cols), device)?;
    Ok((dft, bank))
}

/// Builds a vocoder with seeded deterministic initialization.
///
/// # Errors
///
/// [`CoreError::Contract`] when the configuration is invalid.
pub fn build_vocoder(config: &VocoderConfig, seed: u64) -> CoreResult<VocoderParams> {
    config.validate()?;
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = ParamSet::new();
    let mut disc = ParamSet::new();

    // Generator: embeddings, input projection, upsampling stages with
    // multi-receptive-field residual stacks, output projection.
    gen.create(
        "gen.token_embed",
        randn_vec(&mut rng, config.token_vocab as usize * config.token_embed_dim, EMBED_INIT_STD),
        &[config.token_vocab as usize, config.token_embed_dim],
        &device,
    )?;
    gen.create(
        "gen.domain_embed",
        randn_vec(&mut rng, 2 * config.domain_embed_dim, EMBED_INIT_STD),
        &[2, config.domain_embed_dim],
        &device,
    )?;
    let chans = config.gen_channels();
    add_wn_conv(&mut gen, &mut rng, "gen.pre", chans[0], config.input_dim(), 7, &device)?;
    for (i, &u) in config.upsample_factors.iter().enumerate() {
        // Sub-pixel upsampling: the convolution runs at the low rate and
        // emits `u` phase slots per output channel, which are interleaved
        // into time. Unlike nearest-neighbor upsampling followed by a
        // convolution, each intra-frame position has its own weights, so
        // periodic waveforms are representable even from per-frame
        // constant conditioning.
        add_wn_conv(
            &mut gen,
            &mut rng,
            &format!("gen.up{i}"),
            chans[i + 1] * u,
            chans[i],
            UPSAMPLE_KERNEL,
            &device,
        )?;
        for &k in &config.resblock_kernels {
            for &d in &config.resblock_dilations {
                add_wn_conv(
                    &mut gen,
                    &mut rng,
                    &format!("gen.mrf{i}.k{k}.d{d}"),
                    chans[i + 1],
                    chans[i + 1],
                    k,
                    &device,
                )?;
            }
        }
    }
    let last = *chans.last().expect("at least one stage");
    add_wn_conv(&mut gen, &mut rng, "gen.post", 1, last, 7, &device)?;

    // Period discriminators.
    let mpd = config.mpd_channels();
    for &p in &config.mpd_periods {
        let mut in_c = 1;
        for (j, &out_c) in mpd.iter().enumerate() {
            add_conv(&mut disc, &mut rng, &format!("disc.mpd{p}.l{j}"), out_c, in_c, 5, &device)?;
            in_c = out_c;
        }
        add_conv(&mut disc, &mut rng, &format!("disc.mpd{p}.score"), 1, in_c, 3, &device)?;
    }
    // Scale discriminators.
    let msd = config.msd_channels();
    for &s in &config.msd_scales {
        let mut in_c = 1;
        for (j, (&out_c, (k, _, _))) in msd.iter().zip(MSD_LAYERS).enumerate() {
            add_conv(&mut disc, &mut rng, &format!("disc.msd{s}.l{j}"), out_c, in_c, k, &device)?;
            in_c = out_c;
        }
        add_conv(&mut disc, &mut rng, &format!("disc.msd{s}.score"), 1, in_c, 3, &device)?;
    }

    let (mel_dft, mel_bank) = mel_constants(&device)?;
    Ok(VocoderParams {
        config: config.clone(),
        gen,
        disc,
        device,
        mel_dft,
        mel_bank,
    })
}

/// Leaky ReLU via elementwise max (slope [`LEAKY_SLOPE`]).
fn leaky(x: &Tensor) -> CoreResult<Tensor> {
    Ok(x.maximum(&(x * LEAKY_SLOPE)?)?)
}

/// Applies a weight-normalized convolution stored under `name`.
fn wn_conv(
    params: &ParamSet,
    name: &str,
    x: &Tensor,
    pad: usize,
    stride: usize,
    dilation: usize,
) -> CoreResult<Tensor> {
    let v = params.get(&format!("{name}.v"))?.as_tensor().clone();
    let g = params.get(&format!("{name}.g"))?.as_tensor().clone();
    let b = params.get(&format!("{name}.b"))?.as_tensor().clone();
    let norm = v.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.sqrt()?;
    let w = v.broadcast_mul(&g)?.broadcast_div(&norm)?;
    let out_c = w.dim(0)?;
    let y = x.conv1d(&w, pad, stride, dilation, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, out_c, 1))?)?)
}

/// Applies a plain convolution stored under `name`.
fn plain_conv(params: &ParamSet, name: &str, x: &Tensor, pad: usize, stride: usize) -> CoreResult<Tensor> {
    let w = params.get(&format!("{name}.w"))?.as_tensor().clone();
    let b = params.get(&format!("{name}.b"))?.as_tensor().clone();
    let out_c = w.dim(0)?;
    let y = x.conv1d(&w, pad, stride, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, out_c, 1))?)?)
}

/// Runs the generator on a batch of equal-length token sequences,
/// Carrier-phasor conditioning rows: interleaved `cos(2πf·t)`,
/// `sin(2πf·t)` for every bank frequency, sampled at the frame starts
/// of absolute frame indices `offset..offset + frames`, shaped
/// `(2·N, frames)`.
///
/// A convolution stack driven by per-frame conditioning alone maps
/// identical neighboring frames to identical output blocks, so its
/// spectra are confined to multiples of the frame rate; the phasors
/// carry an absolute time reference that makes content between those
/// grid lines representable — a sine at a bank frequency is a fixed
/// per-phase-slot linear map of its phasor pair.
fn carrier_features(
    cfg: &VocoderConfig,
    offset: usize,
    frames: usize,
    device: &Device,
) -> CoreResult<Tensor> {
    let n = cfg.carrier_count();
    let frame_sec = SAMPLES_PER_FRAME as f64 / f64::from(MODEL_SAMPLE_RATE);
    let mut v = vec![0.0f32; 2 * n * frames];
    for j in 0..n {
        let f = cfg.carrier_step_hz * (j + 1) as f64;
        for t in 0..frames {
            // Phase accumulated in f64 and reduced before the cast: in
            // f32 the raw phase of a high carrier far into a stream
            // would be coarser than a radian.
            let phase = (std::f64::consts::TAU * f * ((offset + t) as f64 * frame_sec))
                .rem_euclid(std::f64::consts::TAU);
            v[2 * j * frames + t] = phase.cos() as f32;
            v[(2 * j + 1) * frames + t] = phase.sin() as f32;
        }
    }
    Tensor::from_vec(v, (2 * n, frames), device)
}

/// returning the raw `(B, 1, 320·T)` waveform tensor (graph-connected,
/// for training). `offsets` gives each item's absolute frame index of
/// `tokens[..][0]` within its source stream, the phase reference of the
/// carrier bank; pass zeros for standalone synthesis.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty batch, unequal sequence lengths,
/// a token vocabulary that differs from the configured one, or a speaker
/// vector of the wrong width.
pub fn generator_forward(
    params: &VocoderParams,
    tokens: &[&TokenSequence],
    speakers: &[&SpeakerVec],
    domains: &[Domain],
    offsets: &[usize],
) -> CoreResult<Tensor> {
    let cfg = &params.config;
    let b = tokens.len();
    if b == 0 || speakers.len() != b || domains.len() != b || offsets.len() != b {
        return Err(CoreError::contract(format!(
            "batch arity mismatch: {b} token sequences, {} speakers, {} domains, {} offsets",
            speakers.len(),
            domains.len(),
            offsets.len()
        )));
    }
    let t = tokens[0].len();
    if t == 0 {
        return Err(CoreError::contract("empty token sequence"));
    }
    let mut ids = Vec::with_capacity(b * t);
    for q in tokens {
        if q.len() != t {
            return Err(CoreError::contract(format!(
                "all sequences in a batch must have equal length ({t} != {})",
                q.len()
            )));
        }
        if q.vocab_size != cfg.token_vocab {
            return Err(CoreError::contract(format!(
                "token vocabulary {} does not match the vocoder's {}",
                q.vocab_size, cfg.token_vocab
            )));
        }
        ids.extend_from_slice(&q.ids);
    }
    let mut spk = Vec::with_capacity(b * cfg.speaker_dim);
    for s in speakers {
        if s.values.len() != cfg.speaker_dim {
            return Err(CoreError::contract(format!(
                "speaker vector has {} dims, vocoder expects {}",
                s.values.len(),
                cfg.speaker_dim
            )));
        }
        spk.extend_from_slice(&s.values);
    }
    let dev = &params.device;

    // Per-frame conditioning: token embedding ⊕ speaker ⊕ domain.
    let id_t = Tensor::from_vec(ids, b * t, dev)?;
    let tok = params
        .gen
        .get("gen.token_embed")?
        .as_tensor()
        .index_select(&id_t, 0)?
        .reshape((b, t, cfg.token_embed_dim))?;
    let spk_t = Tensor::from_vec(spk, (b, 1, cfg.speaker_dim), dev)?
        .broadcast_as((b, t, cfg.speaker_dim))?;
    let dom_ids: Vec<u32> = domains.iter().map(|d| d.index() as u32).collect();
    let dom_t = params
        .gen
        .get("gen.domain_embed")?
        .as_tensor()
        .index_select(&Tensor::from_vec(dom_ids, b, dev)?, 0)?
        .reshape((b, 1, cfg.domain_embed_dim))?
        .broadcast_as((b, t, cfg.domain_embed_dim))?;
    let cond = Tensor::cat(&[&tok, &spk_t, &dom_t], 2)?
        .transpose(1, 2)?
        .contiguous()?;

    let mut x = wn_conv(&params.gen, "gen.pre", &cond, 3, 1, 1)?;
    let mut frames = t;
    for (i, &u) in cfg.upsample_factors.iter().enumerate() {
        // Sub-pixel upsample: conv to (B, C·u, T), then interleave the u
        // phase slots into time to get (B, C, T·u).
        let c_out = cfg.gen_channels()[i + 1];
        x = wn_conv(
            &params.gen,
            &format!("gen.up{i}"),
            &leaky(&x)?,
            (UPSAMPLE_KERNEL - 1) / 2,
            1,
            1,
        )?;
        x = x
            .reshape((b, c_out, u, frames))?
            .permute((0, 1, 3, 2))?
            .contiguous()?
            .reshape((b, c_out, frames * u))?;
        frames *= u;
        // Multi-receptive-field stack: mean of one residual chain per
        // kernel size, each chain adding one dilated convolution per
        // configured dilation.
        let mut acc: Option<Tensor> = None;
        for &k in &cfg.resblock_kernels {
            let mut r = x.clone();
            for &d in &cfg.resblock_dilations {
                let name = format!("gen.mrf{i}.k{k}.d{d}");
                let branch = wn_conv(&params.gen, &name, &leaky(&r)?, (k - 1) / 2 * d, 1, d)?;
                r = (r + branch)?;
            }
            acc = Some(match acc {
                Some(a) => (a + r)?,
                None => r,
            });
        }
        x = (acc.expect("validated non-empty kernel list") / cfg.resblock_kernels.len() as f64)?;
    }
    let y = wn_conv(&params.gen, "gen.post", &leaky(&x)?, 3, 1, 1)?.tanh()?;

    let want = t * SAMPLES_PER_FRAME;
    if y.dims() != [b, 1, want] {
        return Err(CoreError::contract(format!(
            "generator produced {:?}, expected [{b}, 1, {want}]",
            y.dims()
        ))
        .in_stage("vocoder"));
    }
    Ok(y)
}

/// Synthesizes one waveform from tokens, a speaker vector, and a domain
/// flag. Deterministic; output length is exactly `320·|q|` samples at
/// 16 kHz.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty sequence, vocabulary mismatch, or
/// wrong speaker-vector width.
pub fn vocoder_forward(
    params: &VocoderParams,
    q: &TokenSequence,
    s: &SpeakerVec,
    domain: Domain,
) -> CoreResult<Waveform> {
    let y = generator_forward(params, &[q], &[s], &[domain])?;
    let samples = y.flatten_all()?.to_vec1::<f32>()?;
    Waveform::new(samples, MODEL_SAMPLE_RATE)
}

/// Score and ordered intermediate features of one discriminator branch.
#[derive(Debug)]
pub struct BranchOutput {
    /// Raw (unbounded) least-squares GAN score map.
    pub score: Tensor,
    /// Post-activation output of every stacked layer, shallow → deep.
    pub features: Vec<Tensor>,
}

/// One period branch: fold phase `p` into the batch axis, then a strided
/// convolution stack.
fn mpd_branch(params: &VocoderParams, x: &Tensor, p: usize) -> CoreResult<BranchOutput> {
    let (b, _, l) = x.dims3()?;
    let t_p = l.div_ceil(p);
    let padded = if t_p * p == l {
        x.clone()
    } else {
        x.pad_with_zeros(2, 0, t_p * p - l)?
    };
    let mut h = padded
        .reshape((b, t_p, p))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * p, 1, t_p))?;
    let mut features = Vec::with_capacity(MPD_LAYERS.len());
    for (j, (_, stride, pad)) in MPD_LAYERS.iter().enumerate() {
        h = leaky(&plain_conv(&params.disc, &format!("disc.mpd{p}.l{j}"), &h, *pad, *stride)?)?;
        features.push(h.clone());
    }
    let score = plain_conv(&params.disc, &format!("disc.mpd{p}.score"), &h, 1, 1)?;
    Ok(BranchOutput { score, features })
}

/// One scale branch: `log2(scale)` fixed average-downsampling steps, then
/// a wide convolution stack.
fn msd_branch(params: &VocoderParams, x: &Tensor, scale: usize) -> CoreResult<BranchOutput> {
    let mut h = x.clone();
    let down = Tensor::from_vec(vec![0.25f32; 4], (1, 1, 4), &params.device)?;
    for _ in 0..scale.trailing_zeros() {
        if h.dim(2)? < 4 {
            return Err(CoreError::contract(format!(
                "waveform too short for scale-{scale} discriminator"
            )));
        }
        h = h.conv1d(&down, 1, 2, 1, 1)?;
    }
    let mut features = Vec::with_capacity(MSD_LAYERS.len());
    for (j, (_, stride, pad)) in MSD_LAYERS.iter().enumerate() {
        h = leaky(&plain_conv(&params.disc, &format!("disc.msd{scale}.l{j}"), &h, *pad, *stride)?)?;
        features.push(h.clone());
    }
    let score = plain_conv(&params.disc, &format!("disc.msd{scale}.score"), &h, 1, 1)?;
    Ok(BranchOutput { score, features })
}

/// Runs every discriminator branch on a `(B, 1, L)` tensor; period
/// branches first (in configured order), then scale branches.
fn discriminate_tensor(params: &VocoderParams, x: &Tensor) -> CoreResult<Vec<BranchOutput>> {
    let mut outs = Vec::with_capacity(params.config.mpd_periods.len() + params.config.msd_scales.len());
    for &p in &params.config.mpd_periods {
        outs.push(mpd_branch(params, x, p)?);
    }
    for &s in &params.config.msd_scales {
        outs.push(msd_branch(params, x, s)?);
    }
    Ok(outs)
}

/// Scores a waveform with every discriminator branch (default
/// configuration: 5 period + 3 scale = 8 outputs), each with its ordered
/// intermediate feature list.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty waveform.
pub fn discriminate(params: &VocoderParams, w: &Waveform) -> CoreResult<Vec<BranchOutput>> {
    if w.is_empty() {
        return Err(CoreError::contract("cannot discriminate an empty waveform"));
    }
    let x = Tensor::from_vec(w.samples.clone(), (1, 1, w.len()), &params.device)?;
    discriminate_tensor(params, &x)
}

/// Least-squares discriminator objective: real scores driven to 1, fake
/// scores to 0; mean over branches.
fn lsgan_d_loss(real: &[BranchOutput], fake: &[BranchOutput]) -> CoreResult<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = ((r.score.affine(1.0, -1.0)?.sqr()?.mean_all()?)
            + f.score.sqr()?.mean_all()?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| CoreError::contract("no discriminator branches"))?;
    Ok((acc / real.len() as f64)?)
}

/// Least-squares generator objective: fake scores driven to 1; mean over
/// branches.
fn lsgan_g_loss(fake: &[BranchOutput]) -> CoreResult<Tensor> {
    let mut acc: Option<Tensor> = None;
    for f in fake {
        let term = f.score.affine(1.0, -1.0)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| CoreError::contract("no discriminator branches"))?;
    Ok((acc / fake.len() as f64)?)
}

/// Mean L1 distance between real and fake intermediate features over all
/// branches (real side detached: the term trains the generator only).
fn feature_match_loss(real: &[BranchOutput], fake: &[BranchOutput]) -> CoreResult<Tensor> {
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for (r, f) in real.iter().zip(fake) {
        for (fr, ff) in r.features.iter().zip(&f.features) {
            let term = (fr.detach() - ff)?.abs()?.mean_all()?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
            count += 1;
        }
    }
    let acc = acc.ok_or_else(|| CoreError::contract("no features to match"))?;
    Ok((acc / count as f64)?)
}

/// In-graph log-mel spectrogram of a `(B, 1, L)` waveform tensor,
/// `(B, n_mels, ⌊L/hop⌋)`. Matches [`features::mel_spectrogram`] up to
/// float tolerance (same window, bank, magnitude domain, and log floor).
fn mel_graph(params: &VocoderParams, x: &Tensor) -> CoreResult<Tensor> {
    let (b, _, l) = x.dims3()?;
    if l < MEL_HOP {
        return Err(CoreError::contract(format!(
            "waveform of {l} samples is shorter than one mel hop ({MEL_HOP})"
        )));
    }
    let n_bins = MEL_N_FFT / 2 + 1;
    let padded = x.pad_with_zeros(2, 0, MEL_N_FFT - MEL_HOP)?;
    let spec = padded.conv1d(&params.mel_dft, 0, MEL_HOP, 1, 1)?;
    let re = spec.narrow(1, 0, n_bins)?;
    let im = spec.narrow(1, n_bins, n_bins)?;
    let mag = ((re.sqr()? + im.sqr()?)? + MEL_EPS)?.sqrt()?;
    let frames = mag.dim(2)?;
    let bank = params
        .mel_bank
        .unsqueeze(0)?
        .broadcast_as((b, MEL_N_MELS, n_bins))?
        .contiguous()?;
    let mel = bank.matmul(&mag)?;
    debug_assert_eq!(frames, l / MEL_HOP);
    // clamp-below at the log floor, expressed through relu so the
    // gradient is exact (1 above the floor, 0 at or below it).
    let floor = MEL_LOG_FLOOR as f64;
    let clamped = (mel.affine(1.0, -floor)?.relu()? + floor)?;
    Ok(clamped.log()?)
}

/// L1 between in-graph log-mels of two equal-shape waveform tensors.
fn mel_l1_graph(params: &VocoderParams, real: &Tensor, fake: &Tensor) -> CoreResult<Tensor> {
    let mr = mel_graph(params, real)?.detach();
    let mf = mel_graph(params, fake)?;
    Ok((mr - mf)?.abs()?.mean_all()?)
}

/// The four loss terms of one real/fake waveform pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocoderLosses {
    /// Least-squares generator adversarial term.
    pub adv_g: f64,
    /// Least-squares discriminator term.
    pub adv_d: f64,
    /// Mean feature L1 across all branches.
    pub feat_match: f64,
    /// Log-mel L1.
    pub mel_l1: f64,
}

/// Evaluates all four loss terms on one real/fake pair (diagnostic; no
/// gradients are taken).
///
/// # Errors
///
/// [`CoreError::Contract`] when lengths or sample rates differ.
pub fn vocoder_losses(
    params: &VocoderParams,
    real: &Waveform,
    fake: &Waveform,
) -> CoreResult<VocoderLosses> {
    if real.len() != fake.len() || real.sample_rate != fake.sample_rate {
        return Err(CoreError::contract(format!(
            "real ({} samples @ {}) and fake ({} samples @ {}) must match",
            real.len(),
            real.sample_rate,
            fake.len(),
            fake.sample_rate
        )));
    }
    if real.is_empty() {
        return Err(CoreError::contract("cannot score empty waveforms"));
    }
    let dev = &params.device;
    let rt = Tensor::from_vec(real.samples.clone(), (1, 1, real.len()), dev)?;
    let ft = Tensor::from_vec(fake.samples.clone(), (1, 1, fake.len()), dev)?;
    let d_real = discriminate_tensor(params, &rt)?;
    let d_fake = discriminate_tensor(params, &ft)?;
    let scalar = |t: Tensor| -> CoreResult<f64> { Ok(t.to_scalar::<f32>()? as f64) };
    Ok(VocoderLosses {
        adv_g: scalar(lsgan_g_loss(&d_fake)?)?,
        adv_d: scalar(lsgan_d_loss(&d_real, &d_fake)?)?,
        feat_match: scalar(feature_match_loss(&d_real, &d_fake)?)?,
        mel_l1: scalar(mel_l1_graph(params, &rt, &ft)?)?,
    })
}

/// One training example: tokens with their aligned real audio and the
/// conditioning inputs.
#[derive(Debug, Clone)]
pub struct VocoderTrainItem {
    pub tokens: TokenSequence,
    pub speaker: SpeakerVec,
    pub domain: Domain,
    /// Ground-truth audio; exactly `320·|tokens|` samples at 16 kHz.
    pub audio: Waveform,
}

impl VocoderTrainItem {
    fn validate(&self, cfg: &VocoderConfig) -> CoreResult<()> {
        if self.tokens.is_empty() {
            return Err(CoreError::contract("training item with no tokens"));
        }
        if self.tokens.vocab_size != cfg.token_vocab {
            return Err(CoreError::contract(format!(
                "item token vocabulary {} != configured {}",
                self.tokens.vocab_size, cfg.token_vocab
            )));
        }
        if self.audio.sample_rate != MODEL_SAMPLE_RATE {
            return Err(CoreError::contract(format!(
                "training audio must be {MODEL_SAMPLE_RATE} Hz, got {}",
                self.audio.sample_rate
            )));
        }
        let want = self.tokens.len() * SAMPLES_PER_FRAME;
        if self.audio.len() != want {
            return Err(CoreError::contract(format!(
                "audio/token misalignment: {} samples for {} tokens (need {want})",
                self.audio.len(),
                self.tokens.len()
            )));
        }
        if self.speaker.values.len() != cfg.speaker_dim {
            return Err(CoreError::contract(format!(
                "item speaker vector has {} dims, vocoder expects {}",
                self.speaker.values.len(),
                cfg.speaker_dim
            )));
        }
        Ok(())
    }
}

/// Loss report of one adversarial training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocoderStepReport {
    /// Learning rate applied to both networks this step.
    pub lr: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub feat_match: f64,
    pub mel_l1: f64,
    /// Full generator objective: `adv_g + λ_fm·fm + λ_mel·mel`.
    pub gen_total: f64,
}

/// One adversarial step on a batch of equal-length items: discriminator
/// update on detached generator output, then generator update against
/// the refreshed discriminator.
///
/// # Errors
///
/// [`CoreError::Contract`] on an invalid batch;
/// [`CoreError::Divergence`] when either loss goes non-finite.
pub fn vocoder_train_step(
    params: &VocoderParams,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    batch: &[VocoderTrainItem],
    lr: f64,
) -> CoreResult<VocoderStepReport> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(CoreError::contract("empty vocoder batch"));
    }
    for item in batch {
        item.validate(cfg)?;
    }
    let t = batch[0].tokens.len();
    let mut audio = Vec::with_capacity(batch.len() * t * SAMPLES_PER_FRAME);
    for item in batch {
        if item.tokens.len() != t {
            return Err(CoreError::contract(format!(
                "batch items must share one length ({t} != {} tokens)",
                item.tokens.len()
            )));
        }
        audio.extend_from_slice(&item.audio.samples);
    }
    let real = Tensor::from_vec(audio, (batch.len(), 1, t * SAMPLES_PER_FRAME), &params.device)?;
    let toks: Vec<&TokenSequence> = batch.iter().map(|i| &i.tokens).collect();
    let spks: Vec<&SpeakerVec> = batch.iter().map(|i| &i.speaker).collect();
    let doms: Vec<Domain> = batch.iter().map(|i| i.domain).collect();
    let fake = generator_forward(params, &toks, &spks, &doms)?;

    // Discriminator step (generator output detached).
    let fake_d = fake.detach();
    let d_real = discriminate_tensor(params, &real)?;
    let d_fake = discriminate_tensor(params, &fake_d)?;
    let loss_d = lsgan_d_loss(&d_real, &d_fake)?;
    let adv_d = check_finite(loss_d.to_scalar::<f32>()? as f64, "discriminator loss")?;
    let grads_d = loss_d.backward()?;
    opt_d.step(&params.disc, &grads_d, lr, None)?;

    // Generator step against the just-updated discriminator.
    let d_real = discriminate_tensor(params, &real)?;
    let d_fake = discriminate_tensor(params, &fake)?;
    let adv_g_t = lsgan_g_loss(&d_fake)?;
    let fm_t = feature_match_loss(&d_real, &d_fake)?;
    let mel_t = mel_l1_graph(params, &real, &fake)?;
    let loss_g = ((adv_g_t.clone() + (fm_t.clone() * cfg.lambda_feat_match)?)?
        + (mel_t.clone() * cfg.lambda_mel)?)?;
    let gen_total = check_finite(loss_g.to_scalar::<f32>()? as f64, "generator loss")?;
    let grads_g = loss_g.backward()?;
    opt_g.step(&params.gen, &grads_g, lr, None)?;

    Ok(VocoderStepReport {
        lr,
        adv_d,
        adv_g: adv_g_t.to_scalar::<f32>()? as f64,
        feat_match: fm_t.to_scalar::<f32>()? as f64,
        mel_l1: mel_t.to_scalar::<f32>()? as f64,
        gen_total,
    })
}

/// Knobs of the adversarial training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderTrainOptions {
    /// Number of steps to run (on top of `start_step`).
    pub steps: usize,
    /// Items per batch.
    pub batch_size: usize,
    /// Random crop length in tokens; items shorter than this are used
    /// whole (the batch crops to its shortest member). `None` trains on
    /// full items, which then must all share one length.
    pub crop_frames: Option<usize>,
    /// Starting learning rate of the exponential decay.
    pub base_lr: f64,
    /// Per-epoch decay factor.
    pub lr_gamma: f64,
    /// Steps per decay epoch; `None` derives it from the corpus size.
    pub steps_per_epoch: Option<usize>,
    /// Seed of batch sampling and cropping.
    pub seed: u64,
}

impl Default for VocoderTrainOptions {
    fn default() -> Self {
        VocoderTrainOptions {
            steps: 500,
            batch_size: 16,
            crop_frames: Some(24),
            base_lr: 2e-4,
            lr_gamma: 0.999,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

/// Runs the adversarial loop: each step samples a batch (with a per-step
/// seeded RNG, so a resumed run continues the identical trajectory),
/// random-crops to a common length, and applies one
/// [`vocoder_train_step`]. Returns the per-step reports.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty corpus or invalid items;
/// [`CoreError::Divergence`] propagated from any step.
pub fn vocoder_train(
    params: &VocoderParams,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    items: &[VocoderTrainItem],
    opts: &VocoderTrainOptions,
    start_step: u64,
) -> CoreResult<Vec<VocoderStepReport>> {
    if items.is_empty() {
        return Err(CoreError::contract("no vocoder training items"));
    }
    if opts.batch_size == 0 {
        return Err(CoreError::contract("batch size must be positive"));
    }
    for item in items {
        item.validate(&params.config)?;
    }
    if opts.crop_frames.is_none() {
        let t0 = items[0].tokens.len();
        if items.iter().any(|i| i.tokens.len() != t0) {
            return Err(CoreError::contract(
                "crop disabled, so all items must share one token length",
            ));
        }
    }
    let spe = opts
        .steps_per_epoch
        .unwrap_or_else(|| items.len().div_ceil(opts.batch_size))
        .max(1);
    let schedule = LrSchedule::ExponentialPerEpoch {
        gamma: opts.lr_gamma,
        steps_per_epoch: spe,
    };
    let mut reports = Vec::with_capacity(opts.steps);
    for i in 0..opts.steps {
        let step = start_step + i as u64;
        // Seeding per global step keeps the data order a function of the
        // step index alone — resume reproduces the uninterrupted run.
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let chosen: Vec<&VocoderTrainItem> = (0..opts.batch_size)
            .map(|_| &items[rng.gen_range(0..items.len())])
            .collect();
        let shortest = chosen.iter().map(|c| c.tokens.len()).min().expect("non-empty");
        let crop = opts.crop_frames.unwrap_or(usize::MAX).min(shortest).max(1);
        let mut batch = Vec::with_capacity(chosen.len());
        for item in chosen {
            let t = item.tokens.len();
            let start = if t > crop { rng.gen_range(0..=t - crop) } else { 0 };
            let ids = item.tokens.ids[start..start + crop].to_vec();
            let samples =
                item.audio.samples[start * SAMPLES_PER_FRAME..(start + crop) * SAMPLES_PER_FRAME].to_vec();
            batch.push(VocoderTrainItem {
                tokens: TokenSequence::new(ids, item.tokens.vocab_size)?,
                speaker: item.speaker.clone(),
                domain: item.domain,
                audio: Waveform::new(samples, MODEL_SAMPLE_RATE)?,
            });
        }
        let lr = schedule.lr_at(opts.base_lr, step);
        let report = vocoder_train_step(params, opt_g, opt_d, &batch, lr)?;
        if i % 50 == 0 {
            log::info!(
                "vocoder step {step}: mel {:.4} fm {:.4} adv_g {:.4} adv_d {:.4} (lr {lr:.2e})",
                report.mel_l1,
                report.feat_match,
                report.adv_g,
                report.adv_d
            );
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Mean offline log-mel L1 between each item's real audio and its
/// resynthesis, using the reference (FFT-based) spectrogram. This is the
/// quantity tracked to judge training progress.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty item list or invalid items.
pub fn vocoder_eval_mel_l1(params: &VocoderParams, items: &[VocoderTrainItem]) -> CoreResult<f64> {
    if items.is_empty() {
        return Err(CoreError::contract("no items to evaluate"));
    }
    let mut total = 0.0f64;
    for item in items {
        item.validate(&params.config)?;
        let fake = vocoder_forward(params, &item.tokens, &item.speaker, item.domain)?;
        let mel_real = features::mel_spectrogram(&item.audio)?;
        let mel_fake = features::mel_spectrogram(&fake)?;
        total += features::mel_l1(&mel_real, &mel_fake)? as f64;
    }
    Ok(total / items.len() as f64)
}

// --- Checkpointing ------------------------------------------------------------

/// Packs both networks (and optionally both optimizers) into a
/// checkpoint.
pub fn vocoder_to_checkpoint(
    params: &VocoderParams,
    step: u64,
    opt_g: Option<&Adam>,
    opt_d: Option<&Adam>,
) -> CoreResult<Checkpoint> {
    let config = serde_json::to_value(&params.config)
        .map_err(|e| CoreError::format(format!("config serialization: {e}")))?;
    let mut ckpt = Checkpoint::new(VOCODER_KIND, step, config);
    params.gen.write_to(&mut ckpt)?;
    params.disc.write_to(&mut ckpt)?;
    if let Some(o) = opt_g {
        o.write_to(&mut ckpt, "opt_g")?;
    }
    if let Some(o) = opt_d {
        o.write_to(&mut ckpt, "opt_d")?;
    }
    Ok(ckpt)
}

/// Rebuilds a vocoder from a checkpoint produced by
/// [`vocoder_to_checkpoint`]; bit-exact with the saved parameters.
pub fn vocoder_from_checkpoint(ckpt: &Checkpoint) -> CoreResult<VocoderParams> {
    ckpt.expect_kind(VOCODER_KIND)?;
    let config: VocoderConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| CoreError::format(format!("checkpoint config: {e}")))?;
    // Seed is irrelevant: every tensor is overwritten from the file.
    let params = build_vocoder(&config, 0)?;
    params.gen.read_from(ckpt)?;
    params.disc.read_from(ckpt)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::optim::AdamConfig;

    /// Small config for fast tests; keeps the 320-sample frame contract.
    fn tiny_config() -> VocoderConfig {
        VocoderConfig {
            token_vocab: 13,
            token_embed_dim: 8,
            speaker_dim: 8,
            domain_embed_dim: 4,
            base_channels: 16,
            upsample_factors: vec![8, 5, 4, 2],
            resblock_kernels: vec![3],
            resblock_dilations: vec![1, 3],
            mpd_periods: vec![2, 3],
            msd_scales: vec![1, 2],
            lambda_feat_match: 2.0,
            lambda_mel: 45.0,
        }
    }

    fn tiny_speaker(seed: u64, dim: usize) -> SpeakerVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-9);
        values.iter_mut().for_each(|v| *v /= norm);
        SpeakerVec {
            values,
            embedder_id: "cond",
        }
    }

    fn tiny_tokens(seed: u64, len: usize, vocab: u32) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new((0..len).map(|_| rng.gen_range(0..vocab)).collect(), vocab).unwrap()
    }

    fn random_waveform(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
            MODEL_SAMPLE_RATE,
        )
        .unwrap()
    }

    fn tiny_item(seed: u64, frames: usize, cfg: &VocoderConfig) -> VocoderTrainItem {
        VocoderTrainItem {
            tokens: tiny_tokens(seed, frames, cfg.token_vocab),
            speaker: tiny_speaker(seed ^ 0xABCD, cfg.speaker_dim),
            domain: if seed % 2 == 0 { Domain::Heb } else { Domain::En },
            audio: random_waveform(seed ^ 0x1234, frames * SAMPLES_PER_FRAME),
        }
    }

    #[test]
    fn default_configs_validate_and_multiply_to_frame_size() {
        VocoderConfig::desk(64).validate().unwrap();
        VocoderConfig::full_scale(500).validate().unwrap();
        let desk = VocoderConfig::desk(64);
        assert_eq!(desk.upsample_factors.iter().product::<usize>(), 320);
        assert_eq!(desk.mpd_periods.len() + desk.msd_scales.len(), 8);
    }

    #[test]
    fn bad_upsample_product_is_rejected() {
        let mut cfg = tiny_config();
        cfg.upsample_factors = vec![8, 5, 4, 4];
        assert!(cfg.validate().is_err());
        cfg.upsample_factors = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_config();
        let a = build_vocoder(&cfg, 7).unwrap();
        let b = build_vocoder(&cfg, 7).unwrap();
        for ((name_a, var_a), (name_b, var_b)) in a.gen.iter().zip(b.gen.iter()) {
            assert_eq!(name_a, name_b);
            let va = var_a.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let vb = var_b.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(va, vb, "generator tensor {name_a} differs between builds");
        }
        let c = build_vocoder(&cfg, 8).unwrap();
        let first = |p: &VocoderParams| {
            p.gen
                .get("gen.pre.v")
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_ne!(first(&a), first(&c), "different seeds must differ");
    }

    #[test]
    fn output_length_is_320_times_token_count() {
        let params = build_vocoder(&tiny_config(), 1).unwrap();
        let s = tiny_speaker(5, 8);
        for frames in [1usize, 7, 53, 900] {
            let q = tiny_tokens(frames as u64, frames, 13);
            let y = vocoder_forward(&params, &q, &s, Domain::Heb).unwrap();
            assert_eq!(y.len(), frames * 320);
            assert_eq!(y.sample_rate, MODEL_SAMPLE_RATE);
        }
        // 50 tokens at 50 Hz is exactly one second.
        let q = tiny_tokens(50, 50, 13);
        let y = vocoder_forward(&params, &q, &s, Domain::En).unwrap();
        assert_eq!(y.len(), 16_000);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = build_vocoder(&tiny_config(), 2).unwrap();
        let q = tiny_tokens(3, 20, 13);
        let s = tiny_speaker(4, 8);
        let a = vocoder_forward(&params, &q, &s, Domain::Heb).unwrap();
        let b = vocoder_forward(&params, &q, &s, Domain::Heb).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn output_responds_to_speaker_and_domain() {
        // Conditioning enters every frame, so even the untrained network
        // must react to a changed speaker vector or domain flag.
        let params = build_vocoder(&tiny_config(), 3).unwrap();
        let q = tiny_tokens(10, 25, 13);
        let base = vocoder_forward(&params, &q, &tiny_speaker(1, 8), Domain::Heb).unwrap();
        let other_spk = vocoder_forward(&params, &q, &tiny_speaker(2, 8), Domain::Heb).unwrap();
        let other_dom = vocoder_forward(&params, &q, &tiny_speaker(1, 8), Domain::En).unwrap();
        assert_ne!(base.samples, other_spk.samples);
        assert_ne!(base.samples, other_dom.samples);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let params = build_vocoder(&tiny_config(), 4).unwrap();
        let s = tiny_speaker(1, 8);
        // Vocabulary mismatch.
        let wrong_vocab = tiny_tokens(1, 10, 99);
        assert!(vocoder_forward(&params, &wrong_vocab, &s, Domain::Heb).is_err());
        // Wrong speaker width.
        let q = tiny_tokens(1, 10, 13);
        let wide = tiny_speaker(1, 9);
        assert!(vocoder_forward(&params, &q, &wide, Domain::Heb).is_err());
        // Empty sequence.
        let empty = TokenSequence::new(vec![], 13).unwrap();
        assert!(vocoder_forward(&params, &empty, &s, Domain::Heb).is_err());
    }

    #[test]
    fn default_discriminator_has_eight_branches() {
        let params = build_vocoder(&VocoderConfig::desk(64), 5).unwrap();
        let w = random_waveform(1, 1600);
        let outs = discriminate(&params, &w).unwrap();
        assert_eq!(outs.len(), 8);
        for out in &outs {
            assert_eq!(out.features.len(), 4);
            assert!(out.score.elem_count() > 0);
        }
        let empty = Waveform::new(vec![], MODEL_SAMPLE_RATE).unwrap();
        assert!(discriminate(&params, &empty).is_err());
    }

    #[test]
    fn period_branches_zero_pad_to_a_multiple() {
        // 1601 samples is not a multiple of any default period except 1;
        // every branch must still produce a score.
        let params = build_vocoder(&tiny_config(), 6).unwrap();
        let w = random_waveform(2, 1601);
        let outs = discriminate(&params, &w).unwrap();
        assert_eq!(outs.len(), params.config.mpd_periods.len() + params.config.msd_scales.len());
    }

    #[test]
    fn identical_inputs_give_identical_features_and_zero_distances() {
        let params = build_vocoder(&tiny_config(), 7).unwrap();
        let w = random_waveform(3, 3200);
        let a = discriminate(&params, &w).unwrap();
        let b = discriminate(&params, &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (fx, fy) in x.features.iter().zip(&y.features) {
                assert_eq!(
                    fx.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                    fy.flatten_all().unwrap().to_vec1::<f32>().unwrap()
                );
            }
        }
        let losses = vocoder_losses(&params, &w, &w.clone()).unwrap();
        assert_eq!(losses.feat_match, 0.0);
        assert_eq!(losses.mel_l1, 0.0);
        assert!(losses.adv_g.is_finite() && losses.adv_g >= 0.0);
        assert!(losses.adv_d.is_finite() && losses.adv_d >= 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected_by_losses() {
        let params = build_vocoder(&tiny_config(), 8).unwrap();
        let a = random_waveform(1, 3200);
        let b = random_waveform(2, 3201);
        assert!(vocoder_losses(&params, &a, &b).is_err());
    }

    #[test]
    fn least_squares_targets_have_the_expected_closed_form() {
        // Scores pinned to the targets (real → 1, fake → 0) make the
        // discriminator term exactly zero and the generator term exactly
        // one; swapped scores invert that.
        let dev = Device::Cpu;
        let branch = |value: f32| BranchOutput {
            score: Tensor::from_vec(vec![value; 6], (1, 1, 6), &dev).unwrap(),
            features: vec![],
        };
        let real = vec![branch(1.0), branch(1.0)];
        let fake = vec![branch(0.0), branch(0.0)];
        let d = lsgan_d_loss(&real, &fake).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
        let g = lsgan_g_loss(&fake).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(g, 1.0);
        let fooled = vec![branch(1.0), branch(1.0)];
        let g2 = lsgan_g_loss(&fooled).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(g2, 0.0);
    }

    #[test]
    fn graph_mel_matches_the_fft_reference() {
        let params = build_vocoder(&tiny_config(), 9).unwrap();
        // 4000 samples: 15 frames, not a multiple of the hop.
        let w = random_waveform(11, 4000);
        let x = Tensor::from_vec(w.samples.clone(), (1, 1, w.len()), &params.device).unwrap();
        let graph = mel_graph(&params, &x)
            .unwrap()
            .transpose(1, 2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let reference = features::mel_spectrogram(&w).unwrap();
        let (rows, cols) = reference.frames.dim();
        assert_eq!(rows, 4000 / MEL_HOP);
        assert_eq!(graph.len(), rows * cols);
        let mut worst = 0.0f32;
        for (g, r) in graph.iter().zip(reference.frames.iter()) {
            worst = worst.max((g - r).abs());
        }
        assert!(worst < 1e-2, "worst log-mel deviation {worst}");
    }

    #[test]
    fn train_step_updates_both_networks() {
        let cfg = tiny_config();
        let params = build_vocoder(&cfg, 10).unwrap();
        let mut opt_g = Adam::new(AdamConfig::default());
        let mut opt_d = Adam::new(AdamConfig::default());
        let batch = vec![tiny_item(1, 10, &cfg), tiny_item(2, 10, &cfg)];
        let snapshot = |set: &ParamSet, name: &str| {
            set.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let g_before = snapshot(&params.gen, "gen.pre.v");
        let d_before = snapshot(&params.disc, "disc.mpd2.l0.w");
        let report = vocoder_train_step(&params, &mut opt_g, &mut opt_d, &batch, 2e-4).unwrap();
        assert!(report.adv_d.is_finite() && report.gen_total.is_finite());
        assert!(report.mel_l1 > 0.0);
        let delta = |a: &[f32], b: &[f32]| -> f32 {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
        };
        assert!(delta(&g_before, &snapshot(&params.gen, "gen.pre.v")) > 0.0);
        assert!(delta(&d_before, &snapshot(&params.disc, "disc.mpd2.l0.w")) > 0.0);
        // Mixed lengths are refused.
        let bad = vec![tiny_item(1, 10, &cfg), tiny_item(2, 12, &cfg)];
        assert!(vocoder_train_step(&params, &mut opt_g, &mut opt_d, &bad, 2e-4).is_err());
    }

    #[test]
    fn training_crops_unequal_items_to_a_common_length() {
        let cfg = tiny_config();
        let params = build_vocoder(&cfg, 11).unwrap();
        let mut opt_g = Adam::new(AdamConfig::default());
        let mut opt_d = Adam::new(AdamConfig::default());
        let items = vec![tiny_item(1, 10, &cfg), tiny_item(2, 14, &cfg), tiny_item(3, 9, &cfg)];
        let opts = VocoderTrainOptions {
            steps: 2,
            batch_size: 2,
            crop_frames: Some(8),
            ..Default::default()
        };
        let reports = vocoder_train(&params, &mut opt_g, &mut opt_d, &items, &opts, 0).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.gen_total.is_finite()));
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let cfg = tiny_config();
        let params = build_vocoder(&cfg, 12).unwrap();
        let mut opt_g = Adam::new(AdamConfig::default());
        let mut opt_d = Adam::new(AdamConfig::default());
        let items = vec![tiny_item(1, 8, &cfg)];
        let opts = VocoderTrainOptions {
            steps: 4,
            batch_size: 1,
            crop_frames: Some(8),
            base_lr: 2e-4,
            lr_gamma: 0.5,
            steps_per_epoch: Some(2),
            ..Default::default()
        };
        let reports = vocoder_train(&params, &mut opt_g, &mut opt_d, &items, &opts, 0).unwrap();
        let lrs: Vec<f64> = reports.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![2e-4, 2e-4, 1e-4, 1e-4]);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_the_forward_pass() {
        let cfg = tiny_config();
        let params = build_vocoder(&cfg, 13).unwrap();
        let mut opt_g = Adam::new(AdamConfig::default());
        let mut opt_d = Adam::new(AdamConfig::default());
        // One step so the saved state is not just the init.
        let batch = vec![tiny_item(5, 8, &cfg)];
        vocoder_train_step(&params, &mut opt_g, &mut opt_d, &batch, 2e-4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocoder.ckpt");
        let ckpt = vocoder_to_checkpoint(&params, 1, Some(&opt_g), Some(&opt_d)).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 1);
        let restored = vocoder_from_checkpoint(&loaded).unwrap();

        let q = tiny_tokens(7, 12, 13);
        let s = tiny_speaker(8, 8);
        let a = vocoder_forward(&params, &q, &s, Domain::En).unwrap();
        let b = vocoder_forward(&restored, &q, &s, Domain::En).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn resumed_training_matches_the_uninterrupted_run() {
        let cfg = tiny_config();
        let items = vec![tiny_item(1, 10, &cfg), tiny_item(2, 12, &cfg)];
        let opts = |steps: usize| VocoderTrainOptions {
            steps,
            batch_size: 2,
            crop_frames: Some(8),
            steps_per_epoch: Some(2),
            seed: 99,
            ..Default::default()
        };

        // Uninterrupted: 4 steps.
        let straight = build_vocoder(&cfg, 21).unwrap();
        let mut og = Adam::new(AdamConfig::default());
        let mut od = Adam::new(AdamConfig::default());
        vocoder_train(&straight, &mut og, &mut od, &items, &opts(4), 0).unwrap();

        // Interrupted: 2 steps, checkpoint, restore, 2 more.
        let first = build_vocoder(&cfg, 21).unwrap();
        let mut og1 = Adam::new(AdamConfig::default());
        let mut od1 = Adam::new(AdamConfig::default());
        vocoder_train(&first, &mut og1, &mut od1, &items, &opts(2), 0).unwrap();
        let ckpt = vocoder_to_checkpoint(&first, 2, Some(&og1), Some(&od1)).unwrap();
        let resumed = vocoder_from_checkpoint(&ckpt).unwrap();
        let mut og2 = Adam::new(AdamConfig::default());
        let mut od2 = Adam::new(AdamConfig::default());
        og2.read_from(&ckpt, "opt_g", &resumed.device).unwrap();
        od2.read_from(&ckpt, "opt_d", &resumed.device).unwrap();
        vocoder_train(&resumed, &mut og2, &mut od2, &items, &opts(2), 2).unwrap();

        let grab = |p: &VocoderParams| {
            p.gen.get("gen.post.v").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(grab(&straight), grab(&resumed));
    }

    #[test]
    fn eval_mel_l1_is_zero_against_own_output() {
        let cfg = tiny_config();
        let params = build_vocoder(&cfg, 14).unwrap();
        let mut item = tiny_item(6, 10, &cfg);
        // Replace the audio with the vocoder's own output: the distance
        // must collapse to zero.
        item.audio = vocoder_forward(&params, &item.tokens, &item.speaker, item.domain).unwrap();
        let d = vocoder_eval_mel_l1(&params, &[item]).unwrap();
        assert_eq!(d, 0.0);
    }
}
