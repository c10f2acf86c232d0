//! Autoregressive token language model over the concatenated text /
//! acoustic stream.
//!
//! Input layout is `[z_txt][SEP][z_ac]`: both segments are embedded
//! (scaled by √d), a sinusoidal positional code is added with positions
//! restarting at 0 for each of the two segments (SEP is position 0 of the
//! acoustic segment), and a causal transformer predicts the next token at
//! every position. The output vocabulary is the acoustic codebook plus
//! three specials appended after it: `SEP = N_ac`, `EOS = N_ac + 1`,
//! `PAD = N_ac + 2`.
//!
//! Indexing convention: `lm_forward` returns one logit row per input
//! position, where row `t` is the distribution of the token *following*
//! position `t` (the prediction for input position `p` lives at row
//! `p - 1`). Perturbing the input at position `p` therefore changes only
//! predictions for positions strictly greater than `p`.
//!
//! Training is teacher forcing with cross-entropy averaged over the
//! positions that predict acoustic tokens and the terminal EOS; text
//! positions are conditioning only. Generation samples from the top-p
//! nucleus with a seeded stream, masks SEP/PAD, stops on EOS or a length
//! cap, and uses per-layer KV caches so each step costs one token, not a
//! full re-encode.
//!
//! Parameters are immutable during inference, so `lm_forward` and
//! [`generate`] are safe to call concurrently with per-caller RNG streams;
//! training mutates parameters and is single-writer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::ops::{log_softmax, softmax};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, CoreResult};
use crate::optim::{randn_vec, Adam, LrSchedule, ParamSet};
use crate::TokenSequence;

/// Number of special tokens appended to the acoustic vocabulary.
pub const SPECIALS_COUNT: usize = 3;

/// Ids of the special tokens within the generation vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub sep: u32,
    pub eos: u32,
    pub pad: u32,
}

/// Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    /// Acoustic codebook size `N_ac`.
    pub acoustic_vocab: usize,
    /// Text vocabulary size `N_txt`.
    pub text_vocab: usize,
    /// Special-token ids (canonically `N_ac`, `N_ac+1`, `N_ac+2`).
    pub specials: Specials,
    /// Hard cap on total input length `|z_txt| + 1 + |z_ac|`.
    pub max_positions: usize,
    /// Default nucleus mass for sampling.
    pub top_p_default: f64,
}

impl LMConfig {
    fn with_dims(
        layers: usize,
        heads: usize,
        embed_dim: usize,
        ffn_dim: usize,
        text_vocab: usize,
        acoustic_vocab: usize,
    ) -> Self {
        LMConfig {
            layers,
            heads,
            embed_dim,
            ffn_dim,
            acoustic_vocab,
            text_vocab,
            specials: Specials {
                sep: acoustic_vocab as u32,
                eos: acoustic_vocab as u32 + 1,
                pad: acoustic_vocab as u32 + 2,
            },
            max_positions: 2048,
            top_p_default: 0.9,
        }
    }

    /// Full-scale configuration: 12 layers, 16 heads, embed 1024, ffn 4096.
    pub fn full_scale(text_vocab: usize, acoustic_vocab: usize) -> Self {
        Self::with_dims(12, 16, 1024, 4096, text_vocab, acoustic_vocab)
    }

    /// CPU-friendly configuration: 4 layers, 4 heads, embed 256, ffn 1024.
    pub fn desk(text_vocab: usize, acoustic_vocab: usize) -> Self {
        Self::with_dims(4, 4, 256, 1024, text_vocab, acoustic_vocab)
    }

    /// Generation vocabulary size: acoustic ids plus specials.
    pub fn gen_vocab(&self) -> usize {
        self.acoustic_vocab + SPECIALS_COUNT
    }

    /// Validates dimensions and the canonical special-token layout.
    pub fn validate(&self) -> CoreResult<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(CoreError::contract(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(CoreError::contract("layers and ffn_dim must be positive"));
        }
        if self.acoustic_vocab == 0 || self.text_vocab == 0 {
            return Err(CoreError::contract("vocabulary sizes must be >= 1"));
        }
        let canonical = Specials {
            sep: self.acoustic_vocab as u32,
            eos: self.acoustic_vocab as u32 + 1,
            pad: self.acoustic_vocab as u32 + 2,
        };
        if self.specials != canonical {
            return Err(CoreError::contract(format!(
                "specials {:?} must follow the acoustic vocabulary as {:?}",
                self.specials, canonical
            )));
        }
        if self.max_positions < 2 {
            return Err(CoreError::contract("max_positions must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.top_p_default) {
            return Err(CoreError::contract("top_p_default must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Model parameters plus the configuration that shaped them.
#[derive(Debug)]
pub struct LMParams {
    config: LMConfig,
    params: ParamSet,
    device: Device,
    dtype: DType,
}

impl LMParams {
    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn param_set(&self) -> &ParamSet {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn tensor(&self, name: &str) -> CoreResult<Tensor> {
        Ok(self.params.get(name)?.as_tensor().clone())
    }
}


/// Builds a model with seeded deterministic initialization (f32).
pub fn build_lm(config: &LMConfig, seed: u64) -> CoreResult<LMParams> {
    build_lm_with_dtype(config, seed, DType::F32)
}

/// As [`build_lm`] with an explicit parameter dtype. The f64 path exists
/// for finite-difference gradient verification, where f32 rounding would
/// drown the comparison.
pub fn build_lm_with_dtype(config: &LMConfig, seed: u64, dtype: DType) -> CoreResult<LMParams> {
    config.validate()?;
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let d = config.embed_dim;

    let add = |params: &mut ParamSet,
                   rng: &mut ChaCha8Rng,
                   name: String,
                   shape: &[usize],
                   std: f64|
     -> CoreResult<()> {
        let n: usize = shape.iter().product();
        let values = if std == 0.0 {
            vec![0.0f32; n]
        } else {
            randn_vec(rng, n, std)
        };
        let t = Tensor::from_vec(values, shape, &device)?.to_dtype(dtype)?;
        params.insert(name, candle_core::Var::from_tensor(&t)?)?;
        Ok(())
    };
    let ones = |params: &mut ParamSet, name: String, n: usize| -> CoreResult<()> {
        let t = Tensor::from_vec(vec![1.0f32; n], &[n][..], &device)?.to_dtype(dtype)?;
        params.insert(name, candle_core::Var::from_tensor(&t)?)?;
        Ok(())
    };

    // Embeddings at N(0, 1/√d); the √d scale at lookup restores unit
    // variance against the O(1) sinusoidal code.
    let embed_std = 1.0 / (d as f64).sqrt();
    add(
        &mut params,
        &mut rng,
        "text_embed.weight".into(),
        &[config.text_vocab, d],
        embed_std,
    )?;
    add(
        &mut params,
        &mut rng,
        "ac_embed.weight".into(),
        &[config.gen_vocab(), d],
        embed_std,
    )?;

    let w_std = 0.02;
    // Residual-branch output projections shrink with depth for stability.
    let resid_std = w_std / (2.0 * config.layers as f64).sqrt();
    for i in 0..config.layers {
        let p = format!("blocks.{i}");
        ones(&mut params, format!("{p}.ln1.weight"), d)?;
        add(&mut params, &mut rng, format!("{p}.ln1.bias"), &[d], 0.0)?;
        for proj in ["q", "k", "v"] {
            add(
                &mut params,
                &mut rng,
                format!("{p}.attn.{proj}.weight"),
                &[d, d],
                w_std,
            )?;
            add(&mut params, &mut rng, format!("{p}.attn.{proj}.bias"), &[d], 0.0)?;
        }
        add(
            &mut params,
            &mut rng,
            format!("{p}.attn.o.weight"),
            &[d, d],
            resid_std,
        )?;
        add(&mut params, &mut rng, format!("{p}.attn.o.bias"), &[d], 0.0)?;
        ones(&mut params, format!("{p}.ln2.weight"), d)?;
        add(&mut params, &mut rng, format!("{p}.ln2.bias"), &[d], 0.0)?;
        add(
            &mut params,
            &mut rng,
            format!("{p}.ffn.w1.weight"),
            &[config.ffn_dim, d],
            w_std,
        )?;
        add(
            &mut params,
            &mut rng,
            format!("{p}.ffn.w1.bias"),
            &[config.ffn_dim],
            0.0,
        )?;
        add(
            &mut params,
            &mut rng,
            format!("{p}.ffn.w2.weight"),
            &[d, config.ffn_dim],
            resid_std,
        )?;
        add(&mut params, &mut rng, format!("{p}.ffn.w2.bias"), &[d], 0.0)?;
    }
    ones(&mut params, "ln_f.weight".into(), d)?;
    add(&mut params, &mut rng, "ln_f.bias".into(), &[d], 0.0)?;
    add(
        &mut params,
        &mut rng,
        "head.weight".into(),
        &[config.gen_vocab(), d],
        w_std,
    )?;
    add(&mut params, &mut rng, "head.bias".into(), &[config.gen_vocab()], 0.0)?;

    Ok(LMParams {
        config: config.clone(),
        params,
        device,
        dtype,
    })
}

fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> CoreResult<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> CoreResult<Tensor> {
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

/// Sinusoidal positional code rows for explicit position indices.
fn sinusoid_rows(positions: &[usize], dim: usize, dtype: DType, device: &Device) -> CoreResult<Tensor> {
    let mut values = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = (10_000.0f64).powf(2.0 * pair / dim as f64);
            let angle = pos as f64 / rate;
            values.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(values, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// Validates the two token sequences against the configured vocabularies.
fn check_inputs(config: &LMConfig, z_txt: &TokenSequence, z_ac: &TokenSequence) -> CoreResult<()> {
    if z_txt.vocab_size as usize != config.text_vocab {
        return Err(CoreError::contract(format!(
            "text tokens carry vocab {} but the model expects {}",
            z_txt.vocab_size, config.text_vocab
        )));
    }
    if z_ac.vocab_size as usize != config.acoustic_vocab {
        return Err(CoreError::contract(format!(
            "acoustic tokens carry vocab {} but the model expects {}",
            z_ac.vocab_size, config.acoustic_vocab
        )));
    }
    let total = z_txt.len() + 1 + z_ac.len();
    if total > config.max_positions {
        return Err(CoreError::contract(format!(
            "sequence length {total} exceeds max_positions {}",
            config.max_positions
        )));
    }
    Ok(())
}

/// Embeds `[z_txt][SEP][z_ac]` with per-segment positions. Returns the
/// `(L, d)` input matrix.
fn embed_sequence(
    params: &LMParams,
    z_txt: &TokenSequence,
    z_ac: &TokenSequence,
) -> CoreResult<Tensor> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let device = &params.device;

    let text_embed = params.tensor("text_embed.weight")?;
    let ac_embed = params.tensor("ac_embed.weight")?;
    let scale = (d as f64).sqrt();

    let mut parts: Vec<Tensor> = Vec::new();
    if !z_txt.ids.is_empty() {
        let idx = Tensor::from_vec(z_txt.ids.clone(), z_txt.len(), device)?;
        parts.push(text_embed.index_select(&idx, 0)?);
    }
    let mut ac_ids = Vec::with_capacity(z_ac.len() + 1);
    ac_ids.push(cfg.specials.sep);
    ac_ids.extend_from_slice(&z_ac.ids);
    let idx = Tensor::from_vec(ac_ids.clone(), ac_ids.len(), device)?;
    parts.push(ac_embed.index_select(&idx, 0)?);
    let embedded = if parts.len() == 1 {
        parts.pop().expect("one part")
    } else {
        Tensor::cat(&parts, 0)?
    };
    let embedded = (embedded * scale)?;

    // Positions restart at 0 for the acoustic segment; SEP takes 0.
    let mut positions: Vec<usize> = (0..z_txt.len()).collect();
    positions.extend(0..=z_ac.len());
    let pos = sinusoid_rows(&positions, d, params.dtype, device)?;
    Ok(embedded.add(&pos)?)
}

/// Additive causal mask of shape `(len, len)`: 0 at or below the
/// diagonal, -inf above.
fn causal_mask(len: usize, dtype: DType, device: &Device) -> CoreResult<Tensor> {
    let mut values = vec![0.0f32; len * len];
    for r in 0..len {
        for c in (r + 1)..len {
            values[r * len + c] = f32::NEG_INFINITY;
        }
    }
    Ok(Tensor::from_vec(values, (len, len), device)?.to_dtype(dtype)?)
}

/// Per-layer attention cache: keys and values as `(heads, t, head_dim)`.
#[derive(Debug, Clone)]
struct LayerCache {
    k: Tensor,
    v: Tensor,
}

/// Splits `(L, d)` into `(heads, L, head_dim)`.
fn split_heads(x: &Tensor, heads: usize) -> CoreResult<Tensor> {
    let (l, d) = x.dims2()?;
    Ok(x.reshape((l, heads, d / heads))?.transpose(0, 1)?.contiguous()?)
}

/// Reverses [`split_heads`].
fn merge_heads(x: &Tensor) -> CoreResult<Tensor> {
    let (h, l, hd) = x.dims3()?;
    Ok(x.transpose(0, 1)?.reshape((l, h * hd))?)
}

/// Runs the block stack over `x` (`(L, d)`). When `cache` is given, `x`
/// holds only new rows appended after `cache_len` already-cached ones;
/// the caches are extended in place. `mask` applies to fresh rows only.
fn run_blocks(
    params: &LMParams,
    mut x: Tensor,
    mask: Option<&Tensor>,
    cache: Option<&mut Vec<LayerCache>>,
) -> CoreResult<Tensor> {
    let cfg = &params.config;
    let heads = cfg.heads;
    let head_dim = cfg.embed_dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut cache = cache;

    for i in 0..cfg.layers {
        let p = format!("blocks.{i}");
        let normed = layer_norm(
            &x,
            &params.tensor(&format!("{p}.ln1.weight"))?,
            &params.tensor(&format!("{p}.ln1.bias"))?,
        )?;
        let q = linear(
            &normed,
            &params.tensor(&format!("{p}.attn.q.weight"))?,
            &params.tensor(&format!("{p}.attn.q.bias"))?,
        )?;
        let k = linear(
            &normed,
            &params.tensor(&format!("{p}.attn.k.weight"))?,
            &params.tensor(&format!("{p}.attn.k.bias"))?,
        )?;
        let v = linear(
            &normed,
            &params.tensor(&format!("{p}.attn.v.weight"))?,
            &params.tensor(&format!("{p}.attn.v.bias"))?,
        )?;
        let q = split_heads(&q, heads)?;
        let mut k = split_heads(&k, heads)?;
        let mut v = split_heads(&v, heads)?;
        if let Some(cache) = cache.as_deref_mut() {
            if let Some(layer) = cache.get_mut(i) {
                k = Tensor::cat(&[&layer.k, &k], 1)?.contiguous()?;
                v = Tensor::cat(&[&layer.v, &v], 1)?.contiguous()?;
                *layer = LayerCache { k: k.clone(), v: v.clone() };
            } else {
                cache.push(LayerCache { k: k.clone(), v: v.clone() });
            }
        }
        let mut scores = (q.matmul(&k.transpose(1, 2)?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = softmax(&scores, D::Minus1)?;
        let ctx = merge_heads(&attn.matmul(&v)?)?;
        let ctx = linear(
            &ctx,
            &params.tensor(&format!("{p}.attn.o.weight"))?,
            &params.tensor(&format!("{p}.attn.o.bias"))?,
        )?;
        x = x.add(&ctx)?;

        let normed = layer_norm(
            &x,
            &params.tensor(&format!("{p}.ln2.weight"))?,
            &params.tensor(&format!("{p}.ln2.bias"))?,
        )?;
        let h = linear(
            &normed,
            &params.tensor(&format!("{p}.ffn.w1.weight"))?,
            &params.tensor(&format!("{p}.ffn.w1.bias"))?,
        )?
        .gelu_erf()?;
        let h = linear(
            &h,
            &params.tensor(&format!("{p}.ffn.w2.weight"))?,
            &params.tensor(&format!("{p}.ffn.w2.bias"))?,
        )?;
        x = x.add(&h)?;
    }
    Ok(x)
}

fn project_logits(params: &LMParams, x: &Tensor) -> CoreResult<Tensor> {
    let normed = layer_norm(
        x,
        &params.tensor("ln_f.weight")?,
        &params.tensor("ln_f.bias")?,
    )?;
    linear(
        &normed,
        &params.tensor("head.weight")?,
        &params.tensor("head.bias")?,
    )
}

/// Full causal forward pass. Returns `(|z_txt| + 1 + |z_ac|, N_ac + 3)`
/// logits; row `t` is the next-token distribution after consuming inputs
/// `0..=t` (see the module docs for the indexing convention).
///
/// # Errors
///
/// [`CoreError::Contract`] on vocabulary mismatch or length overflow.
pub fn lm_forward(
    params: &LMParams,
    z_txt: &TokenSequence,
    z_ac: &TokenSequence,
) -> CoreResult<Tensor> {
    check_inputs(&params.config, z_txt, z_ac)?;
    let x = embed_sequence(params, z_txt, z_ac)?;
    let len = x.dims2()?.0;
    let mask = causal_mask(len, params.dtype, &params.device)?;
    let h = run_blocks(params, x, Some(&mask), None)?;
    project_logits(params, &h)
}

/// Teacher-forcing cross-entropy in nats, averaged over the `|z_ac| + 1`
/// predictions of the acoustic tokens and the terminal EOS. Text
/// positions condition but are not scored. Returned as a scalar tensor on
/// the autodiff graph.
///
/// # Errors
///
/// [`CoreError::Contract`] when `z_ac` is empty or inputs are invalid.
pub fn teacher_forcing_loss(
    params: &LMParams,
    z_txt: &TokenSequence,
    z_ac: &TokenSequence,
) -> CoreResult<Tensor> {
    if z_ac.is_empty() {
        return Err(CoreError::contract(
            "teacher forcing needs at least one acoustic target token",
        ));
    }
    let logits = lm_forward(params, z_txt, z_ac)?;
    // Predictions for the acoustic segment start at the SEP row: row
    // index(SEP) predicts z_ac[0], ..., the last acoustic row predicts EOS.
    let sep_row = z_txt.len();
    let rows = logits.i((sep_row.., ..))?;
    let log_probs = log_softmax(&rows, D::Minus1)?;
    let mut targets: Vec<u32> = z_ac.ids.clone();
    targets.push(params.config.specials.eos);
    let target_t = Tensor::from_vec(targets, z_ac.len() + 1, &params.device)?;
    let picked = log_probs
        .gather(&target_t.unsqueeze(1)?, 1)?
        .squeeze(1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Scalar convenience wrapper over [`teacher_forcing_loss`].
pub fn teacher_forcing_loss_value(
    params: &LMParams,
    z_txt: &TokenSequence,
    z_ac: &TokenSequence,
) -> CoreResult<f64> {
    Ok(teacher_forcing_loss(params, z_txt, z_ac)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

/// Nucleus filter: keeps the smallest prefix of probability-sorted tokens
/// whose cumulative mass reaches `p` (ties broken by ascending token id),
/// zeroes the rest, renormalizes.
///
/// # Errors
///
/// [`CoreError::Contract`] when `p` is outside `(0, 1]` or `probs` does
/// not sum to 1 within 1e-6.
pub fn top_p_filter(probs: &[f64], p: f64) -> CoreResult<Vec<f64>> {
    if !(p > 0.0) {
        return Err(CoreError::contract(format!("top-p mass must be > 0, got {p}")));
    }
    if p > 1.0 {
        return Err(CoreError::contract(format!("top-p mass must be <= 1, got {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CoreError::contract(format!(
            "probabilities sum to {total}, expected 1"
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    let mut cum = 0.0;
    for &i in &order {
        keep[i] = true;
        cum += probs[i];
        // Tolerance so exact-boundary cases (0.6 + 0.3 vs 0.9) are not
        // decided by accumulated rounding.
        if cum >= p - 1e-9 {
            break;
        }
    }
    if keep.iter().all(|&k| k) {
        return Ok(probs.to_vec()); // full nucleus: exact identity
    }
    let mass: f64 = probs
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&q, _)| q)
        .sum();
    Ok(probs
        .iter()
        .zip(&keep)
        .map(|(&q, &k)| if k { q / mass } else { 0.0 })
        .collect())
}

/// Draws an index from a normalized distribution via inverse CDF.
pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut cum = 0.0;
    for (i, &q) in probs.iter().enumerate() {
        cum += q;
        if u < cum {
            return i;
        }
    }
    // Rounding may leave cum fractionally below 1; fall back to the last
    // index with support.
    probs
        .iter()
        .rposition(|&q| q > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Result of autoregressive generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated acoustic tokens (prompt and specials excluded).
    pub tokens: TokenSequence,
    /// True when the length cap cut generation before EOS.
    pub truncated: bool,
}

/// Samples an acoustic continuation of `z_ac_prompt` with nucleus mass
/// `top_p` and a caller-owned seed. SEP and PAD are masked out of every
/// step's distribution; generation stops at EOS or after `max_len` new
/// tokens (the latter sets [`Generation::truncated`]). Deterministic given
/// the seed. Uses per-layer KV caches: each step encodes one token.
///
/// # Errors
///
/// [`CoreError::Contract`] on invalid `top_p`, vocabulary mismatch, or a
/// prompt that already exceeds `max_positions`.
pub fn generate(
    params: &LMParams,
    z_txt: &TokenSequence,
    z_ac_prompt: &TokenSequence,
    top_p: f64,
    seed: u64,
    max_len: usize,
) -> CoreResult<Generation> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(CoreError::contract(format!(
            "top_p must lie in (0, 1], got {top_p}"
        )));
    }
    check_inputs(&params.config, z_txt, z_ac_prompt)?;
    let cfg = &params.config;
    let device = &params.device;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Prefill over [z_txt][SEP][prompt], filling the caches.
    let x = embed_sequence(params, z_txt, z_ac_prompt)?;
    let prefill_len = x.dims2()?.0;
    let mask = causal_mask(prefill_len, params.dtype, device)?;
    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.layers);
    let h = run_blocks(params, x, Some(&mask), Some(&mut caches))?;
    let mut last_logits = project_logits(params, &h.i((prefill_len - 1.., ..))?)?;

    let ac_embed = params.tensor("ac_embed.weight")?;
    let scale = (cfg.embed_dim as f64).sqrt();
    let mut out: Vec<u32> = Vec::new();
    let mut truncated = false;

    loop {
        if out.len() >= max_len {
            truncated = true;
            break;
        }
        if prefill_len + out.len() >= cfg.max_positions {
            truncated = true;
            break;
        }
        // One row of logits → masked, normalized, nucleus-filtered probs.
        let row: Vec<f64> = last_logits
            .to_dtype(DType::F64)?
            .i((0, ..))?
            .to_vec1::<f64>()?;
        let mut masked = row;
        masked[cfg.specials.sep as usize] = f64::NEG_INFINITY;
        masked[cfg.specials.pad as usize] = f64::NEG_INFINITY;
        let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = masked.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let filtered = top_p_filter(&probs, top_p)?;
        let next = sample_index(&filtered, &mut rng) as u32;

        if next == cfg.specials.eos {
            break;
        }
        out.push(next);

        // Encode the one new token at its acoustic-segment position.
        let pos = z_ac_prompt.len() + out.len(); // SEP is 0, tokens are 1..
        let idx = Tensor::from_vec(vec![next], 1, device)?;
        let emb = (ac_embed.index_select(&idx, 0)? * scale)?;
        let emb = emb.add(&sinusoid_rows(&[pos], cfg.embed_dim, params.dtype, device)?)?;
        let h = run_blocks(params, emb, None, Some(&mut caches))?;
        last_logits = project_logits(params, &h)?;
    }

    Ok(Generation {
        tokens: TokenSequence::new(out, cfg.acoustic_vocab as u32)?,
        truncated,
    })
}

// --- Training -----------------------------------------------------------------

/// Options for the full-batch training loop.
#[derive(Debug, Clone)]
pub struct LmTrainOptions {
    /// Optimizer steps to run.
    pub steps: usize,
    /// Base learning rate fed to the schedule.
    pub base_lr: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    /// Stop early once the per-target mean loss drops below this.
    pub early_stop_loss: Option<f64>,
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        LmTrainOptions {
            steps: 2000,
            base_lr: 1e-3,
            schedule: LrSchedule::WarmupInvSqrt { warmup_steps: 50 },
            max_grad_norm: Some(1.0),
            early_stop_loss: None,
        }
    }
}

/// Corpus-mean teacher-forcing loss (nats per target position) as a graph
/// tensor: per-item losses weighted by their target counts.
pub fn corpus_loss(
    params: &LMParams,
    corpus: &[(TokenSequence, TokenSequence)],
) -> CoreResult<Tensor> {
    if corpus.is_empty() {
        return Err(CoreError::contract("training corpus is empty"));
    }
    let total_targets: usize = corpus.iter().map(|(_, ac)| ac.len() + 1).sum();
    let mut acc: Option<Tensor> = None;
    for (txt, ac) in corpus {
        let weight = (ac.len() + 1) as f64 / total_targets as f64;
        let item = (teacher_forcing_loss(params, txt, ac)? * weight)?;
        acc = Some(match acc {
            Some(t) => t.add(&item)?,
            None => item,
        });
    }
    Ok(acc.expect("non-empty corpus"))
}

/// Corpus-mean loss and its gradient, accumulated one utterance at a
/// time: each item is backpropagated separately and the per-parameter
/// gradients are summed, so peak memory is one item's graph rather than
/// the whole corpus's. The sum equals the gradient of [`corpus_loss`]
/// up to floating-point association.
pub fn corpus_loss_and_grads(
    params: &LMParams,
    corpus: &[(TokenSequence, TokenSequence)],
) -> CoreResult<(f64, BTreeMap<String, Tensor>)> {
    if corpus.is_empty() {
        return Err(CoreError::contract("training corpus is empty"));
    }
    let total_targets: usize = corpus.iter().map(|(_, ac)| ac.len() + 1).sum();
    let mut value = 0.0f64;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for (txt, ac) in corpus {
        let weight = (ac.len() + 1) as f64 / total_targets as f64;
        let loss = (teacher_forcing_loss(params, txt, ac)? * weight)?;
        value += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        for (name, var) in params.params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                // Detach so the accumulator does not keep this item's
                // graph alive once its backward pass is done.
                let summed = match acc.remove(name) {
                    Some(prev) => prev.add(g)?.detach(),
                    None => g.detach(),
                };
                acc.insert(name.clone(), summed);
            }
        }
    }
    Ok((value, acc))
}

/// Full-batch teacher-forcing training. Each step accumulates the
/// weighted corpus gradient item by item, clips, and applies Adam at the
/// scheduled rate (`start_step` offsets the schedule for resumed runs).
/// Returns the per-step loss history, which also drives early stopping.
///
/// # Errors
///
/// [`CoreError::Divergence`] on a non-finite loss or gradient norm.
pub fn lm_train_full_batch(
    params: &LMParams,
    opt: &mut Adam,
    corpus: &[(TokenSequence, TokenSequence)],
    opts: &LmTrainOptions,
    start_step: u64,
) -> CoreResult<Vec<f64>> {
    let mut history = Vec::with_capacity(opts.steps);
    for s in 0..opts.steps {
        let step = start_step + s as u64;
        let (value, grads) = corpus_loss_and_grads(params, corpus)?;
        let value = crate::optim::check_finite(value, "language-model loss")?;
        let lr = opts.schedule.lr_at(opts.base_lr, step);
        opt.step_named(&params.params, &grads, lr, opts.max_grad_norm)?;
        history.push(value);
        if let Some(stop) = opts.early_stop_loss {
            if value < stop {
                break;
            }
        }
        if s % 50 == 0 {
            log::info!("lm step {step}: loss {value:.4} (lr {lr:.2e})");
        }
    }
    Ok(history)
}

// --- Checkpointing ------------------------------------------------------------

/// Checkpoint kind tag for this model.
pub const LM_KIND: &str = "lm";

/// Packs parameters (and optionally optimizer state) into a checkpoint.
pub fn lm_to_checkpoint(
    params: &LMParams,
    step: u64,
    opt: Option<&Adam>,
) -> CoreResult<Checkpoint> {
    let config = serde_json::to_value(&params.config)
        .map_err(|e| CoreError::format(format!("config serialization: {e}")))?;
    let mut ckpt = Checkpoint::new(LM_KIND, step, config);
    params.params.write_to(&mut ckpt)?;
    if let Some(opt) = opt {
        opt.write_to(&mut ckpt, "opt")?;
    }
    Ok(ckpt)
}

/// Rebuilds a model from a checkpoint produced by [`lm_to_checkpoint`].
/// The result is bit-exact with the saved parameters.
pub fn lm_from_checkpoint(ckpt: &Checkpoint) -> CoreResult<LMParams> {
    ckpt.expect_kind(LM_KIND)?;
    let config: LMConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| CoreError::format(format!("checkpoint config: {e}")))?;
    // Seed is irrelevant: every tensor is overwritten from the file.
    let params = build_lm(&config, 0)?;
    params.params.read_from(ckpt)?;
    Ok(params)
}

// --- Gradient verification ----------------------------------------------------

/// Compares analytic gradients of the teacher-forcing loss against
/// central finite differences on `n_slices` randomly chosen parameter
/// coordinates of an f64 model. Returns the worst relative error.
pub fn lm_gradient_check(
    config: &LMConfig,
    seed: u64,
    n_slices: usize,
    eps: f64,
) -> CoreResult<f64> {
    let params = build_lm_with_dtype(config, seed, DType::F64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);

    // Fixed random token pair within the configured vocabularies.
    let txt: Vec<u32> = (0..6)
        .map(|_| rng.gen_range(0..config.text_vocab as u32))
        .collect();
    let ac: Vec<u32> = (0..9)
        .map(|_| rng.gen_range(0..config.acoustic_vocab as u32))
        .collect();
    let z_txt = TokenSequence::new(txt, config.text_vocab as u32)?;
    let z_ac = TokenSequence::new(ac, config.acoustic_vocab as u32)?;

    let loss = teacher_forcing_loss(&params, &z_txt, &z_ac)?;
    let grads = loss.backward()?;

    let names: Vec<String> = params.params.iter().map(|(n, _)| n.clone()).collect();
    let mut worst = 0.0f64;
    for _ in 0..n_slices {
        let name = &names[rng.gen_range(0..names.len())];
        let var = params.params.get(name)?;
        let n = var.elem_count();
        let flat_idx = rng.gen_range(0..n);

        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[flat_idx],
            None => 0.0,
        };

        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let dims = var.dims().to_vec();
        let eval_at = |value: f64| -> CoreResult<f64> {
            let mut perturbed = base.clone();
            perturbed[flat_idx] = value;
            var.set(&Tensor::from_vec(perturbed, dims.as_slice(), &params.device)?)?;
            let l = teacher_forcing_loss(&params, &z_txt, &z_ac)?
                .to_scalar::<f64>()?;
            Ok(l)
        };
        let x0 = base[flat_idx];
        let plus = eval_at(x0 + eps)?;
        let minus = eval_at(x0 - eps)?;
        eval_at(x0)?; // restore
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
