//! Objective evaluation toolkit: text normalization, edit distance,
//! WER/CER, speaker cosine similarity, speaking rate, rate binning,
//! Pearson correlation, corpus aggregation, and report serialization.
//!
//! Conventions fixed here (callers rely on them):
//! - Text normalization removes punctuation (any character that is
//!   neither alphanumeric nor whitespace), collapses whitespace, and
//!   case-folds.
//! - WER tokenizes normalized text on whitespace; CER uses the characters
//!   of normalized text *with spaces dropped*.
//! - Corpus aggregation defaults to macro pooling (mean of per-utterance
//!   rates); micro pooling (total edits over total reference units) is
//!   available behind [`Pooling::Micro`].

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::speaker::SpeakerVec;

/// One utterance's evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Identifier of the evaluated utterance.
    pub utterance_id: String,
    /// Ground-truth transcript.
    pub ref_text: String,
    /// Hypothesis transcript (ASR output for generated audio).
    pub hyp_text: String,
    /// Word error rate (≥ 0; may exceed 1).
    pub wer: f64,
    /// Character error rate (≥ 0; may exceed 1).
    pub cer: f64,
    /// Speaker cosine similarity in [-1, 1], when measured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spk_sim: Option<f64>,
    /// Speaking rate of the prompt, words/sec.
    pub rate_prompt: f64,
    /// Speaking rate of the generated audio, words/sec.
    pub rate_generated: f64,
}

/// How corpus-level error rates are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean of per-utterance rates (the default).
    Macro,
    /// Total edit count divided by total reference units.
    Micro,
}

/// Corpus-level aggregate written as the last line of a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    /// Number of evaluated utterances.
    pub count: usize,
    /// Pooled WER.
    pub wer: f64,
    /// Pooled CER.
    pub cer: f64,
    /// Mean speaker similarity over records that have one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spk_sim: Option<f64>,
    /// Pearson correlation between prompt and generated speaking rates,
    /// when both have nonzero variance.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rate_pearson: Option<f64>,
    /// Pooling mode used for `wer`/`cer`.
    pub pooling: Pooling,
    /// Hex SHA-256 of the resolved run configuration, when run via the
    /// CLI (reports must be reproducible from config + seed alone).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_sha256: Option<String>,
}

/// Removes punctuation, collapses whitespace runs to single spaces, trims,
/// and case-folds. Punctuation means any character that is neither
/// alphanumeric nor whitespace, so symbols and combining marks are
/// stripped too. Idempotent.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            for lc in c.to_lowercase() {
                out.push(lc);
            }
        }
        // Everything else (punctuation, symbols, marks) is dropped.
    }
    out
}

/// Levenshtein distance with unit insert/delete/substitute costs, via the
/// standard two-row dynamic program (O(|a|·|b|) time, O(min) memory).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Keep the shorter sequence on the row axis.
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0usize; short.len() + 1];
    for (i, lc) in long.iter().enumerate() {
        curr[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let sub_cost = if lc == sc { 0 } else { 1 };
            curr[j + 1] = (prev[j] + sub_cost) // substitute / match
                .min(prev[j + 1] + 1) // delete from `long`
                .min(curr[j] + 1); // insert into `long`
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// Evaluation unit for [`error_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorUnit {
    /// Whitespace-delimited words of normalized text.
    Word,
    /// Characters of normalized text, spaces dropped.
    Char,
}

/// Normalized edit distance between reference and hypothesis, per
/// [`ErrorUnit`]. Both texts are normalized internally.
///
/// # Errors
///
/// [`CoreError::Contract`] when the reference normalizes to nothing (the
/// rate would be undefined).
pub fn error_rate(reference: &str, hypothesis: &str, unit: ErrorUnit) -> CoreResult<f64> {
    let (dist, ref_len) = error_counts(reference, hypothesis, unit)?;
    Ok(dist as f64 / ref_len as f64)
}

/// Raw (edit distance, reference length) pair behind [`error_rate`];
/// exposed so micro pooling can sum numerators and denominators.
pub fn error_counts(
    reference: &str,
    hypothesis: &str,
    unit: ErrorUnit,
) -> CoreResult<(usize, usize)> {
    let ref_norm = normalize_text(reference);
    let hyp_norm = normalize_text(hypothesis);
    match unit {
        ErrorUnit::Word => {
            let ref_tokens: Vec<&str> = ref_norm.split_whitespace().collect();
            let hyp_tokens: Vec<&str> = hyp_norm.split_whitespace().collect();
            if ref_tokens.is_empty() {
                return Err(CoreError::contract(
                    "reference text is empty after normalization",
                ));
            }
            Ok((edit_distance(&ref_tokens, &hyp_tokens), ref_tokens.len()))
        }
        ErrorUnit::Char => {
            let ref_chars: Vec<char> = ref_norm.chars().filter(|c| *c != ' ').collect();
            let hyp_chars: Vec<char> = hyp_norm.chars().filter(|c| *c != ' ').collect();
            if ref_chars.is_empty() {
                return Err(CoreError::contract(
                    "reference text is empty after normalization",
                ));
            }
            Ok((edit_distance(&ref_chars, &hyp_chars), ref_chars.len()))
        }
    }
}

/// Cosine similarity between two speaker vectors.
///
/// # Errors
///
/// [`CoreError::Contract`] when the vectors come from different embedders
/// (their spaces are not comparable) or differ in dimension.
pub fn cosine_similarity(u: &SpeakerVec, v: &SpeakerVec) -> CoreResult<f64> {
    if u.embedder_id != v.embedder_id {
        return Err(CoreError::contract(format!(
            "cannot compare embeddings from '{}' and '{}'",
            u.embedder_id, v.embedder_id
        )));
    }
    if u.values.len() != v.values.len() {
        return Err(CoreError::contract("speaker vector dimension mismatch"));
    }
    let dot: f64 = u
        .values
        .iter()
        .zip(v.values.iter())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    let nu: f64 = u.values.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.values.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    Ok(dot / (nu * nv))
}

/// Words per second: whitespace word count of `transcript` over
/// `duration` seconds. An empty transcript has rate 0.
///
/// # Errors
///
/// [`CoreError::Contract`] on non-positive duration.
pub fn speaking_rate(transcript: &str, duration: f64) -> CoreResult<f64> {
    if duration <= 0.0 {
        return Err(CoreError::contract(format!(
            "duration must be positive, got {duration}"
        )));
    }
    Ok(transcript.split_whitespace().count() as f64 / duration)
}

/// Partitions records into `n_bins` equally spaced bins over the observed
/// prompt-rate range and uniformly samples at most `cap` records per bin
/// (deterministic for a fixed seed). Output preserves record order within
/// each bin and orders bins low to high.
///
/// # Errors
///
/// [`CoreError::Contract`] when `records` is empty or `n_bins` is zero.
pub fn bin_by_rate(
    records: &[EvalRecord],
    n_bins: usize,
    cap: usize,
    seed: u64,
) -> CoreResult<Vec<EvalRecord>> {
    if records.is_empty() {
        return Err(CoreError::contract("bin_by_rate on empty record set"));
    }
    if n_bins == 0 {
        return Err(CoreError::contract("n_bins must be at least 1"));
    }
    let rates: Vec<f64> = records.iter().map(|r| r.rate_prompt).collect();
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / n_bins as f64;

    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &r) in rates.iter().enumerate() {
        let b = if width > 0.0 {
            (((r - min) / width) as usize).min(n_bins - 1)
        } else {
            0 // all rates equal: a single occupied bin
        };
        bins[b].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for members in bins {
        if members.len() <= cap {
            kept.extend(members);
        } else {
            // Uniform sample without replacement, preserving record order.
            let mut pool = members;
            let mut chosen = Vec::with_capacity(cap);
            for _ in 0..cap {
                let idx = rng.gen_range(0..pool.len());
                chosen.push(pool.swap_remove(idx));
            }
            chosen.sort_unstable();
            kept.extend(chosen);
        }
    }
    Ok(kept.into_iter().map(|i| records[i].clone()).collect())
}

/// Sample Pearson correlation coefficient.
///
/// # Errors
///
/// [`CoreError::Contract`] on length mismatch, fewer than two points, or
/// zero variance in either argument.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> CoreResult<f64> {
    if x.len() != y.len() {
        return Err(CoreError::contract("pearson_corr length mismatch"));
    }
    if x.len() < 2 {
        return Err(CoreError::contract("pearson_corr needs at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::contract(
            "pearson_corr undefined under zero variance",
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Aggregates per-utterance records into a [`Summary`].
pub fn summarize(records: &[EvalRecord], pooling: Pooling) -> CoreResult<Summary> {
    if records.is_empty() {
        return Err(CoreError::contract("cannot summarize an empty record set"));
    }
    let n = records.len() as f64;
    let (wer, cer) = match pooling {
        Pooling::Macro => (
            records.iter().map(|r| r.wer).sum::<f64>() / n,
            records.iter().map(|r| r.cer).sum::<f64>() / n,
        ),
        Pooling::Micro => {
            let mut word = (0usize, 0usize);
            let mut chr = (0usize, 0usize);
            for r in records {
                let (d, l) = error_counts(&r.ref_text, &r.hyp_text, ErrorUnit::Word)?;
                word.0 += d;
                word.1 += l;
                let (d, l) = error_counts(&r.ref_text, &r.hyp_text, ErrorUnit::Char)?;
                chr.0 += d;
                chr.1 += l;
            }
            (
                word.0 as f64 / word.1 as f64,
                chr.0 as f64 / chr.1 as f64,
            )
        }
    };
    let sims: Vec<f64> = records.iter().filter_map(|r| r.spk_sim).collect();
    let spk_sim = if sims.is_empty() {
        None
    } else {
        Some(sims.iter().sum::<f64>() / sims.len() as f64)
    };
    let xs: Vec<f64> = records.iter().map(|r| r.rate_prompt).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.rate_generated).collect();
    let rate_pearson = pearson_corr(&xs, &ys).ok();
    Ok(Summary {
        count: records.len(),
        wer,
        cer,
        spk_sim,
        rate_pearson,
        pooling,
        config_sha256: None,
    })
}

/// Writes a JSON-lines evaluation report: one [`EvalRecord`] per line,
/// then the [`Summary`] as the final line.
pub fn write_report(path: &Path, records: &[EvalRecord], summary: &Summary) -> CoreResult<()> {
    let mut file = fs::File::create(path)?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| CoreError::format(format!("record serialization: {e}")))?;
        writeln!(file, "{line}")?;
    }
    let line = serde_json::to_string(summary)
        .map_err(|e| CoreError::format(format!("summary serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Writes the (rate_prompt, rate_generated) pairs as a two-column CSV
/// with a header, for scatter plotting.
pub fn write_rate_csv(path: &Path, records: &[EvalRecord]) -> CoreResult<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "rate_prompt,rate_generated")?;
    for r in records {
        writeln!(file, "{},{}", r.rate_prompt, r.rate_generated)?;
    }
    Ok(())
}

/// Paired bootstrap over (system A, system B) metric pairs: resamples the
/// pair list with replacement `n_resamples` times and returns the mean
/// A−B difference with a 95% percentile interval. Deterministic for a
/// fixed seed.
///
/// # Errors
///
/// [`CoreError::Contract`] on an empty pair list or zero resamples.
pub fn paired_bootstrap(
    pairs: &[(f64, f64)],
    n_resamples: usize,
    seed: u64,
) -> CoreResult<(f64, f64, f64)> {
    if pairs.is_empty() {
        return Err(CoreError::contract("paired_bootstrap on empty pair list"));
    }
    if n_resamples == 0 {
        return Err(CoreError::contract("n_resamples must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        let mut acc = 0.0;
        for _ in 0..pairs.len() {
            let (a, b) = pairs[rng.gen_range(0..pairs.len())];
            acc += a - b;
        }
        means.push(acc / pairs.len() as f64);
    }
    means.sort_by(|a, b| a.total_cmp(b));
    let mean = pairs.iter().map(|(a, b)| a - b).sum::<f64>() / pairs.len() as f64;
    let lo = means[((n_resamples as f64) * 0.025) as usize];
    let hi = means[(((n_resamples as f64) * 0.975) as usize).min(n_resamples - 1)];
    Ok((mean, lo, hi))
}
