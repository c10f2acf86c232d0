//! Acoustic token quantizer: k-means over pooled frame features, plus
//! nearest-centroid assignment and codebook persistence.
//!
//! [`fit_kmeans`] uses k-means++ initialization (seeded, reproducible)
//! followed by Lloyd iterations until the assignment reaches a fixpoint or
//! [`MAX_KMEANS_ITERS`] is hit. Empty clusters are re-seeded from the
//! point farthest from its assigned centroid, so every centroid owns at
//! least one point at convergence. Within-cluster SSE is checked to be
//! non-increasing across iterations (debug assertion).
//!
//! Consecutive identical tokens are deliberately *not* deduplicated:
//! token count stays proportional to audio duration, which the
//! speaking-rate analysis depends on.
//!
//! Codebook file layout: magic `SEMC`, then `k` and `D` as little-endian
//! u32, then `k*D` row-major little-endian f32 centroids.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, CoreResult};
use crate::features::FrameMatrix;
use crate::TokenSequence;

/// Lloyd-iteration cap for [`fit_kmeans`].
pub const MAX_KMEANS_ITERS: usize = 300;

/// Magic bytes of the codebook file format.
const CODEBOOK_MAGIC: &[u8; 4] = b"SEMC";

/// A k-means codebook: `k` centroids of dimension `D`. The acoustic
/// vocabulary size is exactly `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `k x D` centroid matrix.
    pub centroids: Array2<f32>,
}

impl Codebook {
    /// Vocabulary size (number of centroids).
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Feature dimension.
    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }
}

/// Squared Euclidean distance between two feature rows.
fn dist_sq(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid to `row`; ties resolve to the lowest
/// index (strict `<` while scanning in order).
fn nearest_centroid(row: ArrayView1<f32>, centroids: &Array2<f32>) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (idx, c) in centroids.outer_iter().enumerate() {
        let d = dist_sq(row, c);
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    best
}

/// k-means++ seeding: the first centroid is uniform over rows; each
/// subsequent one is drawn with probability proportional to its squared
/// distance from the nearest already-chosen centroid.
fn kmeans_pp_init(rows: ArrayView2<f32>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let n = rows.nrows();
    let d = rows.ncols();
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&rows.row(first));

    let mut min_d: Vec<f64> = rows
        .outer_iter()
        .map(|r| dist_sq(r, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with chosen centroids; fall
            // back to the farthest (all distances zero → any point works,
            // keep it deterministic by scanning for the max).
            min_d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&rows.row(pick));
        for (i, r) in rows.outer_iter().enumerate() {
            let d_new = dist_sq(r, centroids.row(c));
            if d_new < min_d[i] {
                min_d[i] = d_new;
            }
        }
    }
    centroids
}

/// Fits a `k`-centroid codebook to pooled feature rows.
///
/// Deterministic for a fixed `(features, k, seed)` triple. Converges when
/// an entire Lloyd pass leaves the assignment unchanged, or after
/// [`MAX_KMEANS_ITERS`] passes.
///
/// # Errors
///
/// [`CoreError::Contract`] when `k` is zero or there are fewer rows than
/// centroids.
pub fn fit_kmeans(features: &FrameMatrix, k: usize, seed: u64) -> CoreResult<Codebook> {
    let rows = features.frames.view();
    let n = rows.nrows();
    if k == 0 {
        return Err(CoreError::contract("k must be at least 1"));
    }
    if n < k {
        return Err(CoreError::contract(format!(
            "cannot fit {k} centroids to {n} feature rows"
        )));
    }
    let d = rows.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(rows, k, &mut rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut prev_sse = f64::INFINITY;

    for _iter in 0..MAX_KMEANS_ITERS {
        // Assignment step.
        let mut changed = false;
        let mut sse = 0.0f64;
        for (i, row) in rows.outer_iter().enumerate() {
            let a = nearest_centroid(row, &centroids);
            sse += dist_sq(row, centroids.row(a));
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }
        debug_assert!(
            sse <= prev_sse + 1e-6 * prev_sse.abs().max(1.0),
            "k-means SSE increased: {prev_sse} -> {sse}"
        );
        prev_sse = sse;
        if !changed {
            break;
        }

        // Update step.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, row) in rows.outer_iter().enumerate() {
            let a = assignment[i];
            counts[a] += 1;
            for (j, &v) in row.iter().enumerate() {
                sums[[a, j]] += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster from the point farthest from
                // its current centroid.
                let (far, _) = rows
                    .outer_iter()
                    .enumerate()
                    .map(|(i, r)| (i, dist_sq(r, centroids.row(assignment[i]))))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty rows");
                centroids.row_mut(c).assign(&rows.row(far));
                // Claim the point so no other empty cluster grabs it too.
                assignment[far] = c;
            } else {
                for j in 0..d {
                    centroids[[c, j]] = (sums[[c, j]] / counts[c] as f64) as f32;
                }
            }
        }
    }

    Ok(Codebook { centroids })
}

/// Maps each feature row to the index of its nearest centroid (squared
/// Euclidean distance, ties to the lowest index). Output length equals the
/// frame count; the token vocabulary is the codebook size.
///
/// # Errors
///
/// [`CoreError::Contract`] on feature/codebook dimension mismatch.
pub fn quantize(features: &FrameMatrix, cb: &Codebook) -> CoreResult<TokenSequence> {
    if features.frames.ncols() != cb.feature_dim() {
        return Err(CoreError::contract(format!(
            "feature dim {} does not match codebook dim {}",
            features.frames.ncols(),
            cb.feature_dim()
        )));
    }
    let ids = features
        .frames
        .outer_iter()
        .map(|row| nearest_centroid(row, &cb.centroids) as u32)
        .collect();
    TokenSequence::new(ids, cb.k() as u32)
}

/// Serializes a codebook (see module docs for the layout). `load` of the
/// written file reproduces the centroids bit-exactly.
pub fn save_codebook(cb: &Codebook, path: &Path) -> CoreResult<()> {
    let mut out = Vec::with_capacity(12 + cb.k() * cb.feature_dim() * 4);
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&(cb.k() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.feature_dim() as u32).to_le_bytes());
    for &v in cb.centroids.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a codebook written by [`save_codebook`].
///
/// # Errors
///
/// [`CoreError::Format`] on bad magic, truncation, or trailing bytes;
/// [`CoreError::Io`] when the file cannot be read.
pub fn load_codebook(path: &Path) -> CoreResult<Codebook> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| CoreError::format(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(fail("file shorter than codebook header"));
    }
    if &bytes[0..4] != CODEBOOK_MAGIC {
        return Err(fail("bad magic (not a codebook file)"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + k * d * 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "size mismatch: expected {expected} bytes for k={k}, D={d}, found {}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(k * d);
    for chunk in bytes[12..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let centroids = Array2::from_shape_vec((k, d), values)
        .map_err(|e| fail(&format!("shape error: {e}")))?;
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite centroid entries"));
    }
    Ok(Codebook { centroids })
}
