//! Subword text tokenizer: trains a byte-pair-merge vocabulary over a
//! transcript corpus and encodes/decodes text to/from token sequences.
//!
//! BPE is used in place of WordPiece proper — at this scale the two are
//! interchangeable and BPE's merge semantics are simpler; the interface
//! hides the choice. The space character is part of the character
//! alphabet (merges may cross word boundaries), which makes decoding a
//! plain concatenation of token strings.
//!
//! Encoding normalizes first: lowercase, whitespace collapsed to single
//! spaces, trimmed. `decode(encode(x))` therefore reproduces the
//! *normalized* form of `x` exactly, for any text covered by the training
//! character set; characters outside it map to [`TextVocab::UNK`].
//!
//! Vocabulary file layout: UTF-8 text, one token string per line (lines
//! are read verbatim — tokens may contain spaces), then a blank separator
//! line, then one `left right` index pair per line describing the merges
//! in training order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{CoreError, CoreResult};
use crate::TokenSequence;

/// Default cap on encoded text length; longer inputs are rejected at the
/// pipeline boundary rather than silently truncated (truncation would
/// corrupt the text condition).
pub const DEFAULT_MAX_TEXT_LEN: usize = 256;

/// A trained subword vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    /// Token strings, dense ids `0..size`. Index [`TextVocab::PAD`] and
    /// [`TextVocab::UNK`] are reserved; single characters follow, then
    /// merged tokens in training order.
    tokens: Vec<String>,
    /// Merge rules as `(left_id, right_id)` in application order.
    merges: Vec<(u32, u32)>,
    /// Map from token string to id (derived, not serialized).
    index: HashMap<String, u32>,
}

impl TextVocab {
    /// Padding token id.
    pub const PAD: u32 = 0;
    /// Unknown-character token id.
    pub const UNK: u32 = 1;

    /// Display strings of the two specials.
    const PAD_STR: &'static str = "<pad>";
    const UNK_STR: &'static str = "<unk>";

    /// Vocabulary size `N_txt`.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// The token string for `id`, if in range.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn rebuild_index(tokens: &[String]) -> HashMap<String, u32> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect()
    }
}

/// Lowercases, trims, and collapses all whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// Trains a BPE vocabulary of exactly `vocab_size` entries (2 specials +
/// character set + merged tokens).
///
/// Merges are greedy by pair frequency over the normalized corpus; ties
/// break lexicographically on the (left, right) token strings, so training
/// is deterministic given corpus order.
///
/// # Errors
///
/// [`CoreError::Contract`] when the corpus is empty, `vocab_size` is
/// smaller than specials + character set, or the corpus cannot support
/// enough merges to reach `vocab_size`.
pub fn train_vocab(corpus: &[String], vocab_size: usize) -> CoreResult<TextVocab> {
    let normalized: Vec<String> = corpus.iter().map(|s| normalize(s)).collect();
    if normalized.iter().all(|s| s.is_empty()) {
        return Err(CoreError::contract("training corpus is empty"));
    }

    // Character alphabet, sorted for dense deterministic ids.
    let charset: BTreeSet<char> = normalized.iter().flat_map(|s| s.chars()).collect();
    let base = 2 + charset.len();
    if vocab_size < base {
        return Err(CoreError::contract(format!(
            "vocab_size {vocab_size} < {base} (2 specials + {} characters)",
            charset.len()
        )));
    }

    let mut tokens: Vec<String> = Vec::with_capacity(vocab_size);
    tokens.push(TextVocab::PAD_STR.to_string());
    tokens.push(TextVocab::UNK_STR.to_string());
    tokens.extend(charset.iter().map(|c| c.to_string()));
    let mut index = TextVocab::rebuild_index(&tokens);

    // Working corpus as id sequences.
    let mut seqs: Vec<Vec<u32>> = normalized
        .iter()
        .map(|s| s.chars().map(|c| index[&c.to_string()]).collect())
        .collect();

    let mut merges: Vec<(u32, u32)> = Vec::new();
    while tokens.len() < vocab_size {
        // Count adjacent pairs across all lines.
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts.into_iter().max_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                // Lexicographically smaller pair wins a frequency tie, so
                // compare reversed.
                let key_a = (&tokens[a.0 .0 as usize], &tokens[a.0 .1 as usize]);
                let key_b = (&tokens[b.0 .0 as usize], &tokens[b.0 .1 as usize]);
                key_b.cmp(&key_a)
            })
        });
        let Some(((left, right), _count)) = best else {
            return Err(CoreError::contract(format!(
                "corpus exhausted after {} tokens; cannot reach vocab_size {vocab_size}",
                tokens.len()
            )));
        };

        let merged = format!("{}{}", tokens[left as usize], tokens[right as usize]);
        let new_id = tokens.len() as u32;
        tokens.push(merged.clone());
        index.insert(merged, new_id);
        merges.push((left, right));

        // Apply the merge to every line.
        for seq in &mut seqs {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }

    Ok(TextVocab {
        tokens,
        merges,
        index,
    })
}

/// Encodes text: normalize, map characters to ids (unknown → UNK), then
/// apply the trained merges in order. All output ids are `< N_txt`.
pub fn encode(text: &str, vocab: &TextVocab) -> TokenSequence {
    let normalized = normalize(text);
    let mut seq: Vec<u32> = normalized
        .chars()
        .map(|c| {
            vocab
                .index
                .get(&c.to_string())
                .copied()
                .unwrap_or(TextVocab::UNK)
        })
        .collect();
    for &(left, right) in &vocab.merges {
        let merged_id = vocab.index[&format!(
            "{}{}",
            vocab.tokens[left as usize], vocab.tokens[right as usize]
        )];
        let mut out = Vec::with_capacity(seq.len());
        let mut i = 0;
        while i < seq.len() {
            if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                out.push(merged_id);
                i += 2;
            } else {
                out.push(seq[i]);
                i += 1;
            }
        }
        seq = out;
    }
    TokenSequence {
        ids: seq,
        vocab_size: vocab.size() as u32,
    }
}

/// Decodes a token sequence back to text by concatenating token strings.
/// PAD decodes to nothing; UNK decodes to U+FFFD.
///
/// # Errors
///
/// [`CoreError::Contract`] when any id is outside the vocabulary.
pub fn decode(tokens: &TokenSequence, vocab: &TextVocab) -> CoreResult<String> {
    let mut out = String::new();
    for &id in &tokens.ids {
        match id {
            TextVocab::PAD => {}
            TextVocab::UNK => out.push('\u{FFFD}'),
            _ => {
                let s = vocab.token(id).ok_or_else(|| {
                    CoreError::contract(format!(
                        "token id {id} out of range for vocabulary of size {}",
                        vocab.size()
                    ))
                })?;
                out.push_str(s);
            }
        }
    }
    Ok(out)
}

/// Writes the vocabulary file (see module docs for the layout).
pub fn save_vocab(vocab: &TextVocab, path: &Path) -> CoreResult<()> {
    let mut out = String::new();
    for token in &vocab.tokens {
        out.push_str(token);
        out.push('\n');
    }
    out.push('\n'); // separator
    for &(l, r) in &vocab.merges {
        out.push_str(&format!("{l} {r}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a vocabulary file written by [`save_vocab`]; the round trip is
/// exact.
///
/// # Errors
///
/// [`CoreError::Format`] on missing specials, malformed merge lines, or a
/// missing separator.
pub fn load_vocab(path: &Path) -> CoreResult<TextVocab> {
    let content = fs::read_to_string(path)?;
    let fail = |msg: String| CoreError::format(format!("{}: {msg}", path.display()));
    let mut lines = content.split('\n');
    let mut tokens: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        if line.is_empty() {
            break; // separator (a real single-space token is " ", not "")
        }
        tokens.push(line.to_string());
    }
    if tokens.len() < 2 || tokens[0] != TextVocab::PAD_STR || tokens[1] != TextVocab::UNK_STR {
        return Err(fail("specials missing or out of place".into()));
    }
    let mut merges = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue; // trailing newline
        }
        let mut parts = line.split(' ');
        let parse = |p: Option<&str>| -> Result<u32, CoreError> {
            p.and_then(|v| v.parse::<u32>().ok())
                .ok_or_else(|| fail(format!("malformed merge line: {line:?}")))
        };
        let l = parse(parts.next())?;
        let r = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(fail(format!("malformed merge line: {line:?}")));
        }
        if l as usize >= tokens.len() || r as usize >= tokens.len() {
            return Err(fail(format!("merge indices out of range: {line:?}")));
        }
        merges.push((l, r));
    }
    let index = TextVocab::rebuild_index(&tokens);
    if index.len() != tokens.len() {
        return Err(fail("duplicate token strings".into()));
    }
    Ok(TextVocab {
        tokens,
        merges,
        index,
    })
}
