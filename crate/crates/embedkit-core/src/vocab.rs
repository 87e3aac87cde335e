//! Byte-level subword tokenizer with ordered pair merges, per-language
//! fertility measurement, frequency-based vocabulary pruning, and embedding
//! row transfer across vocabulary changes.
//!
//! Every spec keeps all 256 byte tokens, so any UTF-8 input stays encodable
//! no matter how aggressively the merged tokens are pruned. Byte tokens are
//! rendered printable the usual way: bytes that are already printable map to
//! themselves, the rest map one-to-one into code points from U+0100 up, and
//! merged token strings are plain concatenations of those characters.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const CLS_TOKEN: &str = "<cls>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Reserved tokens, in id order when a spec is built from scratch.
pub const SPECIAL_TOKENS: [&str; 4] = [CLS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN];

pub const CLS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Bytes that render as themselves in token strings; everything else gets a
/// substitute code point so token strings stay printable.
fn byte_renders_as_self(b: u8) -> bool {
    matches!(b, 0x21..=0x7E | 0xA1..=0xAC | 0xAE..=0xFF)
}

/// The printable character standing in for one byte.
fn byte_char(b: u8) -> char {
    if byte_renders_as_self(b) {
        b as char
    } else {
        let offset = (0..b).filter(|&x| !byte_renders_as_self(x)).count() as u32;
        // 0x100 + offset stays far below the surrogate range.
        char::from_u32(0x100 + offset).unwrap()
    }
}

/// True when `c` is the stand-in character of some byte.
fn is_byte_char(c: char) -> bool {
    let cp = c as u32;
    if cp < 0x100 {
        byte_renders_as_self(cp as u8)
    } else {
        let substitutes = (0u16..256).filter(|&b| !byte_renders_as_self(b as u8)).count() as u32;
        (0x100..0x100 + substitutes).contains(&cp)
    }
}

/// The single-character token string of one byte.
pub fn byte_token(b: u8) -> String {
    byte_char(b).to_string()
}

/// An immutable tokenizer: an id-ordered vocabulary plus an ordered list of
/// pair-merge rules. The four specials and all 256 byte tokens are always
/// present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerSpec {
    tokens: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
}

impl TokenizerSpec {
    /// The minimal spec: specials, the 256 byte tokens, no merges. Every
    /// input tokenizes to one token per byte.
    pub fn byte_fallback() -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0u16..256).map(|b| byte_token(b as u8)));
        Self::from_parts(tokens, Vec::new()).expect("byte fallback spec is well-formed")
    }

    /// Build from an id-ordered token list and ordered merge rules,
    /// validating the invariants: unique tokens, specials and all byte
    /// tokens present, every merge's sides and concatenation in the
    /// vocabulary.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() > u32::MAX as usize {
            return Err(Error::invalid("tokens", "vocabulary too large for u32 ids"));
        }
        let mut token_to_id = BTreeMap::new();
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid("tokens", format!("token id {id} is empty")));
            }
            if token_to_id.insert(t.clone(), id as u32).is_some() {
                return Err(Error::DuplicateName(t.clone()));
            }
        }
        for s in SPECIAL_TOKENS {
            if !token_to_id.contains_key(s) {
                return Err(Error::invalid("tokens", format!("special token {s} missing")));
            }
        }
        for b in 0u16..256 {
            let t = byte_token(b as u8);
            if !token_to_id.contains_key(&t) {
                return Err(Error::invalid(
                    "tokens",
                    format!("byte token for 0x{b:02x} missing; byte fallback requires all 256"),
                ));
            }
        }
        for (a, b) in &merges {
            for side in [a, b] {
                if !token_to_id.contains_key(side) {
                    return Err(Error::UnknownName(side.clone()));
                }
            }
            let joined = format!("{a}{b}");
            if !token_to_id.contains_key(&joined) {
                return Err(Error::UnknownName(joined));
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
            merges,
        })
    }

    /// Extend with new merge rules; each pair's sides must already exist and
    /// the concatenated string becomes a fresh token with the next id.
    pub fn with_merges(mut self, pairs: &[(&str, &str)]) -> Result<Self> {
        for &(a, b) in pairs {
            if !self.token_to_id.contains_key(a) {
                return Err(Error::UnknownName(a.to_string()));
            }
            if !self.token_to_id.contains_key(b) {
                return Err(Error::UnknownName(b.to_string()));
            }
            let joined = format!("{a}{b}");
            if self.token_to_id.contains_key(&joined) {
                return Err(Error::DuplicateName(joined));
            }
            let id = self.tokens.len() as u32;
            self.token_to_id.insert(joined.clone(), id);
            self.tokens.push(joined);
            self.merges.push((a.to_string(), b.to_string()));
        }
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// All token strings in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Protected tokens survive any pruning: the specials and the 256 byte
    /// tokens (the fallback floor).
    pub fn is_protected(&self, id: u32) -> bool {
        match self.tokens.get(id as usize) {
            None => false,
            Some(t) => {
                SPECIAL_TOKENS.contains(&t.as_str())
                    || (t.chars().count() == 1 && t.chars().all(is_byte_char))
            }
        }
    }

    /// Deterministic byte-level encoding: the text's UTF-8 bytes become
    /// byte tokens, then each merge rule runs one left-to-right pass, fusing
    /// every adjacent occurrence of its pair (a freshly fused token is not
    /// re-examined by the same rule). Specials are never emitted.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        if text.is_empty() {
            return Vec::new();
        }
        let mut parts: Vec<String> = text.bytes().map(byte_token).collect();
        for (a, b) in &self.merges {
            let mut out = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && &parts[i] == a && &parts[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(core::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = out;
        }
        parts
            .iter()
            .map(|t| {
                *self
                    .token_to_id
                    .get(t)
                    .expect("merge outputs are validated into the vocabulary")
            })
            .collect()
    }
}

/// How fertility splits text into words. The choice is explicit because
/// token-per-word ratios are meaningless without it: whitespace splitting
/// suits segmented scripts, per-character suits unsegmented ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Segmenter {
    Whitespace,
    PerChar,
}

fn segment(text: &str, segmenter: Segmenter) -> Vec<String> {
    match segmenter {
        Segmenter::Whitespace => text.split_whitespace().map(str::to_string).collect(),
        Segmenter::PerChar => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

/// Tokens-per-word for one language.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FertilityRow {
    pub language: String,
    pub token_count: u64,
    pub word_count: u64,
    pub fertility: f64,
}

impl FertilityRow {
    pub fn new(language: impl Into<String>, token_count: u64, word_count: u64) -> Result<Self> {
        let language = language.into();
        if word_count == 0 {
            return Err(Error::invalid(
                "word_count",
                format!("language {language:?} has no words"),
            ));
        }
        if token_count == 0 {
            return Err(Error::invalid(
                "token_count",
                format!("language {language:?} has words but no tokens"),
            ));
        }
        Ok(Self {
            language,
            token_count,
            word_count,
            fertility: token_count as f64 / word_count as f64,
        })
    }
}

/// Per-language fertility rows (sorted by language tag) plus their
/// unweighted mean.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FertilityReport {
    pub rows: Vec<FertilityRow>,
    pub average: f64,
}

impl FertilityReport {
    /// Sorts the rows by language and computes the average. The average
    /// weights each language equally, regardless of corpus size.
    pub fn from_rows(mut rows: Vec<FertilityRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("fertility rows"));
        }
        for r in &rows {
            if !(r.fertility > 0.0 && r.fertility.is_finite()) {
                return Err(Error::invalid(
                    "fertility",
                    format!("language {:?} has fertility {}", r.language, r.fertility),
                ));
            }
        }
        rows.sort_by(|a, b| a.language.cmp(&b.language));
        let average = rows.iter().map(|r| r.fertility).sum::<f64>() / rows.len() as f64;
        Ok(Self { rows, average })
    }
}

/// Measure tokens-per-word per language. Words are segmented first and
/// tokenized independently, so merge rules never fuse across a word
/// boundary and a corpus with spaces isn't charged for them.
pub fn fertility(
    spec: &TokenizerSpec,
    corpus: &BTreeMap<String, Vec<String>>,
    segmenter: Segmenter,
) -> Result<FertilityReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("fertility corpus"));
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for (language, texts) in corpus {
        let mut token_count: u64 = 0;
        let mut word_count: u64 = 0;
        for text in texts {
            for word in segment(text, segmenter) {
                word_count += 1;
                token_count += spec.tokenize(&word).len() as u64;
            }
        }
        rows.push(FertilityRow::new(language.clone(), token_count, word_count)?);
    }
    FertilityReport::from_rows(rows)
}

/// Token occurrence counts over some counting corpus. Ids absent from the
/// table count as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrequencyTable {
    counts: BTreeMap<u32, u64>,
}

impl FrequencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: BTreeMap<u32, u64>) -> Self {
        Self { counts }
    }

    /// Tokenize every text and accumulate occurrence counts.
    pub fn tally(spec: &TokenizerSpec, texts: &[String]) -> Self {
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for text in texts {
            for id in spec.tokenize(text) {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn get(&self, id: u32) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn set(&mut self, id: u32, count: u64) {
        self.counts.insert(id, count);
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.counts.keys().copied()
    }
}

/// A pruned spec plus the old-id → new-id mapping of surviving tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub spec: TokenizerSpec,
    pub id_map: BTreeMap<u32, u32>,
}

/// Shrink the vocabulary to exactly `target_size` tokens by removing the
/// lowest-count unprotected tokens (ties: higher id goes first). Byte
/// tokens and specials always survive, so anything tokenizable before stays
/// tokenizable after. Merge rules whose sides or output were removed are
/// dropped, and the survivors get contiguous ids preserving relative order.
pub fn prune_vocab(
    spec: &TokenizerSpec,
    freq: &FrequencyTable,
    target_size: usize,
) -> Result<PruneOutcome> {
    let v = spec.vocab_size();
    let floor = SPECIAL_TOKENS.len() + 256;
    if target_size < floor {
        return Err(Error::invalid(
            "target_size",
            format!("{target_size} is below the protected floor of {floor}"),
        ));
    }
    if target_size > v {
        return Err(Error::invalid(
            "target_size",
            format!("{target_size} exceeds the vocabulary size {v}"),
        ));
    }
    for id in freq.ids() {
        if id as usize >= v {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
    }
    let mut candidates: Vec<(u64, u32)> = (0..v as u32)
        .filter(|&id| !spec.is_protected(id))
        .map(|id| (freq.get(id), id))
        .collect();
    // Lowest count first; equal counts drop the higher id first.
    candidates.sort_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
    let removed: BTreeSet<u32> = candidates
        .into_iter()
        .take(v - target_size)
        .map(|(_, id)| id)
        .collect();

    let mut tokens = Vec::with_capacity(target_size);
    let mut id_map = BTreeMap::new();
    for old in 0..v as u32 {
        if !removed.contains(&old) {
            id_map.insert(old, tokens.len() as u32);
            tokens.push(spec.token(old)?.to_string());
        }
    }
    let surviving: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
    let merges: Vec<(String, String)> = spec
        .merges()
        .iter()
        .filter(|(a, b)| {
            surviving.contains(a.as_str())
                && surviving.contains(b.as_str())
                && surviving.contains(format!("{a}{b}").as_str())
        })
        .cloned()
        .collect();
    Ok(PruneOutcome {
        spec: TokenizerSpec::from_parts(tokens, merges)?,
        id_map,
    })
}

/// Build an embedding matrix for a target vocabulary from a source one:
/// tokens shared with the source copy their row bitwise; tokens new to the
/// target all get the same vector, the arithmetic mean over every source
/// row, computed once. Vocabularies are id-ordered token lists so toy
/// matrices can be exercised without a full spec.
pub fn transfer_embeddings(
    source_tokens: &[String],
    source_matrix: &DenseTensor,
    target_tokens: &[String],
) -> Result<DenseTensor> {
    if source_tokens.is_empty() {
        return Err(Error::EmptyInput("source vocabulary"));
    }
    if target_tokens.is_empty() {
        return Err(Error::EmptyInput("target vocabulary"));
    }
    if source_matrix.rank() != 2 || source_matrix.shape()[0] != source_tokens.len() {
        return Err(Error::ShapeMismatch {
            context: "source embedding matrix",
            expected: vec![source_tokens.len()],
            actual: source_matrix.shape().to_vec(),
        });
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, t) in source_tokens.iter().enumerate() {
        if index.insert(t.as_str(), i).is_some() {
            return Err(Error::DuplicateName(t.clone()));
        }
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for t in target_tokens {
        if !seen.insert(t.as_str()) {
            return Err(Error::DuplicateName(t.clone()));
        }
    }

    let (vs, d) = (source_tokens.len(), source_matrix.shape()[1]);
    let mut mean = vec![0.0; d];
    for r in 0..vs {
        let row = source_matrix.row2(r);
        for k in 0..d {
            mean[k] += row[k];
        }
    }
    for m in &mut mean {
        *m /= vs as f64;
    }

    let mut out = DenseTensor::zeros(vec![target_tokens.len(), d])?;
    for (i, t) in target_tokens.iter().enumerate() {
        match index.get(t.as_str()) {
            Some(&r) => out.row2_mut(i).copy_from_slice(source_matrix.row2(r)),
            None => out.row2_mut(i).copy_from_slice(&mean),
        }
    }
    Ok(out)
}
