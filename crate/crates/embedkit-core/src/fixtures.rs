//! Deterministic synthetic datasets for desk-scale experiments.
//!
//! Three generators cover the training and evaluation surfaces:
//! cluster corpora (separable retrieval with hard structure and tunable
//! noise), needle corpora (long documents whose answer tokens sit at known
//! positions, for context-length studies), and length-skewed corpora (for
//! batching benchmarks). Everything is a pure function of its spec — same
//! seed, same bytes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::eval::{EvalTask, Qrels};
use crate::trainer::TrainingExample;
use crate::vocab::CLS_ID;

/// Token ids 0..=3 are reserved for specials; generated content starts
/// here.
const FIRST_CONTENT_TOKEN: u32 = 4;

/// Spec for a separable retrieval corpus: each cluster owns a disjoint
/// band of token ids, queries and positives sample their own band, and
/// negatives sample other clusters' bands. `noise_rate` replaces tokens
/// with draws from the whole content range, blurring the separation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterDatasetSpec {
    pub clusters: usize,
    pub examples_per_cluster: usize,
    pub vocab_size: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub negatives_per_example: usize,
    pub noise_rate: f64,
    /// Language tags assigned round-robin over examples.
    pub languages: Vec<String>,
    /// When true, qrels mark every same-cluster document relevant, so an
    /// ideal ranking is insensitive to within-cluster tie-breaking. When
    /// false, only each query's own positive is relevant.
    pub cluster_relevance: bool,
    pub seed: u64,
}

impl Default for ClusterDatasetSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            examples_per_cluster: 8,
            vocab_size: 64,
            seq_len_min: 3,
            seq_len_max: 6,
            negatives_per_example: 1,
            noise_rate: 0.0,
            languages: vec!["en".to_string()],
            cluster_relevance: false,
            seed: 0,
        }
    }
}

impl ClusterDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::invalid("clusters", "need at least 2 clusters"));
        }
        if self.examples_per_cluster == 0 {
            return Err(Error::invalid("examples_per_cluster", "must be at least 1"));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::invalid(
                "seq_len",
                format!("bad range {}..={}", self.seq_len_min, self.seq_len_max),
            ));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::invalid(
                "noise_rate",
                format!("{} outside [0, 0.5)", self.noise_rate),
            ));
        }
        if self.languages.is_empty() {
            return Err(Error::EmptyInput("languages"));
        }
        if self.band_width() == 0 {
            return Err(Error::invalid(
                "vocab_size",
                format!(
                    "{} leaves no token band per cluster after {} reserved ids",
                    self.vocab_size, FIRST_CONTENT_TOKEN
                ),
            ));
        }
        Ok(())
    }

    fn band_width(&self) -> usize {
        (self.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN as usize)) / self.clusters
    }

    /// The half-open token id band owned by one cluster.
    pub fn band(&self, cluster: usize) -> (u32, u32) {
        let w = self.band_width() as u32;
        let lo = FIRST_CONTENT_TOKEN + cluster as u32 * w;
        (lo, lo + w)
    }

    /// Which cluster a content token belongs to, if any.
    pub fn cluster_of(&self, token: u32) -> Option<usize> {
        let w = self.band_width() as u32;
        if token < FIRST_CONTENT_TOKEN {
            return None;
        }
        let c = ((token - FIRST_CONTENT_TOKEN) / w) as usize;
        (c < self.clusters).then_some(c)
    }
}

/// The generated corpus: trainer examples plus the matching retrieval
/// task (queries = example queries, docs = example positives).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub examples: Vec<TrainingExample>,
    pub task: EvalTask,
}

/// Generate a separable cluster corpus. Example `j` of cluster `c` gets
/// query id `q-{c}-{j}` and doc id `d-{c}-{j}`; languages rotate over the
/// flattened example order; everything is a pure function of the spec.
pub fn gen_cluster_dataset(spec: &ClusterDatasetSpec) -> Result<ClusterDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let content_range =
        FIRST_CONTENT_TOKEN..FIRST_CONTENT_TOKEN + (spec.band_width() * spec.clusters) as u32;

    let draw_seq = |rng: &mut ChaCha8Rng, cluster: usize| -> Result<TokenSequence> {
        let (lo, hi) = spec.band(cluster);
        let len = rng.random_range(spec.seq_len_min..=spec.seq_len_max);
        let mut ids = Vec::with_capacity(len + 1);
        ids.push(CLS_ID);
        for _ in 0..len {
            let t = if spec.noise_rate > 0.0 && rng.random_range(0.0..1.0) < spec.noise_rate {
                rng.random_range(content_range.clone())
            } else {
                rng.random_range(lo..hi)
            };
            ids.push(t);
        }
        TokenSequence::new(ids)
    };

    let mut examples = Vec::new();
    let mut queries = Vec::new();
    let mut docs = Vec::new();
    let mut qrels = Qrels::new();
    let mut flat = 0usize;
    for c in 0..spec.clusters {
        for j in 0..spec.examples_per_cluster {
            let language = &spec.languages[flat % spec.languages.len()];
            let query = draw_seq(&mut rng, c)?;
            let positive = draw_seq(&mut rng, c)?;
            let mut negatives = Vec::with_capacity(spec.negatives_per_example);
            for _ in 0..spec.negatives_per_example {
                // Any cluster but this one.
                let shift = rng.random_range(1..spec.clusters);
                negatives.push(draw_seq(&mut rng, (c + shift) % spec.clusters)?);
            }
            examples.push(TrainingExample::new(
                format!("ex-{c}-{j}"),
                query.clone(),
                positive.clone(),
                negatives,
                language.clone(),
            )?);
            queries.push((format!("q-{c}-{j}"), query));
            docs.push((format!("d-{c}-{j}"), positive));
            qrels.add(format!("q-{c}-{j}"), format!("d-{c}-{j}"), 1);
            flat += 1;
        }
    }
    if spec.cluster_relevance {
        for c in 0..spec.clusters {
            for j in 0..spec.examples_per_cluster {
                for j2 in 0..spec.examples_per_cluster {
                    qrels.add(format!("q-{c}-{j}"), format!("d-{c}-{j2}"), 1);
                }
            }
        }
    }
    Ok(ClusterDataset {
        examples,
        task: EvalTask::new(queries, docs, qrels)?,
    })
}

/// Spec for a needle corpus: one long document per entry in
/// `needle_positions`, each hiding a unique token run at its position; the
/// matching query is that run alone, so retrieval succeeds only when the
/// encoded document window covers the needle.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NeedleDatasetSpec {
    pub haystack_len: usize,
    pub needle_positions: Vec<usize>,
    pub needle_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for NeedleDatasetSpec {
    fn default() -> Self {
        Self {
            haystack_len: 128,
            needle_positions: vec![8, 96],
            needle_len: 4,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl NeedleDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.needle_positions.is_empty() {
            return Err(Error::EmptyInput("needle positions"));
        }
        if self.needle_len == 0 {
            return Err(Error::invalid("needle_len", "must be at least 1"));
        }
        for &p in &self.needle_positions {
            if p + self.needle_len > self.haystack_len {
                return Err(Error::invalid(
                    "needle_positions",
                    format!(
                        "needle at {p} (+{}) overruns haystack of {}",
                        self.needle_len, self.haystack_len
                    ),
                ));
            }
        }
        let needle_tokens = self.needle_positions.len() * self.needle_len;
        if (self.vocab_size as u32) < FIRST_CONTENT_TOKEN + needle_tokens as u32 + 8 {
            return Err(Error::invalid(
                "vocab_size",
                format!(
                    "{} too small for {} needle tokens plus filler",
                    self.vocab_size, needle_tokens
                ),
            ));
        }
        Ok(())
    }
}

/// Generate a needle corpus as a retrieval task. Document `i` is random
/// filler of exactly `haystack_len` tokens with its needle written at
/// `needle_positions[i]`; query `i` is [CLS] + that needle. Needle tokens
/// come from a reserved id band that filler never touches, and every
/// needle is globally unique, so a document embedding can only match its
/// query if the needle tokens were actually encoded.
pub fn gen_needle_dataset(spec: &NeedleDatasetSpec) -> Result<EvalTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.needle_positions.len();
    // Filler band below, needle band at the top of the vocabulary.
    let needle_base = spec.vocab_size as u32 - (n * spec.needle_len) as u32;
    let filler = FIRST_CONTENT_TOKEN..needle_base;

    let mut queries = Vec::with_capacity(n);
    let mut docs = Vec::with_capacity(n);
    let mut qrels = Qrels::new();
    for (i, &pos) in spec.needle_positions.iter().enumerate() {
        let needle: Vec<u32> = (0..spec.needle_len)
            .map(|t| needle_base + (i * spec.needle_len + t) as u32)
            .collect();
        let mut hay: Vec<u32> = (0..spec.haystack_len)
            .map(|_| rng.random_range(filler.clone()))
            .collect();
        hay[pos..pos + spec.needle_len].copy_from_slice(&needle);

        let mut q = Vec::with_capacity(spec.needle_len + 1);
        q.push(CLS_ID);
        q.extend_from_slice(&needle);

        queries.push((format!("q-{i}"), TokenSequence::new(q)?));
        docs.push((format!("d-{i}"), TokenSequence::new(hay)?));
        qrels.add(format!("q-{i}"), format!("d-{i}"), 1);
    }
    EvalTask::new(queries, docs, qrels)
}

/// A length-skewed corpus for batching benchmarks: every `long_every`-th
/// document is `long_len` tokens, the rest are `short_len`.
pub fn gen_skewed_corpus(
    n_docs: usize,
    short_len: usize,
    long_len: usize,
    long_every: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    if n_docs == 0 {
        return Err(Error::invalid("n_docs", "must be at least 1"));
    }
    if short_len == 0 || long_len < short_len {
        return Err(Error::invalid(
            "lengths",
            format!("bad short/long pair {short_len}/{long_len}"),
        ));
    }
    if long_every == 0 {
        return Err(Error::invalid("long_every", "must be at least 1"));
    }
    if (vocab_size as u32) <= FIRST_CONTENT_TOKEN {
        return Err(Error::invalid("vocab_size", "leaves no content tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let len = if i % long_every == 0 { long_len } else { short_len };
            let ids = (0..len)
                .map(|_| rng.random_range(FIRST_CONTENT_TOKEN..vocab_size as u32))
                .collect();
            TokenSequence::new(ids)
        })
        .collect()
}

/// A fixed two-language corpus for tokenizer measurements.
pub fn toy_fertility_corpus() -> BTreeMap<String, Vec<String>> {
    let mut corpus = BTreeMap::new();
    corpus.insert(
        "aa".to_string(),
        vec![
            "hello hefty held hello".to_string(),
            "helm hello he held".to_string(),
        ],
    );
    corpus.insert(
        "bb".to_string(),
        vec!["abed abet cdef cded".to_string(), "ab cd ef abab".to_string()],
    );
    corpus
}
