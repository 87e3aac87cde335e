//! Encoding-throughput benchmarking: deterministic batch planning with an
//! exact padding-token audit, plus the report arithmetic (docs/s ratios and
//! padded-vs-packed deltas).
//!
//! Only the *planning* side lives here — it is a pure function of corpus,
//! config, and seed, so the interesting invariants (padding counts, batch
//! composition, document totals) are testable without a clock. The timed
//! loop that turns a plan into wall seconds belongs to the companion crate.
//!
//! Batches are padded to their own longest member with the PAD token, which
//! is what makes batch composition cost something: a batch mixing short and
//! long documents encodes mostly padding. The `SortedPacked` strategy
//! groups documents by length so that cost provably never exceeds the
//! shuffled `Padded` baseline.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::eval::round1;
use crate::vocab::PAD_ID;

/// How documents are ordered before batching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Strategy {
    /// Seeded shuffle, then fixed-size batches: the naive baseline whose
    /// batches mix lengths freely.
    Padded,
    /// Sort by (truncated) length so batch members share a length as far
    /// as possible; the one ragged batch is placed where it wastes least.
    SortedPacked,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Padded => "padded",
            Strategy::SortedPacked => "sorted_packed",
        }
    }
}

/// Benchmark parameters. `warmup_batches` are encoded before timing starts
/// (cycling the plan); `measured_passes` full passes over the corpus are
/// timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BenchConfig {
    pub batch_size: usize,
    pub msl: usize,
    pub strategy: Strategy,
    pub warmup_batches: usize,
    pub measured_passes: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.msl == 0 {
            return Err(Error::invalid("msl", "must be at least 1"));
        }
        if self.measured_passes == 0 {
            return Err(Error::invalid("measured_passes", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            msl: 64,
            strategy: Strategy::Padded,
            warmup_batches: 3,
            measured_passes: 1,
            seed: 0,
        }
    }
}

/// The materialized work of one pass: every batch padded to its own
/// longest member, plus the exact count of padding tokens that cost.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub batches: Vec<Vec<TokenSequence>>,
    pub padding_tokens: usize,
    pub total_docs: usize,
}

/// Padding cost of grouping `lens` into consecutive runs of the given
/// sizes: each group is padded to its maximum.
fn audit(lens: &[usize], sizes: impl Iterator<Item = usize>) -> usize {
    let mut pad = 0;
    let mut start = 0;
    for size in sizes {
        let group = &lens[start..start + size];
        let max = *group.iter().max().unwrap();
        pad += group.iter().map(|l| max - l).sum::<usize>();
        start += size;
    }
    pad
}

/// Deterministically order, truncate, batch, and pad a corpus.
///
/// `Padded` shuffles with the seed and chunks. `SortedPacked` sorts by
/// truncated length (ties on original position) and chunks; when the
/// corpus doesn't divide evenly, the one undersized batch is slid to
/// whichever aligned position minimizes total padding, which is what makes
/// the packed audit a true lower bound over every shuffle.
pub fn plan_batches(corpus: &[TokenSequence], config: &BenchConfig) -> Result<BenchPlan> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("bench corpus"));
    }
    let n = corpus.len();
    let c = config.batch_size;
    let lens: Vec<usize> = corpus.iter().map(|s| s.len().min(config.msl)).collect();

    // Document order, then batch size layout along it.
    let (order, sizes): (Vec<usize>, Vec<usize>) = match config.strategy {
        Strategy::Padded => {
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            idx.shuffle(&mut rng);
            let mut sizes = alloc::vec![c; n / c];
            if n % c != 0 {
                sizes.push(n % c);
            }
            (idx, sizes)
        }
        Strategy::SortedPacked => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| (lens[i], i));
            let sorted_lens: Vec<usize> = idx.iter().map(|&i| lens[i]).collect();
            let full = n / c;
            let rem = n % c;
            let sizes = if rem == 0 {
                alloc::vec![c; full]
            } else {
                // Try the ragged batch at every aligned position and keep
                // the cheapest (first wins ties).
                let mut best: Option<(usize, usize)> = None;
                for p in 0..=full {
                    let layout = (0..=full).map(|b| if b == p { rem } else { c });
                    let cost = audit(&sorted_lens, layout);
                    if best.map_or(true, |(bc, _)| cost < bc) {
                        best = Some((cost, p));
                    }
                }
                let p = best.unwrap().1;
                (0..=full).map(|b| if b == p { rem } else { c }).collect()
            };
            (idx, sizes)
        }
    };

    let ordered_lens: Vec<usize> = order.iter().map(|&i| lens[i]).collect();
    let padding_tokens = audit(&ordered_lens, sizes.iter().copied());

    let mut batches = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &size in &sizes {
        let members = &order[start..start + size];
        let max = members.iter().map(|&i| lens[i]).max().unwrap();
        let mut batch = Vec::with_capacity(size);
        for &i in members {
            let mut ids = corpus[i].truncated(lens[i])?.ids().to_vec();
            ids.resize(max, PAD_ID);
            batch.push(TokenSequence::new(ids)?);
        }
        batches.push(batch);
        start += size;
    }

    Ok(BenchPlan {
        batches,
        padding_tokens,
        total_docs: n,
    })
}

/// A finished measurement. `docs_per_second` is derived from the other two
/// fields at construction, so the three can never disagree.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThroughputReport {
    pub strategy: Strategy,
    pub total_docs: usize,
    pub wall_seconds: f64,
    pub docs_per_second: f64,
    /// Percent of a named reference's speed, when one was given.
    pub relative_percent: Option<f64>,
}

impl ThroughputReport {
    pub fn new(strategy: Strategy, total_docs: usize, wall_seconds: f64) -> Result<Self> {
        if total_docs == 0 {
            return Err(Error::invalid("total_docs", "no documents were measured"));
        }
        if !(wall_seconds > 0.0) || !wall_seconds.is_finite() {
            return Err(Error::invalid(
                "wall_seconds",
                format!("{wall_seconds} is not a positive duration"),
            ));
        }
        Ok(Self {
            strategy,
            total_docs,
            wall_seconds,
            docs_per_second: total_docs as f64 / wall_seconds,
            relative_percent: None,
        })
    }
}

/// Speed as a percentage of a reference: `100 · a/b`, one decimal. A report
/// compared against itself is exactly 100.0.
pub fn relative_speed(report: &ThroughputReport, reference: &ThroughputReport) -> Result<f64> {
    if !(reference.docs_per_second > 0.0) {
        return Err(Error::invalid(
            "reference",
            "reference throughput must be positive",
        ));
    }
    Ok(round1(
        100.0 * report.docs_per_second / reference.docs_per_second,
    ))
}

/// Relative change from `a` to `b`: `100 · (b − a)/a`, one decimal;
/// negative when `b` is slower.
pub fn padding_delta(a: &ThroughputReport, b: &ThroughputReport) -> Result<f64> {
    if !(a.docs_per_second > 0.0) {
        return Err(Error::invalid("a", "baseline throughput must be positive"));
    }
    Ok(round1(
        100.0 * (b.docs_per_second - a.docs_per_second) / a.docs_per_second,
    ))
}
