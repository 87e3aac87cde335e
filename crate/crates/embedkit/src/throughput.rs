//! Wall-clock throughput measurement over a deterministic batch plan.
//!
//! Planning (document order, batch layout, padding) happens in the core
//! and is seeded; only the clock lives here. Warmup batches cycle through
//! the plan before timing starts, then `measured_passes` full passes over
//! the corpus are timed on the monotonic clock. `wall_seconds` in the
//! report is the mean per-pass time, keeping `docs_per_second ==
//! total_docs / wall_seconds` with `total_docs` equal to the corpus size.

use std::time::Instant;

use embedkit_core::bench::{plan_batches, BenchConfig, BenchPlan, ThroughputReport};
use embedkit_core::encoder::{encode, EncoderConfig, EncoderWeights, TokenSequence};
use embedkit_core::{Error, Result};

/// A throughput measurement plus the plan it timed, so callers can audit
/// padding-token counts without replanning.
#[derive(Debug, Clone)]
pub struct MeasuredRun {
    pub report: ThroughputReport,
    pub plan: BenchPlan,
}

pub fn run_throughput(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    corpus: &[TokenSequence],
    bconfig: &BenchConfig,
) -> Result<MeasuredRun> {
    if bconfig.msl > config.max_len {
        return Err(Error::InvalidParam {
            name: "msl",
            reason: format!(
                "benchmark msl {} exceeds the model window {}",
                bconfig.msl, config.max_len
            ),
        });
    }
    let plan = plan_batches(corpus, bconfig)?;

    for i in 0..bconfig.warmup_batches {
        let batch = &plan.batches[i % plan.batches.len()];
        encode(weights, config, batch)?;
    }

    let start = Instant::now();
    for _ in 0..bconfig.measured_passes {
        for batch in &plan.batches {
            encode(weights, config, batch)?;
        }
    }
    let wall = start.elapsed().as_secs_f64() / bconfig.measured_passes as f64;

    let report = ThroughputReport::new(bconfig.strategy, plan.total_docs, wall)?;
    Ok(MeasuredRun { report, plan })
}
