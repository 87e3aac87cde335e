//! File formats for every artifact the toolkit reads or writes.
//!
//! Binary checkpoint archives pass through the core codec untouched; all
//! other formats are plain text — JSON for structured documents (tokenizer
//! specs, merge recipes, corpora), JSON lines for record streams (training
//! data, token sequences), whitespace-separated lines for relevance
//! judgments and rankings, and CSV for reports. Writers produce canonical
//! bytes (sorted keys, fixed column orders) so reruns diff cleanly.

pub mod archive;
pub mod records;
pub mod report;
pub mod tokenizer;
pub mod trec;

pub use archive::{load_archive, save_archive};
pub use records::{
    load_corpus, load_counts, load_fertility_corpus, load_sequences, load_training, save_counts,
    save_fertility_corpus, save_id_map, save_sequences, save_training,
};
pub use report::{
    save_bench_csv, save_fertility_csv, save_gradcheck_csv, save_loss_trace, save_metric_report,
    save_routing, save_sweep_csv,
};
pub use tokenizer::{load_tokenizer, save_tokenizer};
pub use trec::{load_qrels, load_run, save_qrels, save_run};
