//! Writes a ready-to-use fixture set so the CLI can be exercised by hand:
//!
//! ```text
//! cargo run -p embedkit --example gen_fixtures -- /tmp/fixtures
//! embedkit train --data /tmp/fixtures/train.jsonl --steps 50 \
//!     --vocab-size 64 --dim 16 --max-len 16 --msl 16 --batch-size 8 \
//!     --out /tmp/run
//! embedkit eval --weights /tmp/run/weights.ckpt \
//!     --queries /tmp/fixtures/queries.jsonl --docs /tmp/fixtures/docs.jsonl \
//!     --qrels /tmp/fixtures/qrels.txt \
//!     --vocab-size 64 --dim 16 --max-len 16 --out /tmp/eval
//! ```

use std::path::PathBuf;

use embedkit::io;
use embedkit_core::fixtures::{
    gen_cluster_dataset, gen_skewed_corpus, toy_fertility_corpus, ClusterDatasetSpec,
};
use embedkit_core::vocab::{FrequencyTable, TokenizerSpec};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args_os()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    std::fs::create_dir_all(&out)?;

    let spec = ClusterDatasetSpec {
        clusters: 4,
        examples_per_cluster: 16,
        vocab_size: 64,
        seq_len_min: 4,
        seq_len_max: 10,
        negatives_per_example: 2,
        noise_rate: 0.05,
        languages: vec!["en".to_string(), "de".to_string()],
        cluster_relevance: true,
        seed: 42,
    };
    let dataset = gen_cluster_dataset(&spec)?;
    io::save_training(&out.join("train.jsonl"), &dataset.examples)?;
    io::save_sequences(&out.join("queries.jsonl"), &dataset.task.queries)?;
    io::save_sequences(&out.join("docs.jsonl"), &dataset.task.docs)?;
    io::save_qrels(&out.join("qrels.txt"), &dataset.task.qrels)?;

    // A length-skewed corpus for `bench`: mostly short docs, every 6th long.
    let corpus = gen_skewed_corpus(48, 4, 16, 6, 64, 7)?;
    let items: Vec<(String, _)> = corpus
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("d-{i}"), s))
        .collect();
    io::save_sequences(&out.join("corpus.jsonl"), &items)?;

    // A byte-level tokenizer plus counts for `prune-vocab` and `fertility`.
    let tokenizer = TokenizerSpec::byte_fallback()
        .with_merges(&[("h", "e"), ("l", "l"), ("he", "ll"), ("l", "o")])?;
    io::save_tokenizer(&out.join("tokenizer.json"), &tokenizer)?;
    let mut counts = FrequencyTable::new();
    for (id, count) in [(260, 40), (261, 25), (262, 10), (263, 2)] {
        counts.set(id, count);
    }
    io::save_counts(&out.join("counts.csv"), &counts)?;
    io::save_fertility_corpus(&out.join("fertility-corpus.json"), &toy_fertility_corpus())?;

    println!("fixtures written to {}", out.display());
    Ok(())
}
