//! Throwaway: needle-retrieval signal strength across fixture shapes.

use embedkit_core::encoder::{
    encode, init_weights, rope_rescale, Activation, EncoderConfig, Pooling, TokenSequence,
};
use embedkit_core::eval::{accuracy_at_1, search, IndexedCorpus};
use embedkit_core::fixtures::{gen_needle_dataset, NeedleDatasetSpec};

fn main() {
    for &(dim, haystack, needle_len, ref positions) in &[
        (16usize, 96usize, 32usize, vec![64usize, 64, 64, 64]),
        (16, 112, 40, vec![66, 68, 70, 72]),
        (32, 96, 32, vec![64, 64, 64, 64]),
        (32, 112, 40, vec![66, 68, 70, 72]),
        (16, 128, 48, vec![66, 70, 74, 80]),
        (32, 128, 48, vec![66, 70, 74, 80]),
    ] {
        let vocab = 320usize;
        let base = EncoderConfig {
            vocab_size: vocab,
            dim,
            layers: 1,
            heads: 2,
            ffn_dim: 2 * dim,
            activation: Activation::Gelu,
            max_len: 64,
            rope_theta: 10_000.0,
            global_every_k: 1,
            local_window: 64,
            pooling: Pooling::Mean,
        };
        let ext = rope_rescale(&base, 160_000.0, 256).unwrap();
        for seed in [5u64, 9, 13] {
            let task = gen_needle_dataset(&NeedleDatasetSpec {
                haystack_len: haystack,
                needle_positions: positions.clone(),
                needle_len,
                vocab_size: vocab,
                seed,
            })
            .unwrap();
            let weights = init_weights(&ext, 5).unwrap();
            let acc = |cap: usize, cfg: &EncoderConfig| -> f64 {
                let (qids, qseqs): (Vec<String>, Vec<TokenSequence>) =
                    task.queries.iter().cloned().unzip();
                let (dids, dseqs): (Vec<String>, Vec<TokenSequence>) =
                    task.docs.iter().cloned().unzip();
                let capped: Vec<TokenSequence> =
                    dseqs.iter().map(|s| s.truncated(cap).unwrap()).collect();
                let q = encode(&weights, cfg, &qseqs).unwrap();
                let d = encode(&weights, cfg, &capped).unwrap();
                let index = IndexedCorpus::new(dids, d).unwrap();
                let run = search(&index, &qids, &q, 4).unwrap();
                accuracy_at_1(&run, &task.qrels).unwrap().mean
            };
            println!(
                "d={dim:2} L={haystack:3} k={needle_len:2} pos={positions:?} seed={seed:2}  full={:.2}  cap128={:.2}  cap64={:.2}",
                acc(256, &ext),
                acc(128, &ext),
                acc(64, &ext),
            );
        }
    }
}
