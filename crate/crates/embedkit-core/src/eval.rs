//! Brute-force dense retrieval and the evaluation surface around it:
//! NDCG@k, Accuracy@1, Recall@k, benchmark aggregation, and the two sweep
//! axes — embedding-prefix width and document context length.
//!
//! Search is exact: every query scores every document by cosine (a dot
//! product of unit rows) and ties break on ascending doc id, so a run is a
//! pure function of its inputs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

// Float transcendentals (exp, ln, ...) for pure no_std graphs. Whenever any
// crate in the build graph links std (tests, the std companion crate), the
// inherent f64 methods shadow these and the import sits idle; both states
// are expected.
#[allow(unused_imports)]
use num_traits::Float;

use crate::encoder::{encode, EncoderConfig, EncoderWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, l2_normalize_rows, DenseTensor};

/// Relevance judgments: query id → (doc id → gain). Gains are non-negative
/// integers; a query needs at least one positive gain to be scoreable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Qrels {
    map: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, query: impl Into<String>, doc: impl Into<String>, gain: u32) {
        self.map.entry(query.into()).or_default().insert(doc.into(), gain);
    }

    pub fn gains(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.map.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Retrieval output: query id → ranked (doc id, score) list, scores
/// non-increasing, doc ids unique per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    map: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert one query's ranking, validating the invariants.
    pub fn insert_ranking(
        &mut self,
        query: impl Into<String>,
        ranking: Vec<(String, f64)>,
    ) -> Result<()> {
        let query = query.into();
        if self.map.contains_key(&query) {
            return Err(Error::DuplicateName(query));
        }
        let mut seen = BTreeSet::new();
        for (doc, score) in &ranking {
            if !score.is_finite() {
                return Err(Error::NonFinite("run score"));
            }
            if !seen.insert(doc.as_str()) {
                return Err(Error::DuplicateName(doc.clone()));
            }
        }
        for w in ranking.windows(2) {
            if w[0].1 < w[1].1 {
                return Err(Error::invalid(
                    "ranking",
                    format!("scores increase at doc {:?} for query {query:?}", w[1].0),
                ));
            }
        }
        self.map.insert(query, ranking);
        Ok(())
    }

    pub fn ranking(&self, query: &str) -> Option<&[(String, f64)]> {
        self.map.get(query).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A searchable document collection: ids plus unit-norm embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedCorpus {
    ids: Vec<String>,
    embeddings: DenseTensor,
}

impl IndexedCorpus {
    /// Wrap rows that are already unit-norm (within 1e-6), e.g. encoder
    /// output.
    pub fn new(ids: Vec<String>, embeddings: DenseTensor) -> Result<Self> {
        Self::validate_ids(&ids, &embeddings)?;
        for r in 0..ids.len() {
            let n = l2_norm(embeddings.row2(r));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "embeddings",
                    format!("row {r} has norm {n}, expected unit"),
                ));
            }
        }
        Ok(Self { ids, embeddings })
    }

    /// Normalize arbitrary rows into an index (zero-norm rows error).
    pub fn from_raw(ids: Vec<String>, raw: &DenseTensor) -> Result<Self> {
        Self::validate_ids(&ids, raw)?;
        Ok(Self {
            ids,
            embeddings: l2_normalize_rows(raw)?,
        })
    }

    fn validate_ids(ids: &[String], embeddings: &DenseTensor) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("corpus ids"));
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != ids.len() {
            return Err(Error::ShapeMismatch {
                context: "corpus embeddings",
                expected: vec![ids.len()],
                actual: embeddings.shape().to_vec(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateName(id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &DenseTensor {
        &self.embeddings
    }
}

/// Exact top-k cosine retrieval. Query rows are normalized internally;
/// every document is scored and ties break on ascending doc id, so the
/// result is deterministic. `k` larger than the corpus returns the full
/// ranking.
pub fn search(
    index: &IndexedCorpus,
    query_ids: &[String],
    queries: &DenseTensor,
    k: usize,
) -> Result<Run> {
    if k == 0 {
        return Err(Error::invalid("k", "top-k depth must be at least 1"));
    }
    if query_ids.is_empty() {
        return Err(Error::EmptyInput("query ids"));
    }
    if queries.rank() != 2
        || queries.shape()[0] != query_ids.len()
        || queries.shape()[1] != index.dim()
    {
        return Err(Error::ShapeMismatch {
            context: "query embeddings",
            expected: vec![query_ids.len(), index.dim()],
            actual: queries.shape().to_vec(),
        });
    }
    let normalized = l2_normalize_rows(queries)?;
    let depth = k.min(index.len());

    let mut run = Run::new();
    for (qi, qid) in query_ids.iter().enumerate() {
        let q = normalized.row2(qi);
        let mut scored: Vec<(usize, f64)> = (0..index.len())
            .map(|di| {
                let d = index.embeddings.row2(di);
                let mut s = 0.0;
                for j in 0..q.len() {
                    s += q[j] * d[j];
                }
                (di, s)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
        });
        scored.truncate(depth);
        let ranking = scored
            .into_iter()
            .map(|(di, s)| (index.ids[di].clone(), s))
            .collect();
        run.insert_ranking(qid.clone(), ranking)?;
    }
    Ok(run)
}

/// Per-query scores plus their mean over the scoreable queries.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Iterate qrels queries that carry at least one positive gain; the rest
/// are unscoreable and are skipped with a warning.
fn scoreable<'a>(
    qrels: &'a Qrels,
) -> Result<Vec<(&'a str, &'a BTreeMap<String, u32>)>> {
    if qrels.is_empty() {
        return Err(Error::EmptyInput("qrels"));
    }
    let mut out = Vec::with_capacity(qrels.len());
    for q in qrels.queries() {
        let gains = qrels.gains(q).unwrap();
        if gains.values().any(|&g| g > 0) {
            out.push((q, gains));
        } else {
            log::warn!("query {q:?} has no positive-gain docs; excluded from the mean");
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("scoreable queries"));
    }
    Ok(out)
}

fn finish(per_query: BTreeMap<String, f64>) -> MetricReport {
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    MetricReport { per_query, mean }
}

/// Normalized discounted cumulative gain at depth `k` with linear gains:
/// `DCG = Σ_{r=1..k} gain(doc_r) / log2(r+1)`, normalized by the ideal DCG
/// of the gains sorted descending. Queries missing from the run score 0.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::invalid("k", "metric depth must be at least 1"));
    }
    let mut per_query = BTreeMap::new();
    for (q, gains) in scoreable(qrels)? {
        let mut ideal: Vec<u32> = gains.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
            .sum();
        let dcg: f64 = match run.ranking(q) {
            None => 0.0,
            Some(ranking) => ranking
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, (doc, _))| {
                    gains.get(doc).copied().unwrap_or(0) as f64 / ((i + 2) as f64).log2()
                })
                .sum(),
        };
        per_query.insert(q.to_string(), dcg / idcg);
    }
    Ok(finish(per_query))
}

/// Fraction of queries whose rank-1 document is relevant (gain > 0).
pub fn accuracy_at_1(run: &Run, qrels: &Qrels) -> Result<MetricReport> {
    let mut per_query = BTreeMap::new();
    for (q, gains) in scoreable(qrels)? {
        let hit = run
            .ranking(q)
            .and_then(|r| r.first())
            .map(|(doc, _)| gains.get(doc).copied().unwrap_or(0) > 0)
            .unwrap_or(false);
        per_query.insert(q.to_string(), if hit { 1.0 } else { 0.0 });
    }
    Ok(finish(per_query))
}

/// Mean over queries of (relevant docs retrieved in the top k) / (total
/// relevant docs).
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::invalid("k", "metric depth must be at least 1"));
    }
    let mut per_query = BTreeMap::new();
    for (q, gains) in scoreable(qrels)? {
        let total = gains.values().filter(|&&g| g > 0).count() as f64;
        let got = match run.ranking(q) {
            None => 0usize,
            Some(ranking) => ranking
                .iter()
                .take(k)
                .filter(|(doc, _)| gains.get(doc).copied().unwrap_or(0) > 0)
                .count(),
        };
        per_query.insert(q.to_string(), got as f64 / total);
    }
    Ok(finish(per_query))
}

/// Round to one decimal place, the precision benchmark tables are reported
/// at.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// A benchmark mean at full precision and at reporting precision.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BenchmarkSummary {
    pub mean: f64,
    pub rounded: f64,
}

/// Unweighted arithmetic mean over per-task scores.
pub fn aggregate_benchmark(per_task: &BTreeMap<String, f64>) -> Result<BenchmarkSummary> {
    if per_task.is_empty() {
        return Err(Error::EmptyInput("per-task scores"));
    }
    if per_task.values().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("task score"));
    }
    let mean = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(BenchmarkSummary {
        mean,
        rounded: round1(mean),
    })
}

/// One retrieval task: queries, documents, and judgments. Ids must be
/// unique within their list.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub queries: Vec<(String, TokenSequence)>,
    pub docs: Vec<(String, TokenSequence)>,
    pub qrels: Qrels,
}

impl EvalTask {
    pub fn new(
        queries: Vec<(String, TokenSequence)>,
        docs: Vec<(String, TokenSequence)>,
        qrels: Qrels,
    ) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyInput("task queries"));
        }
        if docs.is_empty() {
            return Err(Error::EmptyInput("task docs"));
        }
        for list in [&queries, &docs] {
            let mut seen = BTreeSet::new();
            for (id, _) in list {
                if !seen.insert(id.as_str()) {
                    return Err(Error::DuplicateName(id.clone()));
                }
            }
        }
        Ok(Self { queries, docs, qrels })
    }
}

/// Which metric a context sweep reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SweepMetric {
    NdcgAtK,
    AccuracyAt1,
    RecallAtK,
}

fn score_run(run: &Run, qrels: &Qrels, metric: SweepMetric, k: usize) -> Result<f64> {
    let report = match metric {
        SweepMetric::NdcgAtK => ndcg_at_k(run, qrels, k)?,
        SweepMetric::AccuracyAt1 => accuracy_at_1(run, qrels)?,
        SweepMetric::RecallAtK => recall_at_k(run, qrels, k)?,
    };
    Ok(report.mean)
}

/// One sweep row: the axis value, the metric per task, and the unweighted
/// mean across tasks.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub value: usize,
    pub per_task: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Sweep results, one row per requested axis value, in request order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepReport {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

/// Keep the first `dim` components of every row and re-normalize. Asking
/// for the full width is the identity (bitwise), so a sweep that includes
/// the model dimension reproduces the un-truncated evaluation exactly.
pub fn truncate_renormalize(embeddings: &DenseTensor, dim: usize) -> Result<DenseTensor> {
    if embeddings.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "embeddings to truncate",
            expected: vec![2],
            actual: vec![embeddings.rank()],
        });
    }
    let (n, full) = (embeddings.shape()[0], embeddings.shape()[1]);
    if dim == 0 || dim > full {
        return Err(Error::invalid(
            "dim",
            format!("prefix width {dim} outside 1..={full}"),
        ));
    }
    if dim == full {
        return Ok(embeddings.clone());
    }
    let mut out = DenseTensor::zeros(vec![n, dim])?;
    for r in 0..n {
        out.row2_mut(r).copy_from_slice(&embeddings.row2(r)[..dim]);
    }
    l2_normalize_rows(&out)
}

fn split_ids_seqs(pairs: &[(String, TokenSequence)]) -> (Vec<String>, Vec<TokenSequence>) {
    (
        pairs.iter().map(|(id, _)| id.clone()).collect(),
        pairs.iter().map(|(_, s)| s.clone()).collect(),
    )
}

/// Evaluate the prefix-width ladder: embed every task once at full width,
/// then for each requested dimension truncate + re-normalize both sides,
/// search, and score NDCG@k. Rows appear in the order dims were given.
pub fn mrl_sweep(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    tasks: &BTreeMap<String, EvalTask>,
    dims: &[usize],
    k: usize,
) -> Result<SweepReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("sweep tasks"));
    }
    if dims.is_empty() {
        return Err(Error::EmptyInput("sweep dims"));
    }
    for &d in dims {
        if d == 0 || d > config.dim {
            return Err(Error::invalid(
                "dims",
                format!("prefix width {d} outside 1..={}", config.dim),
            ));
        }
    }

    // Full-width embeddings, once per task.
    let mut embedded = Vec::new();
    for (name, task) in tasks {
        let (qids, qseqs) = split_ids_seqs(&task.queries);
        let (dids, dseqs) = split_ids_seqs(&task.docs);
        let q = encode(weights, config, &qseqs)?;
        let d = encode(weights, config, &dseqs)?;
        embedded.push((name, task, qids, q, dids, d));
    }

    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        let mut per_task = BTreeMap::new();
        for (name, task, qids, q, dids, d) in &embedded {
            let qt = truncate_renormalize(q, dim)?;
            let dt = truncate_renormalize(d, dim)?;
            let index = IndexedCorpus::new(dids.clone(), dt)?;
            let run = search(&index, qids, &qt, k)?;
            per_task.insert((*name).clone(), ndcg_at_k(&run, &task.qrels, k)?.mean);
        }
        let mean = per_task.values().sum::<f64>() / per_task.len() as f64;
        rows.push(SweepRow { value: dim, per_task, mean });
    }
    Ok(SweepReport {
        axis: "dimension".to_string(),
        rows,
    })
}

/// Evaluate how scores change with available document context: for each
/// max sequence length, truncate every document's tokens (queries are
/// never truncated), re-encode, search, and score the chosen metric.
pub fn context_sweep(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    tasks: &BTreeMap<String, EvalTask>,
    msls: &[usize],
    metric: SweepMetric,
    k: usize,
) -> Result<SweepReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("sweep tasks"));
    }
    if msls.is_empty() {
        return Err(Error::EmptyInput("sweep lengths"));
    }
    for &m in msls {
        if m == 0 || m > config.max_len {
            return Err(Error::invalid(
                "msls",
                format!("sequence length {m} outside 1..={}", config.max_len),
            ));
        }
    }

    // Queries embed once; documents re-embed per length.
    let mut prepared = Vec::new();
    for (name, task) in tasks {
        let (qids, qseqs) = split_ids_seqs(&task.queries);
        let q = encode(weights, config, &qseqs)?;
        let (dids, dseqs) = split_ids_seqs(&task.docs);
        prepared.push((name, task, qids, q, dids, dseqs));
    }

    let mut rows = Vec::with_capacity(msls.len());
    for &msl in msls {
        let mut per_task = BTreeMap::new();
        for (name, task, qids, q, dids, dseqs) in &prepared {
            let truncated: Vec<TokenSequence> = dseqs
                .iter()
                .map(|s| s.truncated(msl))
                .collect::<Result<_>>()?;
            let d = encode(weights, config, &truncated)?;
            let index = IndexedCorpus::new(dids.clone(), d)?;
            let run = search(&index, qids, q, k)?;
            per_task.insert((*name).clone(), score_run(&run, &task.qrels, metric, k)?);
        }
        let mean = per_task.values().sum::<f64>() / per_task.len() as f64;
        rows.push(SweepRow { value: msl, per_task, mean });
    }
    Ok(SweepReport {
        axis: "max-sequence-length".to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_weights, Activation, Pooling};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn unit_rows(rows: &[Vec<f64>]) -> DenseTensor {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        l2_normalize_rows(&DenseTensor::new(vec![n, d], flat).unwrap()).unwrap()
    }

    #[test]
    fn corpus_validates_ids_and_norms() {
        let emb = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(IndexedCorpus::new(ids(&["a", "b"]), emb.clone()).is_ok());
        assert!(matches!(
            IndexedCorpus::new(ids(&["a", "a"]), emb.clone()),
            Err(Error::DuplicateName(_))
        ));
        assert!(IndexedCorpus::new(ids(&["a"]), emb.clone()).is_err());
        let raw = DenseTensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 5.0]).unwrap();
        assert!(IndexedCorpus::new(ids(&["a", "b"]), raw.clone()).is_err());
        // from_raw normalizes the same matrix happily.
        let idx = IndexedCorpus::from_raw(ids(&["a", "b"]), &raw).unwrap();
        assert_eq!(idx.embeddings().at2(0, 0), 1.0);
    }

    #[test]
    fn run_rejects_increasing_scores_and_duplicates() {
        let mut run = Run::new();
        assert!(run
            .insert_ranking("q", vec![("a".into(), 0.2), ("b".into(), 0.5)])
            .is_err());
        assert!(run
            .insert_ranking("q", vec![("a".into(), 0.5), ("a".into(), 0.2)])
            .is_err());
        run.insert_ranking("q", vec![("a".into(), 0.5), ("b".into(), 0.2)])
            .unwrap();
        assert!(run.insert_ranking("q", vec![]).is_err());
    }

    #[test]
    fn searching_for_an_indexed_vector_ranks_it_first_with_score_one() {
        let emb = unit_rows(&[vec![1.0, 2.0, 3.0], vec![-3.0, 1.0, 0.5], vec![0.0, 1.0, 0.0]]);
        let index = IndexedCorpus::new(ids(&["d0", "d1", "d2"]), emb.clone()).unwrap();
        let q = DenseTensor::new(vec![1, 3], emb.row2(1).to_vec()).unwrap();
        let run = search(&index, &ids(&["q"]), &q, 2).unwrap();
        let ranking = run.ranking("q").unwrap();
        assert_eq!(ranking[0].0, "d1");
        assert!((ranking[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(ranking.len(), 2);
    }

    #[test]
    fn oversized_k_returns_the_full_ranking() {
        let emb = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let index = IndexedCorpus::new(ids(&["a", "b"]), emb).unwrap();
        let q = unit_rows(&[vec![1.0, 1.0]]);
        let run = search(&index, &ids(&["q"]), &q, 99).unwrap();
        assert_eq!(run.ranking("q").unwrap().len(), 2);
        assert!(search(&index, &ids(&["q"]), &q, 0).is_err());
    }

    #[test]
    fn exact_ties_break_on_ascending_doc_id() {
        // Two identical documents; the lexicographically smaller id wins.
        let emb = unit_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![-1.0, 1.0]]);
        let index = IndexedCorpus::new(ids(&["zz", "aa", "mm"]), emb).unwrap();
        let q = unit_rows(&[vec![1.0, 1.0]]);
        let run = search(&index, &ids(&["q"]), &q, 3).unwrap();
        let order: Vec<&str> = run
            .ranking("q")
            .unwrap()
            .iter()
            .map(|(d, _)| d.as_str())
            .collect();
        assert_eq!(order, vec!["aa", "zz", "mm"]);
    }

    #[test]
    fn search_matches_a_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let (n, d, nq, k) = (50usize, 6usize, 7usize, 10usize);
        let doc_ids: Vec<String> = (0..n).map(|i| format!("doc-{i:03}")).collect();
        let raw = DenseTensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let index = IndexedCorpus::from_raw(doc_ids.clone(), &raw).unwrap();
        let qids: Vec<String> = (0..nq).map(|i| format!("q{i}")).collect();
        let qraw = DenseTensor::new(
            vec![nq, d],
            (0..nq * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let run = search(&index, &qids, &qraw, k).unwrap();

        // Oracle: normalize independently, score everything, full sort.
        let qn = l2_normalize_rows(&qraw).unwrap();
        for (qi, qid) in qids.iter().enumerate() {
            let mut all: Vec<(String, f64)> = (0..n)
                .map(|di| {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += qn.at2(qi, j) * index.embeddings().at2(di, j);
                    }
                    (doc_ids[di].clone(), s)
                })
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            assert_eq!(run.ranking(qid).unwrap(), all.as_slice());
        }
    }

    #[test]
    fn ndcg_hand_values() {
        let mut qrels = Qrels::new();
        qrels.add("q1", "good", 1);
        let mut run = Run::new();
        run.insert_ranking("q1", vec![("good".into(), 0.9), ("bad".into(), 0.1)])
            .unwrap();
        let r = ndcg_at_k(&run, &qrels, 10).unwrap();
        assert_eq!(r.per_query["q1"], 1.0);
        assert_eq!(r.mean, 1.0);

        // Single binary-relevant doc at rank 2: 1/log2(3).
        let mut run = Run::new();
        run.insert_ranking("q1", vec![("bad".into(), 0.9), ("good".into(), 0.1)])
            .unwrap();
        let r = ndcg_at_k(&run, &qrels, 10).unwrap();
        assert!((r.mean - 1.0 / 3.0f64.log2()).abs() < 1e-12);
        assert!((r.mean - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn queries_missing_from_the_run_score_zero() {
        let mut qrels = Qrels::new();
        qrels.add("present", "d", 1);
        qrels.add("absent", "d", 1);
        let mut run = Run::new();
        run.insert_ranking("present", vec![("d".into(), 1.0)]).unwrap();
        let r = ndcg_at_k(&run, &qrels, 5).unwrap();
        assert_eq!(r.per_query["absent"], 0.0);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn zero_gain_queries_are_excluded_from_the_mean() {
        let mut qrels = Qrels::new();
        qrels.add("real", "d", 1);
        qrels.add("hopeless", "d", 0);
        let mut run = Run::new();
        run.insert_ranking("real", vec![("d".into(), 1.0)]).unwrap();
        run.insert_ranking("hopeless", vec![("d".into(), 1.0)]).unwrap();
        for f in [
            ndcg_at_k(&run, &qrels, 5).unwrap(),
            accuracy_at_1(&run, &qrels).unwrap(),
            recall_at_k(&run, &qrels, 5).unwrap(),
        ] {
            assert_eq!(f.per_query.len(), 1);
            assert_eq!(f.mean, 1.0);
        }
        // Entirely unscoreable qrels error out.
        let mut empty_gain = Qrels::new();
        empty_gain.add("q", "d", 0);
        assert!(ndcg_at_k(&run, &empty_gain, 5).is_err());
        assert!(ndcg_at_k(&run, &Qrels::new(), 5).is_err());
    }

    #[test]
    fn accuracy_and_recall_hand_values() {
        let mut qrels = Qrels::new();
        qrels.add("q1", "rel", 1);
        qrels.add("q2", "rel2", 2);
        let mut run = Run::new();
        // Rank-1 always wrong, relevant at rank 2.
        run.insert_ranking("q1", vec![("junk".into(), 0.9), ("rel".into(), 0.8)])
            .unwrap();
        run.insert_ranking("q2", vec![("junk".into(), 0.9), ("rel2".into(), 0.8)])
            .unwrap();
        assert_eq!(accuracy_at_1(&run, &qrels).unwrap().mean, 0.0);
        assert_eq!(recall_at_k(&run, &qrels, 2).unwrap().mean, 1.0);
        assert_eq!(recall_at_k(&run, &qrels, 1).unwrap().mean, 0.0);

        // Perfect run.
        let mut run = Run::new();
        run.insert_ranking("q1", vec![("rel".into(), 0.9)]).unwrap();
        run.insert_ranking("q2", vec![("rel2".into(), 0.9)]).unwrap();
        assert_eq!(accuracy_at_1(&run, &qrels).unwrap().mean, 1.0);
        assert_eq!(recall_at_k(&run, &qrels, 1).unwrap().mean, 1.0);
    }

    /// Straight-line reimplementation of all three metrics for randomized
    /// cross-checking.
    fn oracle_metrics(run: &Run, qrels: &Qrels, k: usize) -> (f64, f64, f64) {
        let mut ndcgs = Vec::new();
        let mut accs = Vec::new();
        let mut recalls = Vec::new();
        for q in qrels.queries() {
            let gains = qrels.gains(q).unwrap();
            let total_gain: u32 = gains.values().sum();
            if total_gain == 0 {
                continue;
            }
            let ranked: Vec<(String, f64)> =
                run.ranking(q).map(|r| r.to_vec()).unwrap_or_default();
            let g = |doc: &str| gains.get(doc).copied().unwrap_or(0) as f64;

            let mut dcg = 0.0;
            for (i, (doc, _)) in ranked.iter().enumerate().take(k) {
                dcg += g(doc) / ((i as f64) + 2.0).log2();
            }
            let mut sorted: Vec<f64> = gains.values().map(|&x| x as f64).collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut idcg = 0.0;
            for (i, gv) in sorted.iter().enumerate().take(k) {
                idcg += gv / ((i as f64) + 2.0).log2();
            }
            ndcgs.push(dcg / idcg);

            accs.push(match ranked.first() {
                Some((doc, _)) if g(doc) > 0.0 => 1.0,
                _ => 0.0,
            });

            let total_rel = gains.values().filter(|&&x| x > 0).count() as f64;
            let hit = ranked
                .iter()
                .take(k)
                .filter(|(doc, _)| g(doc) > 0.0)
                .count() as f64;
            recalls.push(hit / total_rel);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&ndcgs), mean(&accs), mean(&recalls))
    }

    #[test]
    fn metrics_match_the_literal_formula_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n_docs = rng.random_range(1..8usize);
            let n_queries = rng.random_range(1..5usize);
            let k = rng.random_range(1..6usize);
            let docs: Vec<String> = (0..n_docs).map(|i| format!("d{i}")).collect();

            let mut qrels = Qrels::new();
            let mut run = Run::new();
            let mut any_scoreable = false;
            for qi in 0..n_queries {
                let q = format!("q{qi}");
                let mut positive = false;
                for d in &docs {
                    if rng.random_range(0.0..1.0) < 0.6 {
                        let gain = rng.random_range(0..3u32);
                        positive |= gain > 0;
                        qrels.add(&q, d, gain);
                    }
                }
                if qrels.gains(&q).is_none() {
                    qrels.add(&q, &docs[0], 1);
                    positive = true;
                }
                any_scoreable |= positive;
                // Sometimes the query is missing from the run entirely.
                if rng.random_range(0.0..1.0) < 0.85 {
                    let mut scores: Vec<f64> =
                        (0..n_docs).map(|_| rng.random_range(0.0..1.0)).collect();
                    scores.sort_by(|a, b| b.total_cmp(a));
                    let mut order = docs.clone();
                    for i in (1..order.len()).rev() {
                        order.swap(i, rng.random_range(0..i + 1));
                    }
                    let ranking: Vec<(String, f64)> =
                        order.into_iter().zip(scores).collect();
                    run.insert_ranking(&q, ranking).unwrap();
                }
            }
            if !any_scoreable {
                continue;
            }

            let (o_ndcg, o_acc, o_recall) = oracle_metrics(&run, &qrels, k);
            assert!((ndcg_at_k(&run, &qrels, k).unwrap().mean - o_ndcg).abs() < 1e-9);
            assert!((accuracy_at_1(&run, &qrels).unwrap().mean - o_acc).abs() < 1e-9);
            assert!((recall_at_k(&run, &qrels, k).unwrap().mean - o_recall).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_and_rounding() {
        let mut per_task = BTreeMap::new();
        per_task.insert("one".to_string(), 58.35);
        per_task.insert("two".to_string(), 61.25);
        let s = aggregate_benchmark(&per_task).unwrap();
        assert!((s.mean - 59.8).abs() < 1e-12);
        assert_eq!(s.rounded, 59.8);

        let mut single = BTreeMap::new();
        single.insert("only".to_string(), 42.3);
        assert_eq!(aggregate_benchmark(&single).unwrap().mean, 42.3);
        assert!(aggregate_benchmark(&BTreeMap::new()).is_err());

        assert_eq!(round1(59.85), 59.9);
        assert_eq!(round1(-22.54), -22.5);
        assert_eq!(round1(110.84), 110.8);
    }

    fn sweep_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 64,
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_len: 12,
            rope_theta: 10_000.0,
            global_every_k: 1,
            local_window: 8,
            pooling: Pooling::Mean,
            activation: Activation::Gelu,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    /// Two-cluster toy task: queries near their own docs in token space.
    fn toy_task() -> EvalTask {
        let queries = vec![
            ("q0".to_string(), seq(&[0, 10, 11, 12])),
            ("q1".to_string(), seq(&[0, 40, 41, 42])),
        ];
        let docs = vec![
            ("d0".to_string(), seq(&[0, 10, 11, 13])),
            ("d1".to_string(), seq(&[0, 40, 41, 43])),
            ("d2".to_string(), seq(&[0, 25, 26, 27])),
        ];
        let mut qrels = Qrels::new();
        qrels.add("q0", "d0", 1);
        qrels.add("q1", "d1", 1);
        EvalTask::new(queries, docs, qrels).unwrap()
    }

    fn toy_tasks() -> BTreeMap<String, EvalTask> {
        let mut tasks = BTreeMap::new();
        tasks.insert("toy".to_string(), toy_task());
        tasks
    }

    #[test]
    fn mrl_sweep_full_width_row_matches_plain_evaluation_bitwise() {
        let config = sweep_config();
        let weights = init_weights(&config, 5).unwrap();
        let tasks = toy_tasks();
        let report = mrl_sweep(&weights, &config, &tasks, &[8, 4, 8], 2).unwrap();
        assert_eq!(report.axis, "dimension");
        assert_eq!(report.rows.len(), 3);

        // Plain evaluation without any sweep plumbing.
        let task = &tasks["toy"];
        let (qids, qseqs) = split_ids_seqs(&task.queries);
        let (dids, dseqs) = split_ids_seqs(&task.docs);
        let q = encode(&weights, &config, &qseqs).unwrap();
        let d = encode(&weights, &config, &dseqs).unwrap();
        let index = IndexedCorpus::new(dids, d).unwrap();
        let run = search(&index, &qids, &q, 2).unwrap();
        let plain = ndcg_at_k(&run, &task.qrels, 2).unwrap().mean;

        assert_eq!(report.rows[0].mean, plain);
        // Duplicated axis entries give identical rows.
        assert_eq!(report.rows[0], report.rows[2]);
    }

    #[test]
    fn mrl_sweep_rows_match_manual_truncation() {
        let config = sweep_config();
        let weights = init_weights(&config, 6).unwrap();
        let tasks = toy_tasks();
        let report = mrl_sweep(&weights, &config, &tasks, &[8, 4, 2], 2).unwrap();

        let task = &tasks["toy"];
        let (qids, qseqs) = split_ids_seqs(&task.queries);
        let (dids, dseqs) = split_ids_seqs(&task.docs);
        let q = encode(&weights, &config, &qseqs).unwrap();
        let d = encode(&weights, &config, &dseqs).unwrap();
        for (row, &dim) in report.rows.iter().zip(&[8usize, 4, 2]) {
            assert_eq!(row.value, dim);
            let qt = truncate_renormalize(&q, dim).unwrap();
            let dt = truncate_renormalize(&d, dim).unwrap();
            let index = IndexedCorpus::new(dids.clone(), dt).unwrap();
            let run = search(&index, &qids, &qt, 2).unwrap();
            let manual = ndcg_at_k(&run, &task.qrels, 2).unwrap().mean;
            assert_eq!(row.mean, manual);
        }
        // Width beyond the model dimension is rejected.
        assert!(mrl_sweep(&weights, &config, &tasks, &[16], 2).is_err());
    }

    #[test]
    fn context_sweep_with_full_length_matches_untruncated_evaluation() {
        let config = sweep_config();
        let weights = init_weights(&config, 7).unwrap();
        let tasks = toy_tasks();
        // Docs are 4 tokens long; msl 12 >= all lengths.
        let report = context_sweep(
            &weights,
            &config,
            &tasks,
            &[2, 12],
            SweepMetric::NdcgAtK,
            2,
        )
        .unwrap();
        assert_eq!(report.axis, "max-sequence-length");

        let task = &tasks["toy"];
        let (qids, qseqs) = split_ids_seqs(&task.queries);
        let (dids, dseqs) = split_ids_seqs(&task.docs);
        let q = encode(&weights, &config, &qseqs).unwrap();
        let d = encode(&weights, &config, &dseqs).unwrap();
        let index = IndexedCorpus::new(dids, d).unwrap();
        let run = search(&index, &qids, &q, 2).unwrap();
        let plain = ndcg_at_k(&run, &task.qrels, 2).unwrap().mean;
        assert_eq!(report.rows[1].mean, plain);

        // Lengths beyond the model window are rejected.
        assert!(context_sweep(&weights, &config, &tasks, &[13], SweepMetric::NdcgAtK, 2).is_err());
    }

    #[test]
    fn truncate_renormalize_rules() {
        let t = DenseTensor::new(vec![1, 4], vec![3.0, 4.0, 0.0, 9.0]).unwrap();
        let out = truncate_renormalize(&t, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!((out.at2(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.at2(0, 1) - 0.8).abs() < 1e-15);
        // Full width is the identity, bit for bit.
        assert_eq!(truncate_renormalize(&t, 4).unwrap(), t);
        assert!(truncate_renormalize(&t, 0).is_err());
        assert!(truncate_renormalize(&t, 5).is_err());
        // Zero prefix of a nonzero row errors on renormalization.
        let z = DenseTensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        assert!(truncate_renormalize(&z, 2).is_err());
    }
}
