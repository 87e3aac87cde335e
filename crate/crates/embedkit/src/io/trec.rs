//! Relevance judgments and rankings as whitespace-separated text lines:
//! `query-id 0 doc-id gain` for judgments, `query-id doc-id rank score tag`
//! for rankings. Scores print in Rust's shortest round-trip form, so a
//! load of a save reproduces the exact floats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use embedkit_core::eval::{Qrels, Run};

pub fn save_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut text = String::new();
    for query in qrels.queries() {
        for (doc, gain) in qrels.gains(query).expect("listed query has gains") {
            writeln!(text, "{query} 0 {doc} {gain}").unwrap();
        }
    }
    fs::write(path, text).with_context(|| format!("writing qrels {}", path.display()))
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path).with_context(|| format!("reading qrels {}", path.display()))?;
    let mut qrels = Qrels::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [query, _iter, doc, gain] = fields.as_slice() else {
            bail!("{}:{}: expected 4 fields, got {}", path.display(), lineno + 1, fields.len());
        };
        let gain: u32 = gain
            .parse()
            .with_context(|| format!("{}:{}: bad gain {gain:?}", path.display(), lineno + 1))?;
        qrels.add(*query, *doc, gain);
    }
    Ok(qrels)
}

pub fn save_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut text = String::new();
    for query in run.queries() {
        for (rank, (doc, score)) in run.ranking(query).expect("listed query has a ranking").iter().enumerate() {
            writeln!(text, "{query} {doc} {} {score} {tag}", rank + 1).unwrap();
        }
    }
    fs::write(path, text).with_context(|| format!("writing run {}", path.display()))
}

pub fn load_run(path: &Path) -> Result<Run> {
    let text = fs::read_to_string(path).with_context(|| format!("reading run {}", path.display()))?;
    // Lines may arrive in any order; regroup by query and restore rank
    // order before the core validates monotone scores.
    let mut per_query: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [query, doc, rank, score, _tag] = fields.as_slice() else {
            bail!("{}:{}: expected 5 fields, got {}", path.display(), lineno + 1, fields.len());
        };
        let rank: usize = rank
            .parse()
            .with_context(|| format!("{}:{}: bad rank {rank:?}", path.display(), lineno + 1))?;
        let score: f64 = score
            .parse()
            .with_context(|| format!("{}:{}: bad score {score:?}", path.display(), lineno + 1))?;
        per_query
            .entry(query.to_string())
            .or_default()
            .push((rank, doc.to_string(), score));
    }
    let mut run = Run::new();
    for (query, mut rows) in per_query {
        rows.sort_by_key(|(rank, _, _)| *rank);
        let ranking = rows.into_iter().map(|(_, doc, score)| (doc, score)).collect();
        run.insert_ranking(&query, ranking)
            .with_context(|| format!("run {}: query {query}", path.display()))?;
    }
    Ok(run)
}
