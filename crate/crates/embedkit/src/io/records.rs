//! Record streams and small structured documents: training examples and
//! token sequences as JSON lines, language corpora as one JSON document,
//! token frequency tables and id maps as two-column CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use embedkit_core::encoder::TokenSequence;
use embedkit_core::trainer::TrainingExample;
use embedkit_core::vocab::FrequencyTable;
use serde::{Deserialize, Serialize};

/// One training record. The id is optional on disk; absent ids are
/// synthesized from the line number so every loaded example still has a
/// stable key for teacher routing and error messages.
#[derive(Debug, Serialize, Deserialize)]
struct TrainingRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    query: Vec<u32>,
    positive: Vec<u32>,
    negatives: Vec<Vec<u32>>,
    language: String,
}

pub fn save_training(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        let record = TrainingRecord {
            id: Some(ex.id.clone()),
            query: ex.query.ids().to_vec(),
            positive: ex.positive.ids().to_vec(),
            negatives: ex.negatives.iter().map(|n| n.ids().to_vec()).collect(),
            language: ex.language.clone(),
        };
        writeln!(text, "{}", serde_json::to_string(&record)?).unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing training data {}", path.display()))
}

pub fn load_training(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading training data {}", path.display()))?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        let id = record.id.unwrap_or_else(|| format!("line-{}", lineno + 1));
        let negatives = record
            .negatives
            .into_iter()
            .map(TokenSequence::new)
            .collect::<embedkit_core::Result<Vec<_>>>()
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        examples.push(
            TrainingExample::new(
                id,
                TokenSequence::new(record.query)?,
                TokenSequence::new(record.positive)?,
                negatives,
                record.language,
            )
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?,
        );
    }
    if examples.is_empty() {
        bail!("training data {} holds no records", path.display());
    }
    Ok(examples)
}

/// One identified token sequence, the line format shared by evaluation
/// queries, documents, and benchmark corpora.
#[derive(Debug, Serialize, Deserialize)]
struct SequenceRecord {
    id: String,
    ids: Vec<u32>,
}

pub fn save_sequences(path: &Path, items: &[(String, TokenSequence)]) -> Result<()> {
    let mut text = String::new();
    for (id, seq) in items {
        let record = SequenceRecord {
            id: id.clone(),
            ids: seq.ids().to_vec(),
        };
        writeln!(text, "{}", serde_json::to_string(&record)?).unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing sequences {}", path.display()))
}

pub fn load_sequences(path: &Path) -> Result<Vec<(String, TokenSequence)>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading sequences {}", path.display()))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        let seq = TokenSequence::new(record.ids)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        items.push((record.id, seq));
    }
    if items.is_empty() {
        bail!("sequence file {} holds no records", path.display());
    }
    Ok(items)
}

/// Sequences with the ids dropped, for callers that only batch.
pub fn load_corpus(path: &Path) -> Result<Vec<TokenSequence>> {
    Ok(load_sequences(path)?.into_iter().map(|(_, s)| s).collect())
}

pub fn save_fertility_corpus(path: &Path, corpus: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let text = serde_json::to_string_pretty(corpus)?;
    fs::write(path, text).with_context(|| format!("writing corpus {}", path.display()))
}

pub fn load_fertility_corpus(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing corpus {}", path.display()))
}

pub fn save_counts(path: &Path, table: &FrequencyTable) -> Result<()> {
    let mut text = String::from("token_id,count\n");
    for id in table.ids() {
        writeln!(text, "{id},{}", table.get(id)).unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing counts {}", path.display()))
}

pub fn load_counts(path: &Path) -> Result<FrequencyTable> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading counts {}", path.display()))?;
    let mut counts = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let Some((id, count)) = line.split_once(',') else {
            bail!("{}:{}: expected token_id,count", path.display(), lineno + 1);
        };
        let id: u32 = id
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad token id", path.display(), lineno + 1))?;
        let count: u64 = count
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad count", path.display(), lineno + 1))?;
        counts.insert(id, count);
    }
    Ok(FrequencyTable::from_counts(counts))
}

pub fn save_id_map(path: &Path, map: &BTreeMap<u32, u32>) -> Result<()> {
    let mut text = String::from("old_id,new_id\n");
    for (old, new) in map {
        writeln!(text, "{old},{new}").unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing id map {}", path.display()))
}
