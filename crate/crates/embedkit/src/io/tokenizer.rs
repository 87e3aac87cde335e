//! Tokenizer specs as a single JSON document: the vocabulary as a
//! token → id map, the ordered merge rules, and the special tokens. The
//! id map must cover 0..n densely; everything else is re-validated by the
//! core constructor on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use embedkit_core::vocab::{TokenizerSpec, SPECIAL_TOKENS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerFile {
    vocab: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
    specials: Vec<String>,
}

pub fn save_tokenizer(path: &Path, spec: &TokenizerSpec) -> Result<()> {
    let file = TokenizerFile {
        vocab: spec
            .tokens()
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone(), id as u32))
            .collect(),
        merges: spec.merges().to_vec(),
        specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).with_context(|| format!("writing tokenizer {}", path.display()))
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerSpec> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading tokenizer {}", path.display()))?;
    let file: TokenizerFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing tokenizer {}", path.display()))?;
    if file.specials != SPECIAL_TOKENS {
        bail!(
            "tokenizer {} declares specials {:?}, this toolkit requires {:?}",
            path.display(),
            file.specials,
            SPECIAL_TOKENS
        );
    }
    // Invert the map into an id-ordered token list; ids must be 0..n with
    // no gaps (duplicates are impossible on the id side of a map, and
    // duplicate tokens collapse, which the length check catches).
    let n = file.vocab.len();
    let mut tokens = vec![String::new(); n];
    for (token, id) in file.vocab {
        let slot = tokens
            .get_mut(id as usize)
            .with_context(|| format!("tokenizer {}: id {id} out of range 0..{n}", path.display()))?;
        if !slot.is_empty() {
            bail!("tokenizer {}: id {id} assigned twice", path.display());
        }
        *slot = token;
    }
    TokenizerSpec::from_parts(tokens, file.merges)
        .with_context(|| format!("validating tokenizer {}", path.display()))
}
