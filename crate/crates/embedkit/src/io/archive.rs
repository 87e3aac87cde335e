//! Checkpoint archives on disk: exactly the core codec's bytes, nothing
//! added, so two saves of the same archive are byte-identical files.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use embedkit_core::checkpoint::CheckpointArchive;

pub fn save_archive(path: &Path, archive: &CheckpointArchive) -> Result<()> {
    fs::write(path, archive.encode())
        .with_context(|| format!("writing checkpoint archive {}", path.display()))
}

pub fn load_archive(path: &Path) -> Result<CheckpointArchive> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading checkpoint archive {}", path.display()))?;
    CheckpointArchive::decode(&bytes)
        .with_context(|| format!("decoding checkpoint archive {}", path.display()))
}
