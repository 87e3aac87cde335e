//! Run manifests: every CLI invocation writes `manifest.toml` into its
//! output directory *before* doing any work. The manifest holds the fully
//! resolved configuration (defaults materialized, file values and flag
//! overrides merged), the input and output paths, and enough metadata to
//! replay the run. Passing a manifest back through `--config` reproduces
//! the run: the loader looks for a `[config]` table and uses it when one
//! is present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub toolkit_version: String,
    pub started_unix_seconds: u64,
    /// Input paths by role (data, weights, qrels, ...).
    pub inputs: BTreeMap<String, String>,
    /// Artifacts this run will write, by role, relative to the out dir.
    pub outputs: BTreeMap<String, String>,
    /// The merged, fully materialized configuration.
    pub config: toml::Value,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .expect("system clock before 1970")
                .as_secs(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: toml::Value::try_from(config).context("serializing resolved config")?,
        })
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.insert(role.to_string(), path.display().to_string());
        self
    }

    pub fn output(mut self, role: &str, name: &str) -> Self {
        self.outputs.insert(role.to_string(), name.to_string());
        self
    }
}

/// Create the out directory and write `manifest.toml` into it. Called
/// before any real work so a crashed run still leaves its intent behind.
pub fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let path = out_dir.join("manifest.toml");
    let text = toml::to_string_pretty(manifest).context("serializing manifest")?;
    fs::write(&path, text).with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(path)
}

/// Load a subcommand config document. A missing path yields the defaults.
/// Accepts either a bare config table or a whole manifest (in which case
/// its `[config]` table is used), so `--config old-run/manifest.toml`
/// replays a previous run.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    let value = if table.contains_key("subcommand") && table.contains_key("config") {
        table["config"].clone()
    } else {
        toml::Value::Table(table)
    };
    value
        .try_into()
        .with_context(|| format!("interpreting config {}", path.display()))
}
