//! File output: atomic writes, config hashes and JSON-lines summaries.

use std::io::Write;
use std::path::Path;

use nadamw_core::harness::{RunConfig, Summary, SweepAxis, Trajectory};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

/// SHA-256 of the canonical JSON form of a resolved run.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("run configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// One JSONL object per run. Keys appear in field order: `config_hash`,
/// `axis`, `value`, `seed`, then the summary fields.
#[derive(Debug, Serialize)]
pub struct SummaryLine<'a> {
    pub config_hash: String,
    pub axis: Option<&'static str>,
    pub value: Option<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub summary: &'a Summary,
}

impl<'a> SummaryLine<'a> {
    pub fn new(t: &'a Trajectory, axis: Option<SweepAxis>, value: Option<f64>) -> Self {
        Self {
            config_hash: config_hash(&t.config),
            axis: axis.map(SweepAxis::name),
            value,
            seed: t.config.seed,
            summary: &t.summary,
        }
    }
}

pub fn jsonl_string<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s += &serde_json::to_string(item).expect("summaries serialize");
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    atomic_write(path, jsonl_string(items).as_bytes())
}
