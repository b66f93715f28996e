use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::exit::{io, validation, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one subcommand run: resolved configuration, inputs and
/// outputs with content hashes, and wall-clock timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub seed: u64,
    pub config: Config,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_entry(path: &Path) -> CliResult<FileHash> {
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    /// Compares hashes by file name against a reference manifest. Returns a
    /// description of every difference.
    pub fn diff(&self, reference: &RunManifest) -> Vec<String> {
        let mut problems = Vec::new();
        if self.command != reference.command {
            problems.push(format!("command {} vs {}", self.command, reference.command));
        }
        let by_name = |list: &[FileHash]| -> BTreeMap<String, String> {
            list.iter()
                .map(|f| {
                    let name = f.path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                    (name, f.sha256.clone())
                })
                .collect()
        };
        for (kind, ours, theirs) in [
            ("input", by_name(&self.inputs), by_name(&reference.inputs)),
            ("output", by_name(&self.outputs), by_name(&reference.outputs)),
        ] {
            for (name, hash) in &theirs {
                match ours.get(name) {
                    None => problems.push(format!("{kind} {name} missing")),
                    Some(h) if h != hash => problems.push(format!("{kind} {name} hash mismatch")),
                    Some(_) => {}
                }
            }
            for name in ours.keys().filter(|n| !theirs.contains_key(*n)) {
                problems.push(format!("{kind} {name} not in reference"));
            }
        }
        problems
    }
}
