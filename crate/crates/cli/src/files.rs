//! Checksums, run manifests and dataset lookup.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use occtrack::synth::{read_dataset, SequenceSample};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::VERSION;

pub const RUN_MANIFEST: &str = "run.json";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| occtrack::Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| occtrack::Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| occtrack::Error::io(dir, e)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// Digest of every file under `root`, keyed by relative path in sorted order.
pub fn dir_digest(root: &Path) -> CliResult<String> {
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    let mut h = Sha256::new();
    for rel in files {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| occtrack::Error::io(&path, e))?;
        let name = rel.to_string_lossy().replace('\\', "/");
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

/// `run.json`: code version, the config of the latest command and a digest per artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub artifacts: BTreeMap<String, String>,
}

/// Records `artifacts` (paths relative to `dir`) in `dir/run.json`, keeping earlier entries.
pub fn update_run_manifest(dir: &Path, cfg: &RunConfig, artifacts: &[(String, String)]) -> CliResult<()> {
    let path = dir.join(RUN_MANIFEST);
    let mut manifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str::<RunManifest>(&text)
            .map(|m| m.artifacts)
            .unwrap_or_else(|e| {
                log::warn!("ignoring unreadable {}: {e}", path.display());
                BTreeMap::new()
            }),
        Err(_) => BTreeMap::new(),
    };
    for (name, digest) in artifacts {
        manifest.insert(name.clone(), digest.clone());
    }
    let m = RunManifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        artifacts: manifest,
    };
    write_json(&path, &m)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| occtrack::Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| occtrack::Error::io(path, e).into())
}

/// Loads split `name` of a dataset written by `gen`.
pub fn load_split(root: &Path, name: &str) -> CliResult<Vec<SequenceSample>> {
    let dir = root.join(name);
    if !dir.join(occtrack::synth::io::MANIFEST).is_file() {
        return Err(CliError::Data(format!(
            "dataset split `{name}` not found at {} (generate it with `occtrack gen --out {}`)",
            dir.display(),
            root.display()
        )));
    }
    let samples = read_dataset(&dir)?;
    log::info!("loaded {} sequences from {}", samples.len(), dir.display());
    Ok(samples)
}
