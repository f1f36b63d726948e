//! Run manifests: what was run, on what, producing what.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub command: String,
    /// Arguments after the subcommand, without `--out`.
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input file hashes keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// Output file hashes keyed by path relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub versions: BTreeMap<String, String>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("vidctl-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("vidctl-core".to_string(), vidctl_core::VERSION.to_string()),
    ])
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes of every file under `dir` except the manifest itself.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    if dir.exists() {
        walk(dir, &mut files)?;
    }
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("walked under dir");
        if rel == Path::new(MANIFEST_FILE) || rel.to_string_lossy().ends_with(".tmp") {
            continue;
        }
        out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(&f)?);
    }
    Ok(out)
}

/// Hashes of an input file or every file of an input directory.
pub fn hash_input(path: &Path, into: &mut BTreeMap<String, String>) -> Result<()> {
    if path.is_dir() {
        for (rel, h) in hash_tree(path)? {
            into.insert(format!("{}/{rel}", path.display()), h);
        }
    } else {
        into.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(())
}

/// Write-then-rename so a reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_atomic(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }

    /// Files whose hashes differ, are missing, or are new in `other`.
    pub fn output_differences(&self, other: &BTreeMap<String, String>) -> Vec<String> {
        let mut diff: Vec<String> = self
            .outputs
            .iter()
            .filter(|(k, v)| other.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        diff.extend(other.keys().filter(|k| !self.outputs.contains_key(*k)).cloned());
        diff.sort();
        diff
    }
}
