//! Run manifests: what was run, with which configuration, on which inputs,
//! producing which outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Headline results of the run.
    pub summary: Value,
    pub status: String,
    /// SHA-256 of everything above.
    pub hash: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digests of every file under `root` (or `root` itself), sorted by path,
/// with paths relative to `root`.
pub fn digest_tree(root: &Path, skip: Option<&Path>) -> Result<Vec<FileDigest>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    if root.is_dir() {
        walk(root, &mut files)?;
    } else if root.exists() {
        files.push(root.to_path_buf());
    }
    files.sort();
    files
        .into_iter()
        .filter(|f| Some(f.as_path()) != skip)
        .map(|f| {
            Ok(FileDigest {
                path: f.strip_prefix(root).unwrap_or(&f).display().to_string(),
                sha256: sha256_hex(&fs::read(&f)?),
            })
        })
        .collect()
}

/// Collects the pieces of a manifest while a command runs.
pub struct Recorder {
    command: String,
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    started: Instant,
    started_unix: u64,
    pub summary: serde_json::Map<String, Value>,
}

impl Recorder {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            summary: serde_json::Map::new(),
        })
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(Value::Null),
        );
    }

    /// Write `run.json` into `out`, hashing inputs and every file under `out`.
    pub fn finish(self, out: &Path, status: &str) -> Result<RunManifest> {
        fs::create_dir_all(out)?;
        let manifest_path = out.join(MANIFEST_FILE);
        let mut inputs = Vec::new();
        for p in &self.inputs {
            for mut d in digest_tree(p, None)? {
                d.path = if d.path.is_empty() {
                    p.display().to_string()
                } else {
                    p.join(&d.path).display().to_string()
                };
                inputs.push(d);
            }
        }
        let outputs = digest_tree(out, Some(&manifest_path))?;
        let mut m = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs,
            summary: Value::Object(self.summary),
            status: status.to_string(),
            hash: String::new(),
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        m.hash = content_hash(&m)?;
        fs::write(&manifest_path, serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

/// Hash of the reproducible part of a manifest (no timing fields).
pub fn content_hash(m: &RunManifest) -> Result<String> {
    let content = serde_json::json!({
        "command": m.command,
        "config": m.config,
        "seeds": m.seeds,
        "version": m.version,
        "inputs": m.inputs,
        "outputs": m.outputs,
        "summary": m.summary,
        "status": m.status,
    });
    Ok(sha256_hex(serde_json::to_string(&content)?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timing() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let run = || {
            let mut r = Recorder::new("gen", &serde_json::json!({"n": 1})).unwrap();
            r.seed("data", 7);
            r.finish(dir.path(), "ok").unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.outputs.len(), 1);
        assert_eq!(
            a.outputs[0].sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
    }
}
