//! Run manifests and output helpers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

/// SHA-256 of a file, or of a directory's files (relative name and content) in sorted order.
pub fn hash_path(path: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            if rel == Path::new(RUN_FILE) {
                continue;
            }
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&f).with_context(|| format!("hashing {}", f.display()))?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("hashing {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Input {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a subcommand exactly.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub threads: usize,
    pub config_source: String,
    /// The configuration file echoed verbatim.
    pub config: serde_json::Value,
    pub inputs: Vec<Input>,
    pub outputs: serde_json::Value,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_source: &str, config: &serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            argv: std::env::args().collect(),
            threads: rayon::current_num_threads(),
            config_source: config_source.into(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<String> {
        let sha256 = hash_path(path)?;
        self.inputs.push(Input { role: role.into(), path: path.display().to_string(), sha256: sha256.clone() });
        Ok(sha256)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(RUN_FILE), self)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Fills a temporary sibling of `dest` and renames it into place; nothing is left behind on failure.
pub fn atomic_output(dest: &Path, fill: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut outcome = None;
    let res = lidargen::dataset::atomic_dir(dest, |tmp| match fill(tmp) {
        Ok(()) => Ok(()),
        Err(e) => {
            outcome = Some(e);
            Err(lidargen::Error::Contract("output aborted".into()))
        }
    });
    match (res, outcome) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}

/// Writes a single file through a temporary sibling and a rename.
pub fn atomic_file(dest: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let name = dest.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dest.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, dest).with_context(|| format!("renaming into {}", dest.display()))
}
