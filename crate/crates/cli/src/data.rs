//! Scenario files on disk and the manifests that describe them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diffdrive::scene::{load_scenario, ScenarioLog};
use diffdrive::synth::generate_one;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub train: Vec<FileEntry>,
    pub test: Vec<FileEntry>,
    /// Digest over every file digest, in listing order.
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn entry(root: &Path, path: &Path) -> Result<FileEntry> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(FileEntry {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn scenario_name(index: usize) -> String {
    format!("scenario_{index:05}.jsonl")
}

/// Generates both splits; scenario `i` of the generator lands in `train` for
/// `i < n_train` and in `test` otherwise.
pub fn gen_data(cfg: &RunConfig) -> Result<DataManifest> {
    let gen = cfg.gen_config();
    let n_train = cfg.data.n_train();
    let dir = &cfg.data_dir;
    for split in ["train", "test"] {
        let d = dir.join(split);
        if d.exists() {
            fs::remove_dir_all(&d).with_context(|| format!("clearing {}", d.display()))?;
        }
        fs::create_dir_all(&d)?;
    }
    let written: Vec<Result<(bool, FileEntry)>> = (0..gen.n_scenarios)
        .into_par_iter()
        .map(|i| {
            let log = generate_one(&gen, i)?;
            let is_train = i < n_train;
            let local = if is_train { i } else { i - n_train };
            let path = dir.join(if is_train { "train" } else { "test" }).join(scenario_name(local));
            fs::write(&path, log.to_jsonl_string())?;
            Ok((is_train, entry(dir, &path)?))
        })
        .collect();
    let mut manifest = DataManifest {
        seed: gen.seed,
        train: Vec::new(),
        test: Vec::new(),
        hash: String::new(),
    };
    for w in written {
        let (is_train, e) = w?;
        if is_train {
            manifest.train.push(e);
        } else {
            manifest.test.push(e);
        }
    }
    let mut h = Sha256::new();
    for e in manifest.train.iter().chain(&manifest.test) {
        h.update(e.path.as_bytes());
        h.update(e.sha256.as_bytes());
    }
    manifest.hash = hex::encode(h.finalize());
    write_json(&dir.join(MANIFEST), &manifest)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(manifest)
}

pub fn split_files(data_dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let d = data_dir.join(split);
    if !d.is_dir() {
        bail!("no {split} split under {} (run gen-data first)", data_dir.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&d)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} holds no scenario files", d.display());
    }
    Ok(files)
}

pub fn load_split(data_dir: &Path, split: &str) -> Result<Vec<ScenarioLog>> {
    split_files(data_dir, split)?
        .par_iter()
        .map(|p| load_scenario(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// First `ceil(fraction * n)` logs, at least one.
pub fn take_fraction(mut logs: Vec<ScenarioLog>, fraction: f64) -> Vec<ScenarioLog> {
    let n = ((logs.len() as f64 * fraction).ceil() as usize).clamp(1, logs.len().max(1));
    logs.truncate(n);
    logs
}

/// Lists every file under `root` except the manifest itself, sorted.
pub fn write_run_manifest(root: &Path, command: &str) -> Result<RunManifest> {
    let mut paths = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p != root.join(MANIFEST) {
                paths.push(p);
            }
        }
    }
    paths.sort();
    let files = paths.iter().map(|p| entry(root, p)).collect::<Result<Vec<_>>>()?;
    let m = RunManifest {
        command: command.to_string(),
        files,
    };
    write_json(&root.join(MANIFEST), &m)?;
    Ok(m)
}
