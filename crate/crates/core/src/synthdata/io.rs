//! Frame files (one JSON document per frame) and dataset manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainConfig, DomainTag, SceneFrame};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: DomainTag,
    pub split: String,
    pub root_seed: u64,
    /// Frame file names relative to the dataset directory.
    pub frames: Vec<String>,
    pub config: DomainConfig,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<SceneFrame>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, value).map_err(|e| Error::json(path, e))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn write_frame(path: &Path, frame: &SceneFrame) -> Result<()> {
    write_json(path, frame)
}

pub fn read_frame(path: &Path) -> Result<SceneFrame> {
    read_json(path)
}

/// Writes every frame plus the manifest into `dir`, creating it if needed.
pub fn write_dataset(
    dir: &Path,
    config: &DomainConfig,
    split: &str,
    root_seed: u64,
    frames: &[SceneFrame],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(frames.len());
    for frame in frames {
        let name = format!("{}.json", frame.frame_id);
        write_frame(&dir.join(&name), frame)?;
        names.push(name);
    }
    let manifest = Manifest {
        domain: config.domain,
        split: split.to_string(),
        root_seed,
        frames: names,
        config: config.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let frames = manifest
        .frames
        .iter()
        .map(|name| read_frame(&PathBuf::from(dir).join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_split;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DomainConfig::default_real();
        let frames = generate_split(&cfg, 3, "train", 2).unwrap();
        write_dataset(dir.path(), &cfg, "train", 3, &frames).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.frames, frames);
        assert_eq!(loaded.manifest.domain, DomainTag::Real);
    }

    #[test]
    fn corrupt_frame_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DomainConfig::default_sim();
        let frames = generate_split(&cfg, 3, "train", 1).unwrap();
        write_dataset(dir.path(), &cfg, "train", 3, &frames).unwrap();
        let bad = dir.path().join(format!("{}.json", frames[0].frame_id));
        fs::write(&bad, b"{not json").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&frames[0].frame_id), "{err}");
    }
}
