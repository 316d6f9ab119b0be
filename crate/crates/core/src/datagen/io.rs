use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Dataset, DatasetManifest, Episode, Split};

pub const MANIFEST_FILE: &str = "manifest.json";

fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Writes `manifest.json` and one `<split>.jsonl` file per split.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let mut manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    manifest.push('\n');
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    for split in Split::ALL {
        let path = dir.join(split_file(split));
        let mut buf = Vec::new();
        for ep in dataset.split(split) {
            serde_json::to_writer(&mut buf, ep)?;
            buf.push(b'\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

/// Reads and validates one split. Nothing is returned unless every line
/// parses and satisfies the episode invariants.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<Episode>> {
    let path = dir.join(split_file(split));
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if ep.split != split {
            return Err(Error::Invariant {
                episode_id: ep.episode_id,
                msg: format!("split `{}` found in {}", ep.split.name(), split_file(split)),
            });
        }
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}

/// Reads all three splits plus the manifest.
pub fn load_all(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        manifest: load_manifest(dir)?,
        sparse: load_dataset(dir, Split::Sparse)?,
        dense: load_dataset(dir, Split::Dense)?,
        test: load_dataset(dir, Split::Test)?,
    })
}

/// SHA-256 over the manifest and split files, in a fixed order.
pub fn dataset_checksum(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let names = std::iter::once(MANIFEST_FILE.to_string()).chain(Split::ALL.iter().map(|&s| split_file(s)));
    for name in names {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
