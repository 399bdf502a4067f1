//! Artifact files: JSON envelopes and CSV tables stamped with the config
//! hash and seed, written as one batch per pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of `value`'s JSON serialization.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Stamp carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

/// JSON artifact wrapper.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<D> {
    pub config_hash: String,
    pub seed: u64,
    pub kind: String,
    pub data: D,
}

/// Formats a float with the shortest representation that parses back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Files produced by one stage, held in memory until [`Artifacts::commit`].
#[derive(Debug)]
pub struct Artifacts {
    stamp: Stamp,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    pub fn new(stamp: Stamp) -> Self {
        Self {
            stamp,
            files: Vec::new(),
        }
    }

    pub fn json<D: Serialize>(&mut self, rel: impl Into<PathBuf>, kind: &str, data: &D) -> Result<()> {
        let env = Envelope {
            config_hash: self.stamp.config_hash.clone(),
            seed: self.stamp.seed,
            kind: kind.to_string(),
            data,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.push(b'\n');
        self.files.push((rel.into(), bytes));
        Ok(())
    }

    /// CSV table preceded by a `# config_hash=… seed=…` comment line.
    pub fn csv(&mut self, rel: impl Into<PathBuf>, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut bytes = format!(
            "# config_hash={} seed={}\n",
            self.stamp.config_hash, self.stamp.seed
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut bytes);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        self.files.push((rel.into(), bytes));
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Writes every file under `root` via a temporary name and rename, so a
    /// stage that fails before committing leaves no partial outputs.
    pub fn commit(self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (rel, bytes) in self.files {
            let path = root.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let tmp = path.with_extension("partial");
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, &path)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Reads a JSON envelope written by [`Artifacts::json`].
pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<Envelope<D>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::invalid(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Header and records of a CSV written by [`Artifacts::csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

/// Rows of `(cell_index, x, y, value…)` for per-cell fields.
pub fn field_rows(centers: &[[f64; 2]], columns: &[&[f64]]) -> Vec<Vec<String>> {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut row = vec![i.to_string(), fmt_f64(c[0]), fmt_f64(c[1])];
            row.extend(columns.iter().map(|col| fmt_f64(col[i])));
            row
        })
        .collect()
}
