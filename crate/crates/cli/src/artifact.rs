//! Line-delimited JSON artifacts. Every line is one record wrapped in an
//! envelope naming the schema version, the producing command and the seed.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Record<T> {
    pub schema_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub kind: String,
    pub data: T,
}

pub struct Writer {
    path: PathBuf,
    out: BufWriter<File>,
    command: String,
    seed: Option<u64>,
}

impl Writer {
    pub fn create(path: &Path, command: &str, seed: Option<u64>) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Writer {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            command: command.into(),
            seed,
        })
    }

    pub fn write<T: Serialize>(&mut self, kind: &str, data: &T) -> Result<()> {
        let rec = Record {
            schema_version: SCHEMA_VERSION,
            command: self.command.clone(),
            seed: self.seed,
            kind: kind.into(),
            data,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush()?;
        Ok(self.path)
    }
}

/// Write a single-record artifact.
pub fn write_one<T: Serialize>(path: &Path, command: &str, seed: Option<u64>, kind: &str, data: &T) -> Result<PathBuf> {
    let mut w = Writer::create(path, command, seed)?;
    w.write(kind, data)?;
    w.finish()
}

/// All records of a file, untyped.
pub fn read_records(path: &Path) -> Result<Vec<Record<Value>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record<Value> =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?;
        if rec.schema_version != SCHEMA_VERSION {
            bail!(
                "{}:{}: unsupported schema version {}",
                path.display(),
                i + 1,
                rec.schema_version
            );
        }
        out.push(rec);
    }
    Ok(out)
}

/// The payloads of every record of kind `kind`.
pub fn read_kind<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, rec) in read_records(path)?.into_iter().enumerate() {
        if rec.kind == kind {
            out.push(
                serde_json::from_value(rec.data)
                    .with_context(|| format!("{}: record {} is not a valid {kind}", path.display(), i + 1))?,
            );
        }
    }
    if out.is_empty() {
        bail!("{}: no {kind} record", path.display());
    }
    Ok(out)
}
