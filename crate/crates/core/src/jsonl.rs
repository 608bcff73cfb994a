//! Line-delimited JSON helpers shared by every on-disk format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parse one record per non-blank line.
pub fn read<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write<T: Serialize, W: Write>(mut w: W, records: impl IntoIterator<Item = T>) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(&rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_path<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| annotate(e, path))?;
    read(BufReader::new(f))
}

pub fn write_path<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| annotate(e, path))?;
    write(BufWriter::new(f), records)
}

pub(crate) fn annotate(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
