//! JSON file containers shared by the matrix, dataset and checkpoint formats.
//!
//! Every container is a JSON object carrying `format` and `version` keys next
//! to its payload. Floats are written in shortest round-trip form and parsed
//! back exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value).map_err(|e| Error::format(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e))
}

pub(crate) fn check_header(
    path: &Path,
    format: &str,
    version: u32,
    want_format: &str,
    want_version: u32,
) -> Result<()> {
    if format != want_format {
        return Err(Error::format(
            path,
            format!("expected format `{want_format}`, found `{format}`"),
        ));
    }
    if version != want_version {
        return Err(Error::format(
            path,
            format!("unsupported {format} version {version} (expected {want_version})"),
        ));
    }
    Ok(())
}
