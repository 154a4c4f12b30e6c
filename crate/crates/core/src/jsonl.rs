//! JSON-lines helpers shared by every on-disk artifact.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    read_lines(path, |_, v| Ok(v))
}

/// Reads lines whose `version_key` field must equal `expected`.
pub fn read_versioned<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    version_key: &str,
    kind: &'static str,
    expected: u64,
) -> Result<Vec<T>> {
    read_lines(path, |lineno, v| {
        let found = v.get(version_key).and_then(|x| x.as_u64());
        match found {
            Some(f) if f == expected => Ok(v),
            Some(f) => Err(Error::Version {
                kind,
                found: f,
                expected,
            }),
            None => Err(Error::Format(format!(
                "line {lineno}: missing {version_key}"
            ))),
        }
    })
}

fn read_lines<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    check: impl Fn(usize, serde_json::Value) -> Result<serde_json::Value>,
) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let value = check(i + 1, value)?;
        items.push(
            serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(items)
}
