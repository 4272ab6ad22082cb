//! Line-oriented JSON helpers shared by every file format in the bench.

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// Parse JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| JsonlError::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_str(&text, &path.display().to_string())
}

/// One compact JSON object per line, LF terminated. Field order follows the
/// struct declaration, which makes the output canonical.
pub fn to_string<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    write_atomic(path, to_string(records).as_bytes()).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write through a temp file in the destination directory and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
