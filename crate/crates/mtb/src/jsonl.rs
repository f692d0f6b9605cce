//! Versioned JSON-lines files. Every file starts with a header record
//! naming its format and version; readers reject anything they do not
//! understand and report errors with line numbers.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DOCUMENTS: &str = "mtb.documents";
pub const STATEMENTS: &str = "mtb.statements";
pub const PAIRS: &str = "mtb.pairs";
pub const LABELED: &str = "mtb.labeled";
pub const METRICS: &str = "mtb.metrics";
pub const SWEEP: &str = "mtb.sweep";

pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Write `items` as JSON lines behind a header record.
pub fn write_jsonl<T, I>(path: impl AsRef<Path>, format: &str, items: I) -> Result<()>
where
    T: Serialize,
    I: IntoIterator<Item = T>,
{
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let header = Header {
        format: format.to_string(),
        version: VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a whole JSONL file, validating the header. Errors carry 1-based
/// line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>, format: &str) -> Result<Vec<T>> {
    let file = File::open(&path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_line = lines
        .next()
        .ok_or_else(|| Error::Malformed {
            line: 1,
            message: "missing header line".into(),
        })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Malformed {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != format {
        return Err(Error::Malformed {
            line: 1,
            message: format!("format is {:?}, expected {format:?}", header.format),
        });
    }
    if header.version != VERSION {
        return Err(Error::Version {
            format: format.to_string(),
            got: header.version,
            want: VERSION,
        });
    }

    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: idx + 2,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        k: String,
        v: u32,
    }

    #[test]
    fn round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![
            Row {
                k: "a".into(),
                v: 1,
            },
            Row {
                k: "b".into(),
                v: 2,
            },
        ];
        write_jsonl(&path, "mtb.test", rows.iter()).unwrap();
        let back: Vec<Row> = read_jsonl(&path, "mtb.test").unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn wrong_format_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        write_jsonl(&path, "mtb.test", std::iter::empty::<Row>()).unwrap();
        assert!(matches!(
            read_jsonl::<Row>(&path, "mtb.other"),
            Err(Error::Malformed { line: 1, .. })
        ));

        std::fs::write(&path, "{\"format\":\"mtb.test\",\"version\":99}\n").unwrap();
        assert!(matches!(
            read_jsonl::<Row>(&path, "mtb.test"),
            Err(Error::Version { got: 99, .. })
        ));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        std::fs::write(
            &path,
            "{\"format\":\"mtb.test\",\"version\":1}\n{\"k\":\"a\",\"v\":1}\nnot json\n",
        )
        .unwrap();
        match read_jsonl::<Row>(&path, "mtb.test") {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
