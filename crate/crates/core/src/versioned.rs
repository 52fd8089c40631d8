//! Versioned CSV files: a `# <kind> v<version>` line, optional `# key=value`
//! metadata lines, then an ordinary CSV body with a header row.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VersionedError {
    #[error("expected a `# {expected} v{version}` header line")]
    MissingHeader { expected: String, version: u32 },
    #[error("unsupported {kind} version {found} (this build reads v{supported})")]
    UnsupportedVersion {
        kind: String,
        found: String,
        supported: u32,
    },
    #[error("metadata key `{0}` is missing or malformed")]
    Metadata(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes header, metadata and rows.
pub fn write<W: Write, T: Serialize>(
    mut w: W,
    kind: &str,
    version: u32,
    meta: &[(&str, String)],
    rows: impl IntoIterator<Item = T>,
) -> Result<(), VersionedError> {
    writeln!(w, "# {kind} v{version}")?;
    for (k, v) in meta {
        writeln!(w, "# {k}={v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Parsed file: metadata plus deserialized rows.
#[derive(Debug, Clone)]
pub struct Document<T> {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<T>,
}

impl<T> Document<T> {
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, VersionedError> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| VersionedError::Metadata(key.to_string()))
    }
}

pub fn read<T: DeserializeOwned>(
    text: &str,
    kind: &str,
    version: u32,
) -> Result<Document<T>, VersionedError> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    let tag = first
        .strip_prefix("# ")
        .and_then(|rest| rest.strip_prefix(kind))
        .and_then(|rest| rest.trim().strip_prefix('v'))
        .ok_or_else(|| VersionedError::MissingHeader {
            expected: kind.to_string(),
            version,
        })?;
    if tag.parse::<u32>().ok() != Some(version) {
        return Err(VersionedError::UnsupportedVersion {
            kind: kind.to_string(),
            found: tag.to_string(),
            supported: version,
        });
    }
    let mut meta = BTreeMap::new();
    let mut consumed = first.len() + 1;
    for line in lines {
        let Some(entry) = line.strip_prefix("# ") else {
            break;
        };
        if let Some((k, v)) = entry.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        consumed += line.len() + 1;
    }
    let body = text.get(consumed.min(text.len())..).unwrap_or_default();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let rows = reader.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(Document { meta, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        key: String,
        value: Option<f64>,
    }

    #[test]
    fn round_trip() {
        let rows = vec![
            Row {
                key: "a".into(),
                value: Some(0.1 + 0.2),
            },
            Row {
                key: "b".into(),
                value: None,
            },
        ];
        let mut buf = Vec::new();
        write(&mut buf, "demo", 1, &[("multiplier", "2".into())], &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let doc: Document<Row> = read(&text, "demo", 1).unwrap();
        assert_eq!(doc.rows, rows);
        assert_eq!(doc.meta_parse::<f64>("multiplier").unwrap(), 2.0);
    }

    #[test]
    fn rejects_wrong_version_and_kind() {
        let text = "# demo v2\nkey,value\n";
        assert!(matches!(
            read::<Row>(text, "demo", 1),
            Err(VersionedError::UnsupportedVersion { .. })
        ));
        assert!(matches!(
            read::<Row>(text, "other", 1),
            Err(VersionedError::MissingHeader { .. })
        ));
        assert!(matches!(
            read::<Row>("key,value\n", "demo", 1),
            Err(VersionedError::MissingHeader { .. })
        ));
    }
}
