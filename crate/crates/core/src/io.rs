//! Atomic file output, CSV text and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Shortest round-trip formatting, so CSVs are exact and byte-stable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub struct Csv {
    text: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { text: format!("{}\n", header.join(",")), cols: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.cols);
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Parse a numeric CSV with a header row.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::Format(format!("CSV row {} has {} fields, expected {}", i + 1, row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Provenance written next to every run output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub build_id: String,
    pub config_hash: String,
    pub data_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?)
    }
}

/// Merge `entries` into `dir/summary.json`, keeping keys sorted.
pub fn merge_summary(dir: &Path, entries: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    let path = dir.join("summary.json");
    let mut current: BTreeMap<String, serde_json::Value> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(e.into()),
    };
    current.extend(entries);
    let text = serde_json::to_string_pretty(&current)? + "\n";
    write_atomic(&path, text.as_bytes())
}

pub fn read_summary(dir: &Path) -> Result<BTreeMap<String, serde_json::Value>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&["1".into(), "2".into()]);
        let (h, rows) = read_csv(c.as_str()).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "2".to_string()]]);
        assert!(read_csv("a,b\n1\n").is_err());
    }

    #[test]
    fn summary_merge_keeps_sorted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = serde_json::Map::new();
        m.insert("zeta".into(), 1.into());
        merge_summary(dir.path(), m).unwrap();
        let mut m = serde_json::Map::new();
        m.insert("alpha".into(), 2.into());
        merge_summary(dir.path(), m).unwrap();
        let s = read_summary(dir.path()).unwrap();
        assert_eq!(s.keys().collect::<Vec<_>>(), vec!["alpha", "zeta"]);
    }
}
