//! Versioned CSV and JSON outputs stamped with the config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CSV_MAGIC: &str = "synthaug-csv";
pub const CSV_VERSION: u32 = 1;
pub const JSON_FORMAT: &str = "synthaug-json";
pub const JSON_VERSION: u32 = 1;
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

/// Hex SHA-256 of the config's JSON encoding.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialize");
    Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Provenance line heading every CSV output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvMeta {
    pub kind: String,
    pub version: u32,
    pub build: String,
    pub config: String,
}

impl CsvMeta {
    pub fn new(kind: &str, config: &str) -> Self {
        Self {
            kind: kind.to_string(),
            version: CSV_VERSION,
            build: BUILD_ID.to_string(),
            config: config.to_string(),
        }
    }

    fn line(&self) -> String {
        format!(
            "# {CSV_MAGIC} v{} kind={} build={} config={}",
            self.version, self.kind, self.build, self.config
        )
    }

    fn parse(line: &str) -> Result<Self, CliError> {
        let bad = |why: &str| CliError::Runtime(format!("bad output header {line:?}: {why}"));
        let mut parts = line.strip_prefix("# ").ok_or_else(|| bad("missing marker"))?.split(' ');
        if parts.next() != Some(CSV_MAGIC) {
            return Err(bad("not a synthaug csv"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != CSV_VERSION {
            return Err(bad(&format!("unsupported version {version}, expected {CSV_VERSION}")));
        }
        let mut field = |key: &str| -> Result<String, CliError> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|p| p.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("missing {key}")))
        };
        Ok(Self {
            kind: field("kind")?,
            version,
            build: field("build")?,
            config: field("config")?,
        })
    }
}

/// A header row and string records, rendered to a versioned CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub meta: CsvMeta,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(meta: CsvMeta, header: &[&str]) -> Self {
        Self {
            meta,
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.meta.line();
        out.push('\n');
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        let meta = CsvMeta::parse(lines.next().unwrap_or(""))?;
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Runtime("csv output has no header row".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<String> = l.split(',').map(str::to_string).collect();
            if r.len() != header.len() {
                return Err(CliError::Runtime(format!(
                    "csv row {} has {} fields, header has {}",
                    i + 1,
                    r.len(),
                    header.len()
                )));
            }
            rows.push(r);
        }
        Ok(Self { meta, header, rows })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, &self.render())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// JSON summary wrapper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonDoc<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub build: String,
    pub config_hash: String,
    pub body: T,
}

impl<T: Serialize> JsonDoc<T> {
    pub fn new(kind: &str, config_hash: &str, body: T) -> Self {
        Self {
            format: JSON_FORMAT.into(),
            version: JSON_VERSION,
            kind: kind.into(),
            build: BUILD_ID.into(),
            config_hash: config_hash.into(),
            body,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        write_file(path, &text)
    }
}

/// Read a JSON summary, rejecting other formats and versions.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<JsonDoc<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
    if v.get("format").and_then(|f| f.as_str()) != Some(JSON_FORMAT) {
        return Err(CliError::Runtime(format!("{} is not a synthaug summary", path.display())));
    }
    if v.get("version").and_then(|f| f.as_u64()) != Some(u64::from(JSON_VERSION)) {
        return Err(CliError::Runtime(format!("{}: unsupported summary version", path.display())));
    }
    serde_json::from_value(v).map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(CsvMeta::new("demo", "abc"), &["a", "b"]);
        t.push(vec!["1".into(), "0.5".into()]);
        let back = Table::parse(&t.render()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("b"), Some(1));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = Table::new(CsvMeta::new("demo", "abc"), &["a"]).render().replace(" v1 ", " v2 ");
        assert!(Table::parse(&text).is_err());
        assert!(Table::parse("a,b\n1,2\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = config_hash(&serde_json::json!({"x": 1}));
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})));
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})));
    }
}
