//! Run-directory file formats. Every file carries a header with the config
//! hash, seed and schema; nothing time-dependent is written.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::SCHEMA;

pub const SCORES: &str = "scores.jsonl";
pub const TRACES: &str = "traces.jsonl";
pub const REFLECTIONS: &str = "reflections.jsonl";
pub const RULES: &str = "rules.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const RESOLVED: &str = "config.resolved.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    pub seed: u64,
    pub schema: String,
    pub kind: String,
}

impl Header {
    pub fn new(config_hash: &str, seed: u64, kind: &str) -> Self {
        Header {
            config_hash: config_hash.to_string(),
            seed,
            schema: SCHEMA.to_string(),
            kind: kind.to_string(),
        }
    }

    pub fn with_kind(&self, kind: &str) -> Self {
        Header { kind: kind.to_string(), ..self.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    header: &Header,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut buf = serde_json::to_string(&HeaderLine { header: header.clone() })?;
    buf.push('\n');
    for r in rows {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Header>, Vec<T>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut header = None;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(line) {
                header = Some(h.header);
                continue;
            }
        }
        rows.push(
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?,
        );
    }
    Ok((header, rows))
}

/// Pretty JSON object `{"header": ..., <key>: value}` plus a newline.
pub fn write_json<T: Serialize>(path: &Path, header: &Header, key: &str, value: &T) -> Result<()> {
    let mut m = serde_json::Map::new();
    m.insert("header".into(), serde_json::to_value(header)?);
    m.insert(key.into(), serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&Value::Object(m))?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json_field<T: DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let Some(field) = v.get_mut(key).map(Value::take) else {
        bail!("{} has no {key:?} field", path.display());
    };
    serde_json::from_value(field).with_context(|| format!("{key} in {}", path.display()))
}

/// Tab-separated table with a leading `#` line naming the run.
pub fn write_tsv(path: &Path, header: &Header, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    writeln!(f, "# config_hash={} seed={} schema={}", header.config_hash, header.seed, header.schema)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}
