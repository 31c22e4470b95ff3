use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Output directory plus the provenance header stamped on each file.
pub struct Sink {
    pub dir: PathBuf,
    pub header: Vec<(String, String)>,
}

impl Sink {
    pub fn new(dir: PathBuf, header: Vec<(String, String)>) -> Result<Sink> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Sink { dir, header })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `# key: value` lines followed by the CSV body from `body`.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        for (k, v) in &self.header {
            writeln!(buf, "# {k}: {v}")?;
        }
        body(&mut buf)?;
        self.write(name, &buf)
    }

    /// `{"header": {...}, <fields of value>}` as pretty JSON.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let header: BTreeMap<&str, &str> = self.header.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let mut doc = serde_json::Map::new();
        doc.insert("header".into(), serde_json::to_value(header)?);
        match serde_json::to_value(value)? {
            serde_json::Value::Object(m) => doc.extend(m),
            other => {
                doc.insert("value".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Reads a JSON document written by [`Sink::json`], dropping the header.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(m) = v.as_object_mut() {
        m.remove("header");
    }
    serde_json::from_value(v).with_context(|| format!("decoding {}", path.display()))
}
