//! Line-based experiment configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Keys before the first header belong to the unnamed section `""`. Values
//! are trimmed; booleans are `true`/`false`; lists are comma-separated; paths
//! are resolved against the directory of the file. Manifests use the same
//! format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    base_dir: PathBuf,
}

fn err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

impl ConfigFile {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(i + 1, "unterminated section header"))?.trim();
                if name.is_empty() {
                    return Err(err(i + 1, "empty section name"));
                }
                current = name.to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(err(i + 1, "empty key"));
            }
            let section = sections.entry(current.clone()).or_default();
            if section.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(err(i + 1, format!("duplicate key `{key}` in [{current}]")));
            }
        }
        Ok(Self { sections, base_dir: base_dir.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn parse_value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{v}`"))),
        }
    }

    pub fn value_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.parse_value(section, key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!("[{section}] {key}: expected true or false, got `{v}`"))),
        }
    }

    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{s}`"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// A path value resolved against the config directory; must exist.
    pub fn existing_path(&self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => {
                let p = self.base_dir.join(v);
                if !p.exists() {
                    return Err(Error::Config(format!("[{section}] {key}: {} does not exist", p.display())));
                }
                Ok(Some(p))
            }
        }
    }

    pub fn paths(&self, section: &str, key: &str) -> Result<Vec<PathBuf>> {
        let Some(items) = self.list::<String>(section, key)? else {
            return Ok(Vec::new());
        };
        items
            .into_iter()
            .map(|v| {
                let p = self.base_dir.join(&v);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(Error::Config(format!("[{section}] {key}: {} does not exist", p.display())))
                }
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(root) = self.sections.get("") {
            for (k, v) in root {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        for (name, entries) in self.sections.iter().filter(|(n, _)| !n.is_empty()) {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}
