//! The line-oriented `[section]` / `key = value` format shared by corpus
//! manifests, experiment configs, run summaries and reports.
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys that
//! appear before the first header belong to the unnamed section `""`.
//! Every section and entry remembers its line number so validation errors
//! can point at the offending line.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Section {
            name: name.into(),
            line: 0,
            entries: Vec::new(),
        }
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            Error::config(format!(
                "line {}: section [{}] is missing required key `{}`",
                self.line, self.name, key
            ))
        })
    }

    /// Parses `key` if present.
    pub fn parse<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| {
                Error::config(format!(
                    "line {}: [{}] {} = {:?}: {}",
                    e.line, self.name, key, e.value, err
                ))
            }),
        }
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Comma separated list of values.
    pub fn parse_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(e) = self.entry(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            out.push(item.parse::<T>().map_err(|err| {
                Error::config(format!(
                    "line {}: [{}] {}: item {:?}: {}",
                    e.line, self.name, key, item, err
                ))
            })?);
        }
        Ok(Some(out))
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(Error::config(format!(
                    "line {}: unknown key `{}` in section [{}]",
                    e.line, e.key, self.name
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.entries.push(Entry {
            key: key.into(),
            value: value.to_string(),
            line: 0,
        });
    }

    /// Error pointing at this section's header line.
    pub fn error(&self, msg: impl fmt::Display) -> Error {
        Error::config(format!("line {}: [{}]: {}", self.line, self.name, msg))
    }

    /// Error pointing at the line of `key` (or the header when absent).
    pub fn key_error(&self, key: &str, msg: impl fmt::Display) -> Error {
        let line = self.entry(key).map_or(self.line, |e| e.line);
        Error::config(format!("line {}: [{}] {}: {}", line, self.name, key, msg))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Document> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::config(format!("line {line_no}: unterminated section header"))
                })?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::config(format!("line {line_no}: empty section name")));
                }
                if sections.iter().any(|s| s.name == name) {
                    return Err(Error::config(format!(
                        "line {line_no}: duplicate section [{name}]"
                    )));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line: line_no,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {line_no}: expected `key = value`, got {line:?}"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {line_no}: empty key")));
            }
            if sections.is_empty() {
                sections.push(Section::new(""));
            }
            let section = sections.last_mut().expect("pushed above");
            if section.entry(key).is_some() {
                return Err(Error::config(format!(
                    "line {line_no}: duplicate key `{key}` in section [{}]",
                    section.name
                )));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: line_no,
            });
        }
        Ok(Document { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sections whose name starts with `prefix`, in file order.
    pub fn sections_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Section> {
        self.sections.iter().filter(move |s| s.name.starts_with(prefix))
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if !s.name.is_empty() {
                if i > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", s.name);
            }
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }
}
