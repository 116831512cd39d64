//! Minimal `[section]` / `key = value` text format shared by scene specs and
//! run configurations. `#` starts a comment; sections may repeat.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    /// Empty for keys that precede the first header.
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Rejects keys outside `allowed`, and duplicates.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !allowed.contains(&e.key.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "line {}: unknown key '{}' in [{}]",
                    e.line, e.key, self.name
                )));
            }
            if self.entries[..i].iter().any(|p| p.key == e.key) {
                return Err(Error::InvalidInput(format!("line {}: duplicate key '{}'", e.line, e.key)));
            }
        }
        Ok(())
    }

    /// Parses the value of `key`, if present.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                Error::InvalidInput(format!("line {}: cannot parse '{}' for key '{}'", e.line, e.value, key))
            }),
        }
    }

    /// Parses a comma-separated list of values.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => split_list(&e.value)
                .map(|v| {
                    v.parse().map_err(|_| {
                        Error::InvalidInput(format!("line {}: cannot parse '{}' in list '{}'", e.line, v, key))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

pub fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

pub fn parse(text: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section { name: String::new(), line: 0, entries: Vec::new() }];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::InvalidInput(format!("line {line_no}: unterminated section header")))?
                .trim();
            if name.is_empty() {
                return Err(Error::InvalidInput(format!("line {line_no}: empty section name")));
            }
            sections.push(Section { name: name.to_string(), line: line_no, entries: Vec::new() });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("line {line_no}: expected key = value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::InvalidInput(format!("line {line_no}: empty key")));
        }
        sections.last_mut().unwrap().entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: line_no,
        });
    }
    if sections[0].entries.is_empty() {
        sections.remove(0);
    }
    Ok(sections)
}

/// Renders sections back to text, one `key = value` per line.
pub fn render(sections: &[(&str, Vec<(&str, String)>)]) -> String {
    let mut out = String::new();
    for (i, (name, entries)) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if !name.is_empty() {
            let _ = writeln!(out, "[{name}]");
        }
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let s = parse("top = 1\n# c\n[a]\nx = 2 # trailing\n\n[b]\ny=hello\n[a]\nx = 3\n").unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].name, "");
        assert_eq!(s[1].parse::<i32>("x").unwrap(), Some(2));
        assert_eq!(s[2].get("y").unwrap().value, "hello");
        assert_eq!(s[3].parse::<i32>("x").unwrap(), Some(3));
    }

    #[test]
    fn malformed_lines() {
        assert!(parse("[a\n").is_err());
        assert!(parse("novalue\n").is_err());
        assert!(parse("= 3\n").is_err());
        let s = parse("[a]\nx = 1\nx = 2\n").unwrap();
        assert!(s[0].check_keys(&["x"]).is_err());
        assert!(s[0].check_keys(&["y"]).is_err());
        assert!(s[0].parse::<u8>("x").is_ok());
        let s = parse("[a]\nl = 1, 2,3\nbad = q\n").unwrap();
        assert_eq!(s[0].parse_list::<u32>("l").unwrap(), Some(vec![1, 2, 3]));
        assert!(s[0].parse::<f64>("bad").is_err());
    }
}
