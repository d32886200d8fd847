//! Line-oriented `key = value` files with `[section]` headers.
//!
//! `#` and `;` start comment lines. Keys before the first header belong to
//! the unnamed section `""`. Duplicate keys within a section are rejected.

use crate::error::{CoopError, Result};

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

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IniDocument {
    pub sections: Vec<Section>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl IniDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = vec![Section { name: String::new(), line: 0, entries: Vec::new() }];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CoopError::Parse { line, message: "unterminated section header".into() })?
                    .trim();
                if !valid_name(name) {
                    return Err(CoopError::Parse { line, message: format!("invalid section name `{name}`") });
                }
                if sections.iter().any(|sec| sec.name == name) {
                    return Err(CoopError::Parse { line, message: format!("duplicate section `[{name}]`") });
                }
                sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CoopError::Parse { line, message: format!("expected `key = value`, found `{s}`") })?;
            let key = k.trim();
            if !valid_name(key) {
                return Err(CoopError::Parse { line, message: format!("invalid key `{key}`") });
            }
            let sec = sections.last_mut().expect("root section");
            if sec.entries.iter().any(|e| e.key == key) {
                return Err(CoopError::Parse { line, message: format!("duplicate key `{key}`") });
            }
            sec.entries.push(Entry { key: key.to_string(), value: v.trim().to_string(), line });
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(CoopError::Parse {
                line: e.line,
                message: format!("unknown key `{}` in [{}]", e.key, self.name),
            }),
            None => Ok(()),
        }
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| CoopError::Parse {
                line: e.line,
                message: format!("`{key}`: cannot parse `{}`: {err}", e.value),
            }),
        }
    }

    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>().map_err(|err| CoopError::Parse {
                        line: e.line,
                        message: format!("`{key}`: cannot parse `{s}`: {err}"),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let doc = IniDocument::parse("a = 1\n# c\n[x]\nb = two words\n; c\n[y.z]\nc=3").unwrap();
        assert_eq!(doc.sections.len(), 3);
        assert_eq!(doc.section("").unwrap().get("a").unwrap().value, "1");
        assert_eq!(doc.section("x").unwrap().get("b").unwrap().value, "two words");
        assert_eq!(doc.section("y.z").unwrap().parse_value::<u32>("c").unwrap(), Some(3));
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [("[x\n", 1), ("a = 1\nb\n", 2), ("a=1\na=2", 2), ("[x]\n[x]", 2), ("[]", 1)] {
            match IniDocument::parse(text) {
                Err(CoopError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
