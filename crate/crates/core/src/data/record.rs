//! Ordered `key=value` text records, used for configs and metrics.
//!
//! Blank lines and lines starting with `#` are ignored on parse. Keys may not
//! contain `=` or whitespace; values may not contain newlines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{read_file, write_file, DataError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Record {
    entries: Vec<(String, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && !key.contains('=')
        && !key.chars().any(char::is_whitespace)
        && !key.starts_with('#')
}

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    /// Inserts or replaces `key`, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        assert!(valid_key(key), "invalid record key {key:?}");
        assert!(
            !value.contains('\n'),
            "record value for {key} contains a newline"
        );
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, DataError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| DataError::Parse {
                    line: self.line_of(key),
                    message: format!("{key}={v}: {e}"),
                })
            })
            .transpose()
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries
            .iter()
            .position(|(k, _)| k == key)
            .map_or(0, |i| i + 1)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(i).1)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses one `key=value` line, `line` being its 1-based number.
    pub(crate) fn parse_line(text: &str, line: usize) -> Result<(String, String), DataError> {
        let (k, v) = text.split_once('=').ok_or_else(|| DataError::Parse {
            line,
            message: format!("expected key=value, found {text:?}"),
        })?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(DataError::Parse {
                line,
                message: format!("invalid key {k:?}"),
            });
        }
        Ok((k.to_string(), v.trim().to_string()))
    }

    pub fn parse(text: &str) -> Result<Record, DataError> {
        let mut rec = Record::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = Record::parse_line(line, i + 1)?;
            if rec.get(&k).is_some() {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("duplicate key {k}"),
                });
            }
            rec.entries.push((k, v));
        }
        Ok(rec)
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Record, DataError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| DataError::Malformed {
            what: "record",
            offset: e.utf8_error().valid_up_to(),
            message: "not UTF-8".into(),
        })?;
        Record::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_file(path, self.render().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order() {
        let mut r = Record::new();
        r.set("mode", "kd_ig");
        r.set("alpha", 0.01);
        r.set("temperature", 2.5);
        r.set("alpha", 0.05);
        let text = r.render();
        assert_eq!(text, "mode=kd_ig\nalpha=0.05\ntemperature=2.5\n");
        assert_eq!(Record::parse(&text).unwrap(), r);
        assert_eq!(r.get_parsed::<f64>("temperature").unwrap(), Some(2.5));
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let r = Record::parse("# run\n\nseed = 7\n").unwrap();
        assert_eq!(r.get("seed"), Some("7"));
    }

    #[test]
    fn errors_are_positioned() {
        let err = Record::parse("a=1\nnonsense\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        let err = Record::parse("a=1\na=2\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        let r = Record::parse("a=x\n").unwrap();
        assert!(r.get_parsed::<f64>("a").is_err());
    }
}
