//! Flat `key = value` configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! read by a command is recorded together with the value actually used
//! (including defaults) so the manifest shows the resolved configuration.
//! Keys present in the file but never read are reported as errors.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, (usize, String)>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`, got `{}`", raw.trim()))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                bail!("line {line_no}: invalid key `{key}`");
            }
            if let Some((prev, _)) = values.insert(key.to_string(), (line_no, value.trim().to_string())) {
                bail!("line {line_no}: key `{key}` already set on line {prev}");
            }
        }
        Ok(Self {
            values,
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Replace (or add) a key, e.g. from a command-line override.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), (0, value.to_string()));
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn parse_value<T: FromStr>(&self, key: &str, raw: &str) -> Result<T>
    where
        T::Err: Display,
    {
        raw.parse::<T>().map_err(|e| {
            let line = self.values.get(key).map_or(0, |(l, _)| *l);
            if line > 0 {
                anyhow!("line {line}: invalid value `{raw}` for `{key}`: {e}")
            } else {
                anyhow!("invalid value `{raw}` for `{key}`: {e}")
            }
        })
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match self.raw(key) {
            Some(raw) => self.parse_value(key, raw)?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn get_opt<T: FromStr + Display>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            Some(raw) => {
                let v: T = self.parse_value(key, raw)?;
                self.record(key, v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self.raw(key).unwrap_or(default).to_string();
        self.record(key, v.clone());
        v
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Clone + Display,
        T::Err: Display,
    {
        let v = match self.raw(key) {
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| self.parse_value(key, s))
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        self.record(key, v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        Ok(v)
    }

    /// Every key read so far with the value used.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }

    /// Fail on keys that were set but never read.
    pub fn ensure_consumed(&self) -> Result<()> {
        let resolved = self.resolved.borrow();
        let unknown: Vec<String> = self
            .values
            .iter()
            .filter(|(k, _)| !resolved.contains_key(*k))
            .map(|(k, (line, _))| if *line > 0 { format!("`{k}` (line {line})") } else { format!("`{k}`") })
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            bail!("unused config keys for this command: {}", unknown.join(", "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_defaults() {
        let c = Config::parse("# header\ntrain.eta = 1e-3  # inline\n\ntrain.steps=10\n").unwrap();
        assert_eq!(c.get("train.eta", 0.5).unwrap(), 1e-3);
        assert_eq!(c.get("train.steps", 0usize).unwrap(), 10);
        assert_eq!(c.get("train.batch", 1usize).unwrap(), 1);
        assert_eq!(c.resolved().get("train.batch").map(String::as_str), Some("1"));
        c.ensure_consumed().unwrap();
    }

    #[test]
    fn rejects_bad_lines_and_duplicates() {
        assert!(Config::parse("no equals sign").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
        assert!(Config::parse("a b = 1").is_err());
    }

    #[test]
    fn reports_value_errors_with_line() {
        let c = Config::parse("\ntrain.steps = ten").unwrap();
        let err = c.get("train.steps", 0usize).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn lists_and_unknown_keys() {
        let c = Config::parse("sweep.values = 0.5, 1 ,1.5\ntypo.key = 3").unwrap();
        assert_eq!(c.get_list("sweep.values", &[0.0f64]).unwrap(), vec![0.5, 1.0, 1.5]);
        let err = c.ensure_consumed().unwrap_err().to_string();
        assert!(err.contains("typo.key"));
    }
}
