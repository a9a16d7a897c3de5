//! Plain-text configuration: `key = value` lines grouped under `[section]`
//! headers. Keys are addressed by their dotted path, so
//!
//! ```text
//! [stochastic.schedule]
//! b1 = 0.5
//! ```
//!
//! defines `stochastic.schedule.b1`. A dotted key may also be written out
//! in full outside any section. `#` starts a comment. Lists are comma
//! separated.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// A configuration problem tied to the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at {}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        let mut prefix = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::new(format!("line {lineno}"), "unterminated section header"))?
                    .trim();
                if !valid_key(name) {
                    return Err(ConfigError::new(format!("line {lineno}"), format!("bad section name '{name}'")));
                }
                prefix = format!("{name}.");
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(format!("line {lineno}"), "expected key = value"))?;
            let k = k.trim();
            if !valid_key(k) {
                return Err(ConfigError::new(format!("line {lineno}"), format!("bad key '{k}'")));
            }
            let path = format!("{prefix}{k}");
            if let Some(prev) = cfg.entries.get(&path) {
                return Err(ConfigError::new(path, format!("duplicate key (first set on line {})", prev.line)));
            }
            cfg.entries.insert(path, Entry { value: v.trim().to_string(), line: lineno });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(path.display().to_string(), format!("cannot read: {e}")))?;
        Config::parse(&text)
    }

    /// Overrides (or adds) a value, as done for command-line flags.
    pub fn set(&mut self, path: &str, value: impl ToString) {
        self.entries.insert(path.to_string(), Entry { value: value.to_string(), line: 0 });
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    fn raw(&self, path: &str) -> Option<&str> {
        let e = self.entries.get(path)?;
        self.used.borrow_mut().insert(path.to_string());
        Some(e.value.as_str())
    }

    fn parse_value<T: FromStr>(path: &str, s: &str, what: &str) -> Result<T, ConfigError> {
        s.parse().map_err(|_| ConfigError::new(path, format!("expected {what}, got '{s}'")))
    }

    pub fn get_or<T: FromStr>(&self, path: &str, default: T, what: &str) -> Result<T, ConfigError> {
        match self.raw(path) {
            Some(s) => Self::parse_value(path, s, what),
            None => Ok(default),
        }
    }

    pub fn f64_or(&self, path: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.get_or(path, default, "a number")?;
        if !v.is_finite() {
            return Err(ConfigError::new(path, "must be finite"));
        }
        Ok(v)
    }

    pub fn positive_f64_or(&self, path: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.f64_or(path, default)?;
        if v <= 0.0 {
            return Err(ConfigError::new(path, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    pub fn usize_or(&self, path: &str, default: usize) -> Result<usize, ConfigError> {
        self.get_or(path, default, "a nonnegative integer")
    }

    pub fn positive_usize_or(&self, path: &str, default: usize) -> Result<usize, ConfigError> {
        let v = self.usize_or(path, default)?;
        if v == 0 {
            return Err(ConfigError::new(path, "must be at least 1"));
        }
        Ok(v)
    }

    pub fn u64_or(&self, path: &str, default: u64) -> Result<u64, ConfigError> {
        self.get_or(path, default, "a nonnegative integer")
    }

    pub fn bool_or(&self, path: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(path) {
            None => Ok(default),
            Some("true" | "yes" | "on" | "1") => Ok(true),
            Some("false" | "no" | "off" | "0") => Ok(false),
            Some(s) => Err(ConfigError::new(path, format!("expected true or false, got '{s}'"))),
        }
    }

    pub fn str_or(&self, path: &str, default: &str) -> String {
        self.raw(path).unwrap_or(default).to_string()
    }

    /// One of `choices`, compared case-insensitively.
    pub fn choice_or(&self, path: &str, default: &str, choices: &[&str]) -> Result<String, ConfigError> {
        let v = self.str_or(path, default).to_ascii_lowercase();
        if choices.contains(&v.as_str()) {
            Ok(v)
        } else {
            Err(ConfigError::new(path, format!("expected one of {}, got '{v}'", choices.join(", "))))
        }
    }

    pub fn list_or<T: FromStr + Clone>(&self, path: &str, default: &[T], what: &str) -> Result<Vec<T>, ConfigError> {
        match self.raw(path) {
            None => Ok(default.to_vec()),
            Some(s) => {
                let items: Vec<&str> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
                if items.is_empty() {
                    return Err(ConfigError::new(path, "empty list"));
                }
                items.iter().map(|x| Self::parse_value(path, x, what)).collect()
            }
        }
    }

    /// Fails on the first key nothing has read, so typos do not pass
    /// silently.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, e)) if e.line > 0 => Err(ConfigError::new(k.clone(), format!("unknown key (line {})", e.line))),
            Some((k, _)) => Err(ConfigError::new(k.clone(), "unknown key")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys() {
        let c = Config::parse(
            "# top\nrun.seeds = 3\n[problem]\nn = 100 # rows\n[stochastic.schedule]\nb1 = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.usize_or("run.seeds", 1).unwrap(), 3);
        assert_eq!(c.usize_or("problem.n", 0).unwrap(), 100);
        assert_eq!(c.f64_or("stochastic.schedule.b1", 0.0).unwrap(), 0.5);
        assert_eq!(c.f64_or("missing.key", 2.5).unwrap(), 2.5);
        c.finish().unwrap();
    }

    #[test]
    fn errors_carry_paths() {
        let c = Config::parse("[problem]\nn = ten\n").unwrap();
        let e = c.usize_or("problem.n", 1).unwrap_err();
        assert_eq!(e.path, "problem.n");
        assert!(e.to_string().contains("problem.n"));

        let e = Config::parse("[a]\nx = 1\nx = 2\n").unwrap_err();
        assert_eq!(e.path, "a.x");
        assert!(Config::parse("[a\n").is_err());
        assert!(Config::parse("novalue\n").is_err());
        assert!(Config::parse("bad key = 1\n").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let c = Config::parse("[problem]\nn = 1\ntypo = 2\n").unwrap();
        c.usize_or("problem.n", 0).unwrap();
        let e = c.finish().unwrap_err();
        assert_eq!(e.path, "problem.typo");
    }

    #[test]
    fn lists_bools_choices() {
        let mut c = Config::parse("ks = 10, 100,1000\nflag = yes\nmode = IID\n").unwrap();
        assert_eq!(c.list_or::<usize>("ks", &[], "integers").unwrap(), vec![10, 100, 1000]);
        assert!(c.bool_or("flag", false).unwrap());
        assert_eq!(c.choice_or("mode", "reshuffle", &["iid", "reshuffle"]).unwrap(), "iid");
        c.set("flag", "maybe");
        assert!(c.bool_or("flag", false).is_err());
        c.set("ks", "");
        assert!(c.list_or::<usize>("ks", &[], "integers").is_err());
        assert!(c.positive_usize_or("zero", 0).is_err());
        c.set("x", "nan");
        assert!(c.f64_or("x", 0.0).is_err());
    }
}
