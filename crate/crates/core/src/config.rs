//! Flat `key = value` configuration files with `include = other.cfg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("include cycle through {0}")]
    IncludeCycle(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn bad(key: &str, value: &str, reason: impl Into<String>) -> Self {
        ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }
}

/// Read a config file into ordered `(key, value)` pairs. Included files are
/// expanded in place, so later keys override earlier ones.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut stack = Vec::new();
    read_into(path, &mut out, &mut stack)?;
    Ok(out)
}

fn read_into(path: &Path, out: &mut Vec<(String, String)>, stack: &mut Vec<String>) -> Result<(), ConfigError> {
    let canon = fs::canonicalize(path)
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| path.display().to_string());
    if stack.contains(&canon) {
        return Err(ConfigError::IncludeCycle(canon));
    }
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    stack.push(canon);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "include" {
            let base = path.parent().unwrap_or(Path::new("."));
            read_into(&base.join(v), out, stack)?;
        } else {
            out.push((k.to_string(), v.to_string()));
        }
    }
    stack.pop();
    Ok(())
}

/// Render pairs back to the file format.
pub fn format_pairs(pairs: &BTreeMap<&'static str, String>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse::<T>()
        .map_err(|_| ConfigError::bad(key, value, "not a number"))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::bad(key, value, "expected true or false")),
    }
}
