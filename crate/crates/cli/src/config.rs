//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// A recognised key and its default; `None` marks a required key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: Option<&'static str>,
}

pub const fn key(name: &'static str, default: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some(default),
    }
}

pub const fn required(name: &'static str) -> KeySpec {
    KeySpec { name, default: None }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{k}`", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_assignment(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{s}`")))?;
    if k.trim().is_empty() {
        return Err(CliError::Usage(format!("empty key in `{s}`")));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the config file, then overrides in order; unknown keys are rejected.
    pub fn resolve(
        command: &str,
        keys: &[KeySpec],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for k in keys {
            if let Some(d) = k.default {
                values.insert(k.name.to_string(), d.to_string());
            }
        }
        let from_file = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        for (k, v) in from_file.iter().chain(overrides) {
            if !keys.iter().any(|spec| spec.name == k) {
                let known: Vec<_> = keys.iter().map(|s| s.name).collect();
                return Err(CliError::Usage(format!(
                    "unknown key `{k}` for {command} (known: {})",
                    known.join(", ")
                )));
            }
            values.insert(k.clone(), v.clone());
        }
        for k in keys {
            if !values.contains_key(k.name) {
                return Err(CliError::Usage(format!("{command}: missing required key `{}`", k.name)));
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key `{key}` is not declared for {}", self.command))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("{}: invalid value `{raw}` for `{key}`", self.command)))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Usage(format!("{}: `{key}` must be true or false, got `{other}`", self.command))),
        }
    }

    /// Comma-separated list; empty items are rejected.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key);
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse().map_err(|_| {
                    CliError::Usage(format!("{}: invalid item `{item}` in `{key}`", self.command))
                })
            })
            .collect()
    }

    /// Sorted `key=value` lines, re-readable by [`parse_config_text`].
    pub fn render(&self) -> String {
        let mut out = format!("# resolved configuration: {}\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
