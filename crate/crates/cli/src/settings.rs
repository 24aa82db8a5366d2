//! Config file loading and `--set` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use speechsent::config::RunConfig;
use toml::{Table, Value};

use crate::UsageError;

/// Parses a sectioned `key = value` file, applies `section.key=value`
/// overrides in order and deserializes the result.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().map_err(|e| speechsent::Error::Format {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg = RunConfig::deserialize(Value::Table(table)).map_err(|e| {
        let origin = path.map_or("<overrides>".into(), |p| p.display().to_string());
        speechsent::Error::Format {
            path: origin.into(),
            reason: e.to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// `section.key=value`; the value is read as a TOML literal and falls back
/// to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!(UsageError(format!(
            "override {spec:?} is not of the form section.key=value"
        )));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("override key {key:?} must be section.key")));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!(UsageError(format!("override {key:?}: {p} is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
