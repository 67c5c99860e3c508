//! TOML configuration: layering a file over task presets and applying
//! dotted-path overrides such as `target.r_exp=8`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{DriftError, Result};

/// Recursively merges `over` into `base`; tables merge, everything else
/// is replaced. A table whose `kind` tag changes is replaced whole.
pub fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o))
                if o.get("kind").is_none_or(|kind| b.get("kind") == Some(kind)) =>
            {
                merge(b, o)
            }
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_literal(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| DriftError::config(spec, "", "override must look like key.path=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(DriftError::config(path, raw, "empty key segment"));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(DriftError::config(path, raw, format!("`{k}` is not a table"))),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

pub fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    match Value::try_from(value) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => Err(DriftError::config("<root>", "", "config must be a table")),
        Err(e) => Err(DriftError::config("<root>", "", e.to_string())),
    }
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> Result<T> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| DriftError::config(error_key(&e), "", e.message().to_string()))
}

fn error_key(e: &toml::de::Error) -> String {
    // The message names the field for unknown or missing keys.
    let m = e.message();
    m.split('`').nth(1).unwrap_or("<root>").to_string()
}

pub fn parse_str(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| DriftError::config("<file>", "", e.message().to_string()))
}

pub fn read_file(path: &Path) -> Result<Table> {
    parse_str(&std::fs::read_to_string(path)?)
}
