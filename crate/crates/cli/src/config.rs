//! Config loading with `key=value` overrides applied to the TOML tree.

use std::path::Path;

use leakid::pipeline::PipelineConfig;
use leakid::{Error, Result};
use toml::{Table, Value};

/// Parse the right-hand side of an override as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Read `path`, apply `overrides` in order, validate, resolve relative paths.
pub fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut root: Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let merged = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = PipelineConfig::from_toml_str(&merged)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_keys_and_types() {
        let mut t: Table = "[detection]\nslack = 0.5\n".parse().unwrap();
        apply_override(&mut t, "detection.slack=1.25").unwrap();
        apply_override(&mut t, "net.max_epochs=7").unwrap();
        apply_override(&mut t, "variant=BASE").unwrap();
        assert_eq!(t["detection"]["slack"].as_float(), Some(1.25));
        assert_eq!(t["net"]["max_epochs"].as_integer(), Some(7));
        assert_eq!(t["variant"].as_str(), Some("BASE"));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "variant.x=1").is_err());
    }
}
