//! Layered training configuration: TOML file, then `--set` overrides, then
//! dedicated flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use shadoc::pipeline::TrainConfig;
use toml::{Table, Value};

/// Parse `key.path=value`; the value is read as a TOML literal and falls back
/// to a plain string.
pub fn parse_assignment(s: &str) -> anyhow::Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .with_context(|| format!("override `{s}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{s}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

/// Set `key` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for (depth, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("`{}` is not a table", parts[..=depth].join(".")),
        };
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

pub fn read_table(path: &Path) -> anyhow::Result<Table> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>()
        .with_context(|| format!("parsing config {}", path.display()))
}

/// Deserialize the merged table, naming any unknown or mistyped key.
pub fn build(table: Table) -> anyhow::Result<TrainConfig> {
    let cfg: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid config: {}", e.message()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &TrainConfig) -> String {
    toml::to_string_pretty(cfg).expect("training config serializes to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_and_strings() {
        assert_eq!(parse_assignment("steps=5").unwrap().1, Value::Integer(5));
        assert_eq!(parse_assignment("adam.lr = 1e-4").unwrap().1, Value::Float(1e-4));
        assert_eq!(
            parse_assignment("output_dir=runs/a").unwrap().1,
            Value::String("runs/a".into())
        );
        assert!(parse_assignment("steps").is_err());
        assert!(parse_assignment("a..b=1").is_err());
    }

    #[test]
    fn nested_keys_create_tables() {
        let mut t = Table::new();
        set_path(&mut t, "model.remapper.dim", Value::Integer(16)).unwrap();
        let cfg = build(t).unwrap();
        assert_eq!(cfg.model.remapper.dim, 16);
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut t = Table::new();
        set_path(&mut t, "adam.learning_rate", Value::Float(0.1)).unwrap();
        let err = build(t).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        let back = build(to_toml(&cfg).parse().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
