//! Resolves a [`TrainConfig`] from preset, config file, environment and flags.

use std::path::Path;

use lsg_core::TrainConfig;
use serde_json::{Map, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "LSG_";

fn as_map(cfg: &TrainConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config is a struct"),
    }
}

/// Reads a TOML file of config keys.
pub fn file_layer(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    match serde_json::to_value(table) {
        Ok(Value::Object(m)) => Ok(m),
        _ => Err(CliError::Usage(format!("config {} is not a table", path.display()))),
    }
}

/// `LSG_<FIELD>` variables for known fields. Values parse as JSON
/// scalars, falling back to plain strings.
pub fn env_layer(vars: impl IntoIterator<Item = (String, String)>) -> Map<String, Value> {
    let fields = TrainConfig::field_names();
    let mut out = Map::new();
    for (k, v) in vars {
        let Some(name) = k.strip_prefix(ENV_PREFIX) else { continue };
        let name = name.to_ascii_lowercase();
        if !fields.contains(&name) {
            continue;
        }
        let value = serde_json::from_str(v.trim()).unwrap_or(Value::String(v));
        out.insert(name, value);
    }
    out
}

/// Later layers override earlier ones; the preset is the base.
pub fn resolve(
    preset: &TrainConfig,
    file: Option<&Path>,
    env: Map<String, Value>,
    flags: Map<String, Value>,
) -> Result<TrainConfig, CliError> {
    let mut layers = vec![as_map(preset)];
    if let Some(p) = file {
        layers.push(file_layer(p)?);
    }
    layers.push(env);
    layers.push(flags);
    TrainConfig::from_layers(&layers).map_err(|e| CliError::Usage(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn precedence_is_preset_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "beta = 0.5\nn_disc = 3\nepochs = 7\n").unwrap();
        let env = env_layer([
            ("LSG_N_DISC".to_string(), "2".to_string()),
            ("LSG_EPOCHS".to_string(), "9".to_string()),
            ("LSG_UNRELATED".to_string(), "x".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ]);
        let flags = json!({"epochs": 11}).as_object().unwrap().clone();
        let cfg = resolve(&TrainConfig::toy(), Some(&path), env, flags).unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.n_disc, 2);
        assert_eq!(cfg.epochs, 11);
        assert_eq!(cfg.graph_dim, 64);
    }

    #[test]
    fn unknown_file_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "betta = 0.5\n").unwrap();
        let r = resolve(&TrainConfig::toy(), Some(&path), Map::new(), Map::new());
        assert!(matches!(r, Err(CliError::Usage(_))));
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let flags = json!({"visual_words": 2, "selected_words": 3}).as_object().unwrap().clone();
        assert!(matches!(
            resolve(&TrainConfig::toy(), None, Map::new(), flags),
            Err(CliError::Usage(_))
        ));
    }
}
