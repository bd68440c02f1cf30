//! Run configuration files and dotted-key overrides.
//!
//! A config file is either a JSON object (a [`RunConfig`], or a run
//! manifest whose `config` field is one) or `key = value` lines:
//!
//! ```text
//! # comments and blank lines are ignored
//! prompt = a cat playing the piano
//! n_strokes = 32
//! asds.guidance_scale = 50
//! init_cfg.lambda = 0.3
//! ```
//!
//! Values are read as JSON when they parse as JSON and as bare strings
//! otherwise. Unknown keys are rejected.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pipeline::RunConfig;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses `key=value` text into `(dotted key, value)` pairs.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(config_err(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), parse_value(v)));
    }
    Ok(out)
}

/// Flattens a JSON object into dotted-key assignments. Objects nested
/// under keys that are `null` by default (optional sections) are kept whole.
fn flatten(prefix: &str, v: &Value, defaults: &Value, out: &mut Vec<(String, Value)>) {
    match (v, defaults) {
        (Value::Object(m), Value::Object(_)) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, defaults.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Reads a config file into dotted-key assignments.
pub fn load_file(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let mut v: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if let Some(inner) = v.get_mut("config").map(Value::take) {
            v = inner;
        }
        let mut out = Vec::new();
        flatten("", &v, &default_tree(), &mut out);
        Ok(out)
    } else {
        parse_key_values(&text)
    }
}

fn default_tree() -> Value {
    serde_json::to_value(RunConfig::default()).expect("RunConfig serializes")
}

/// True when `key` names a field of the defaults, or lies under an
/// optional section that is `null` by default.
fn known_key(defaults: &Value, key: &str) -> bool {
    let mut node = defaults;
    for part in key.split('.') {
        match node {
            Value::Null => return true,
            Value::Object(m) => match m.get(part) {
                Some(next) => node = next,
                None => return false,
            },
            _ => return false,
        }
    }
    true
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            break;
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Applies assignments in order over the defaults, later ones winning.
pub fn resolve(layers: &[Vec<(String, Value)>]) -> Result<RunConfig> {
    let defaults = default_tree();
    let mut tree = defaults.clone();
    for layer in layers {
        for (k, v) in layer {
            if !known_key(&defaults, k) {
                return Err(config_err(format!("unknown config key {k}")));
            }
            set_path(&mut tree, k, v.clone())?;
        }
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| config_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Mode, Plateau};

    #[test]
    fn key_values_override_defaults() {
        let kv = parse_key_values("# c\nprompt = a cat\nn_strokes=12\n\nasds.guidance_scale = 7.5\nmode = vanilla\n").unwrap();
        let cfg = resolve(&[kv]).unwrap();
        assert_eq!(cfg.prompt, "a cat");
        assert_eq!(cfg.n_strokes, 12);
        assert_eq!(cfg.asds.guidance_scale, 7.5);
        assert_eq!(cfg.mode, Mode::Vanilla);
        assert_eq!(cfg.iters_a, RunConfig::default().iters_a);
    }

    #[test]
    fn later_layers_win() {
        let file = vec![("seed".to_string(), Value::from(1)), ("iters_a".to_string(), Value::from(3))];
        let flags = vec![("seed".to_string(), Value::from(9))];
        let cfg = resolve(&[file, flags]).unwrap();
        assert_eq!((cfg.seed, cfg.iters_a), (9, 3));
    }

    #[test]
    fn optional_sections_can_be_set() {
        let kv = parse_key_values("plateau.window = 20\nplateau.min_rel_improvement = 0.01\nasds.grad_clip = 5").unwrap();
        let cfg = resolve(&[kv]).unwrap();
        assert_eq!(
            cfg.plateau,
            Some(Plateau {
                window: 20,
                min_rel_improvement: 0.01
            })
        );
        assert_eq!(cfg.asds.grad_clip, Some(5.0));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let typo = parse_key_values("n_stroke = 3").unwrap();
        assert!(matches!(resolve(&[typo]), Err(Error::Config(_))));
        let nested = parse_key_values("asds.nope = 3").unwrap();
        assert!(resolve(&[nested]).is_err());
        let bad = parse_key_values("n_strokes = many").unwrap();
        assert!(resolve(&[bad]).is_err());
        assert!(parse_key_values("just words").is_err());
        let invalid = parse_key_values("n_strokes = 0").unwrap();
        assert!(resolve(&[invalid]).is_err());
    }

    #[test]
    fn json_files_and_manifests_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.prompt = "x".into();
        cfg.init_cfg.lambda = 0.25;
        cfg.plateau = Some(Plateau {
            window: 5,
            min_rel_improvement: 0.1,
        });
        let plain = dir.path().join("c.json");
        std::fs::write(&plain, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(resolve(&[load_file(&plain).unwrap()]).unwrap(), cfg);
        let manifest = dir.path().join("m.json");
        let m = serde_json::json!({"config": cfg, "critic": {"kind": "toy"}});
        std::fs::write(&manifest, m.to_string()).unwrap();
        assert_eq!(resolve(&[load_file(&manifest).unwrap()]).unwrap(), cfg);
    }
}
