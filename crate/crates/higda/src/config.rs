//! JSON run configuration with dotted-path command-line overrides.
//!
//! Unknown keys are rejected, both in the file (serde `deny_unknown_fields`)
//! and in override paths (navigation requires every segment to exist).

use crate::error::{HigdaError, Result};
use crate::train_eval::RunConfig;
use std::path::Path;

/// Parse a full or partial config; missing fields take their defaults.
pub fn parse_config_str(json: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(json)
        .map_err(|e| HigdaError::Config(format!("config parse: {e}")))?;
    Ok(cfg)
}

/// Apply one `dotted.path=value` override to a config JSON tree. The path
/// must name an existing field; the value is parsed as JSON, falling back to
/// a bare string.
pub fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HigdaError::Config(format!("override '{spec}' is not key=value")))?;
    if path.is_empty() {
        return Err(HigdaError::Config("empty override key".into()));
    }
    let mut node = &mut *tree;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            HigdaError::Config(format!("'{}' is not an object", segments[..i].join(".")))
        })?;
        node = obj
            .get_mut(*seg)
            .ok_or_else(|| HigdaError::Config(format!("unknown config key '{path}' ('{seg}')")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    Ok(())
}

/// Load (or default) a config, apply overrides, and validate.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| HigdaError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_config_str(&text)?
        }
        None => RunConfig::defaults(),
    };
    let mut tree = serde_json::to_value(&base).expect("config serializes");
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| HigdaError::Config(format!("override produced invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write the resolved configuration snapshot; the snapshot re-parses to the
/// same config (idempotent re-runs).
pub fn write_snapshot(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    Ok(())
}
