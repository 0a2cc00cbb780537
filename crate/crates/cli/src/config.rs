//! Merges a JSON config file into the command line.
//!
//! Keys are long flag names. A key applies only when the flag is absent
//! from the command line, so explicit flags always win. Values may be
//! strings, numbers, booleans (switch flags) or arrays (joined by commas).
//! An object stored under a subcommand name supplies keys for that
//! subcommand only.

use std::path::Path;

use serde_json::{Map, Value};

use crate::CliError;

pub const SUBCOMMANDS: [&str; 4] = ["gen-data", "train", "complete", "eval"];

/// Value of `--config` in `args`, if any.
pub fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn subcommand(args: &[String]) -> Option<&str> {
    args.iter().skip(1).map(String::as_str).find(|a| SUBCOMMANDS.contains(a))
}

fn has_flag(args: &[String], key: &str) -> bool {
    let long = format!("--{key}");
    let eq = format!("--{key}=");
    args.iter().any(|a| *a == long || a.starts_with(&eq))
}

fn push_value(out: &mut Vec<String>, key: &str, v: &Value) -> Result<(), CliError> {
    match v {
        Value::Bool(true) => out.push(format!("--{key}")),
        Value::Bool(false) | Value::Null => {}
        Value::String(s) => out.extend([format!("--{key}"), s.clone()]),
        Value::Number(n) => out.extend([format!("--{key}"), n.to_string()]),
        Value::Array(items) => {
            let parts: Result<Vec<String>, CliError> = items
                .iter()
                .map(|i| match i {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(CliError::Usage(format!("config key '{key}': unsupported array item"))),
                })
                .collect();
            out.extend([format!("--{key}"), parts?.join(",")]);
        }
        Value::Object(_) => return Err(CliError::Usage(format!("config key '{key}': nested objects are not flags"))),
    }
    Ok(())
}

/// Command line with config-file values appended for every flag the user
/// did not give explicitly. `accepts(sub, key)` tells whether subcommand
/// `sub` (or the global flags, for `None`) takes `--key`; flat keys meant
/// for other subcommands are skipped, keys no subcommand knows are errors.
pub fn merge(
    args: Vec<String>,
    path: &Path,
    accepts: &dyn Fn(Option<&str>, &str) -> bool,
) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let root: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not a JSON object: {e}", path.display())))?;
    let sub = subcommand(&args).map(str::to_string);
    let mut extra = Vec::new();
    let apply = |map: &Map<String, Value>, extra: &mut Vec<String>| -> Result<(), CliError> {
        for (k, v) in map {
            if k == "config" || SUBCOMMANDS.contains(&k.as_str()) || has_flag(&args, k) {
                continue;
            }
            let here = accepts(None, k) || accepts(sub.as_deref(), k);
            if !here {
                if SUBCOMMANDS.iter().any(|s| accepts(Some(s), k)) {
                    continue;
                }
                return Err(CliError::Usage(format!("config key '{k}' is not a known flag")));
            }
            push_value(extra, k, v)?;
        }
        Ok(())
    };
    apply(&root, &mut extra)?;
    if let Some(Value::Object(m)) = sub.as_deref().and_then(|s| root.get(s)) {
        apply(m, &mut extra)?;
    }
    let mut merged = args.clone();
    merged.extend(extra);
    Ok(merged)
}
