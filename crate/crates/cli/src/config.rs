//! `key = value` configuration files turned into command-line tokens.
//!
//! Keys outside any `[section]` apply to every subcommand; keys under
//! `[name]` apply only to subcommand `name`. Underscores in keys become
//! hyphens. `true` becomes a bare flag, `false` drops it, and a bracketed list
//! repeats the flag once per element.

use std::path::PathBuf;

/// Tokens for `subcommand` from the text of a configuration file.
pub fn config_tokens(text: &str, subcommand: &str) -> Result<Vec<String>, String> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        if section.as_deref().is_some_and(|s| s != subcommand) {
            continue;
        }
        let flag = format!("--{}", key.trim().replace('_', "-"));
        let value = value.trim();
        let values: Vec<String> = match value.strip_prefix('[').and_then(|v| v.strip_suffix(']')) {
            Some(list) => list.split(',').map(unquote).filter(|v| !v.is_empty()).collect(),
            None => vec![unquote(value)],
        };
        for v in values {
            match v.as_str() {
                "true" => out.push(flag.clone()),
                "false" => {}
                _ => {
                    out.push(flag.clone());
                    out.push(v);
                }
            }
        }
    }
    Ok(out)
}

fn unquote(s: &str) -> String {
    let s = s.trim();
    s.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(s).to_string()
}

/// Position of the subcommand and the `--config` path, if any.
pub fn scan(args: &[String], subcommands: &[&str]) -> (Option<usize>, Option<PathBuf>) {
    let sub = args.iter().position(|a| subcommands.contains(&a.as_str()));
    let mut config = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = it.next().map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    (sub, config)
}
