//! `--config FILE` support: `key = value` lines become `--key value` flags
//! placed right after the subcommand, so flags given on the command line
//! (which come later) take precedence.
//!
//! Keys are flag names with `-` or `_`. `true` turns a boolean flag on,
//! `false` leaves it off. `#` starts a comment.

use std::ffi::OsString;
use std::fs;

/// Global options that take a value and may precede the subcommand.
const GLOBAL_VALUE_OPTS: &[&str] = &["--threads", "--config"];

pub fn parse(text: &str) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("config line {}: expected `key = value`", idx + 1));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            return Err(format!("config line {}: empty key", idx + 1));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<(usize, OsString)> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args.get(i + 1).map(|p| (i, p.clone()));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some((i, p.into()));
        }
    }
    None
}

/// Index of the subcommand name in `args`.
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if GLOBAL_VALUE_OPTS.contains(&s.as_ref()) {
            i += 2;
        } else if s.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

/// Returns `args` with the config file's flags spliced in.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some((_, path)) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let extra = parse(&text)?;
    let Some(sub) = subcommand_index(&args) else {
        return Ok(args);
    };
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}
