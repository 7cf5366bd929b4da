use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::CommandFactory;

use crate::Cli;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// ignored; keys may use `_` or `-`.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", origin.display(), i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("{}:{}: empty key", origin.display(), i + 1);
        }
        if out.iter().any(|(k, _)| *k == key) {
            bail!("{}:{}: duplicate key {key}", origin.display(), i + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Removes `--config FILE` from `args` and appends the file's entries as
/// flags of the chosen sub-command, skipping those given explicitly.
/// Keys that are not flags of the sub-command are rejected.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_config(&text, path)?;

    let Some(sub_name) = rest.iter().skip(1).find(|a| !a.starts_with('-')).cloned() else {
        bail!("a sub-command is required");
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        bail!("unknown sub-command {sub_name}");
    };
    let flags: Vec<(String, bool)> = sub
        .get_arguments()
        .filter_map(|a| {
            let takes_value = a.get_action().takes_values();
            a.get_long().map(|l| (l.to_string(), takes_value))
        })
        .filter(|(l, _)| l != "config" && l != "help")
        .collect();

    for (key, value) in entries {
        let Some(&(_, takes_value)) = flags.iter().find(|(l, _)| *l == key) else {
            bail!("{}: unknown key {key} for {sub_name}", path.display());
        };
        let flag = format!("--{key}");
        let given = rest.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if given {
            continue;
        }
        if takes_value {
            rest.push(format!("{flag}={value}"));
        } else if matches!(value.as_str(), "true" | "1" | "yes") {
            rest.push(flag);
        } else if !matches!(value.as_str(), "false" | "0" | "no") {
            bail!("{}: {key} expects true or false", path.display());
        }
    }
    Ok(rest)
}
