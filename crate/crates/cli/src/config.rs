//! `key = value` configuration files. Values become argument defaults, so
//! anything given on the command line still wins.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key = value", n + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"').to_string();
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.insert(key, value);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

/// `--config <file>` or `--config=<file>` anywhere in argv.
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

fn arg_id(cmd: &Command, long: &str) -> Option<String> {
    cmd.get_arguments().find(|a| a.get_long() == Some(long)).map(|a| a.get_id().to_string())
}

/// Installs config values as defaults on the top-level command and on every
/// subcommand that knows the key. Keys no command knows are an error.
pub fn apply(mut cmd: Command, values: &BTreeMap<String, String>) -> Result<Command> {
    for (key, value) in values {
        if key == "config" {
            continue;
        }
        let mut known = false;
        if let Some(id) = arg_id(&cmd, key) {
            known = true;
            let v = value.clone();
            cmd = cmd.mut_arg(id, move |a| a.default_value(v));
        }
        let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
        for name in names {
            let sub = cmd.find_subcommand(&name).expect("listed above");
            if let Some(id) = arg_id(sub, key) {
                known = true;
                let v = value.clone();
                cmd = cmd.mut_subcommand(name, move |s| s.mut_arg(id, move |a| a.default_value(v)));
            }
        }
        if !known {
            bail!("unknown configuration key `{key}`");
        }
    }
    Ok(cmd)
}
