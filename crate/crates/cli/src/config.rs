//! Layered settings: flags > config file > environment > built-in defaults.
//!
//! The config file is plain text, one `key = value` per line, `#` starts a
//! comment line. Keys are long flag names (`budget`, `lr-gnn`; underscores
//! are accepted for dashes). Its entries are spliced into argv as `--key=value`
//! ahead of the user's own flags, so a flag typed on the command line wins.
//! Every flag also reads `LMX_<FLAG>` from the environment, which clap only
//! consults when neither the command line nor the file set it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Command;

use crate::exit::Failure;

pub const CONFIG_FLAG: &str = "config";

/// `hops` → `LMX_HOPS`, `lr-gnn` → `LMX_LR_GNN`.
pub fn env_name(flag: &str) -> String {
    format!("LMX_{}", flag.to_uppercase().replace('-', "_"))
}

/// Attaches an environment variable to every long flag of every subcommand.
pub fn with_env_vars(cmd: Command) -> Command {
    cmd.mut_subcommands(|sub| {
        sub.args_override_self(true).mut_args(|arg| match arg.get_long() {
            Some(long) if long != CONFIG_FLAG => {
                let name: &'static str = env_name(long).leak();
                arg.env(name)
            }
            _ => arg,
        })
    })
}

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.push((key, value.to_string()));
    }
    Ok(out)
}

/// Position of the subcommand and the `--config` value, if any.
fn scan(args: &[OsString]) -> (Option<usize>, Option<PathBuf>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

/// Rewrites argv with the config file entries for the chosen subcommand.
pub fn layered_args(
    cmd: &Command,
    args: Vec<OsString>,
    env: impl Fn(&str) -> Option<String>,
) -> Result<Vec<OsString>, Failure> {
    let (Some(at), from_flag) = scan(&args) else {
        return Ok(args);
    };
    let Some(path) = from_flag.or_else(|| env(&env_name(CONFIG_FLAG)).map(PathBuf::from)) else {
        return Ok(args);
    };
    let Some(sub) = cmd.find_subcommand(args[at].to_string_lossy().as_ref()) else {
        return Ok(args);
    };
    let entries = read_config(&path)?;
    let known = |c: &Command, key: &str| c.get_arguments().any(|a| a.get_long() == Some(key));
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == CONFIG_FLAG {
            return Err(Failure::usage(format!("{}: `config` cannot be set from a config file", path.display())));
        }
        if known(sub, &key) {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else if !cmd.get_subcommands().any(|c| known(c, &key)) {
            return Err(Failure::usage(format!("{}: unknown key `{key}`", path.display())));
        }
    }
    let mut out = args[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("--config: cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}
