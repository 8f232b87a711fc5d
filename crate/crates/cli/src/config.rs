//! Flat `key=value` config files.
//!
//! Keys are long flag names, with `_` and `-` interchangeable; `#` starts a
//! comment. A file named by `--config` is spliced into the argument list
//! ahead of the real flags, so anything given on the command line wins.
//! Switches take `true` or `false`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, ArgMatches, Command};
use mannmt::{Error, Result};

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let a = a.to_str()?;
        if a == "--" {
            return None;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// `argv` with the flags of its `--config` file inserted after the
/// subcommand name.
pub fn expand(argv: Vec<OsString>, root: &Command) -> Result<Vec<OsString>> {
    let Some(sub) = argv.get(1).and_then(|s| s.to_str()).and_then(|s| root.find_subcommand(s)) else {
        return Ok(argv);
    };
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let flags = file_flags(&path, sub)?;
    let mut out = argv[..2].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn file_flags(path: &Path, sub: &Command) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    let bad = |line: usize, message: String| Error::Ingest { path: path.into(), message: format!("line {line}: {message}") };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| bad(n, format!("expected key=value, got {line:?}")))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| bad(n, format!("unknown key {key:?} for {}", sub.get_name())))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(bad(n, format!("{key} takes true or false, got {value:?}"))),
            }
        } else {
            out.push(format!("--{key}={value}").into());
        }
    }
    Ok(out)
}

/// Every flag of `cmd` that ended up with a value, as `key=value` pairs in
/// declaration order.
pub fn resolved(cmd: &Command, sub: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if id == "config" || arg.get_long().is_none() {
            continue;
        }
        let Ok(Some(raw)) = sub.try_get_raw(id) else { continue };
        let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        out.push((id.to_string(), values.join(" ")));
    }
    out
}

/// The resolved configuration as a file `--config` accepts.
pub fn render(sub: &str, entries: &[(String, String)]) -> String {
    let mut s = format!("# mannmt {sub}\n");
    for (k, v) in entries {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}
