//! Flat `key=value` config files. Keys are long flag names without the
//! leading dashes; values set on the command line win.

use std::ffi::OsString;
use std::path::Path;

use ftlab_core::{Error, Result};

/// Parses config text into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() || k.starts_with('-') {
            return Err(Error::Config(format!("config line {}: bad key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Flag arguments equivalent to the pairs. `true`/`false` values toggle
/// switches.
pub fn to_flags(pairs: &[(String, String)]) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => out.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
        }
    }
    out
}

/// Path given by `--config` or `--config=`, if any.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Splices the config file's flags in right after the subcommand name, so
/// that later command-line occurrences override them.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let flags = to_flags(&parse(&text)?);
    let pos = args
        .iter()
        .position(|a| subcommands.contains(&a.to_string_lossy().as_ref()));
    let Some(pos) = pos else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_switches() {
        let p = parse("# c\nlr = 1e-3\n\nweighted-loss=true\nsynth=false\n").unwrap();
        assert_eq!(p.len(), 3);
        let f: Vec<String> = to_flags(&p).into_iter().map(|s| s.into_string().unwrap()).collect();
        assert_eq!(f, ["--lr", "1e-3", "--weighted-loss"]);
        assert!(parse("novalue\n").is_err());
    }

    #[test]
    fn finds_config_path() {
        let a: Vec<OsString> = ["ftlab", "--config=x.cfg", "grid"].iter().map(Into::into).collect();
        assert_eq!(config_path(&a), Some("x.cfg".into()));
    }
}
