//! `key=value` option files merged in front of the command line.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a config file into `--key value` argument pairs.
///
/// Blank lines and `#` comments are skipped. A value of `true` turns the key
/// into a bare switch and `false` drops it.
pub fn config_args(text: &str, origin: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {line:?}", origin.display(), n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("{}:{}: empty key", origin.display(), n + 1);
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

/// Extracts `--config FILE` (or `--config=FILE`) from `args` and splices the
/// file's options in right after the subcommand name, so explicit flags,
/// which come later, take precedence.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut iter = args.into_iter();
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(iter.next().context("--config needs a file")?);
        } else if let Some(path) = s.strip_prefix("--config=") {
            config = Some(path.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let extra = config_args(&text, path)?;
    let at = rest
        .iter()
        .position(|a| subcommands.contains(&a.to_string_lossy().as_ref()))
        .map_or(rest.len(), |i| i + 1);
    rest.splice(at..at, extra);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[OsString]) -> Vec<String> {
        v.iter().map(|s| s.to_string_lossy().into_owned()).collect()
    }

    #[test]
    fn parses_pairs_and_switches() {
        let text = "# defaults\ntrees = 5\nmax_leaf=50\ncheck-lemma1=true\nverbose=false\n\n";
        let args = config_args(text, Path::new("c.cfg")).unwrap();
        assert_eq!(strs(&args), ["--trees", "5", "--max-leaf", "50", "--check-lemma1"]);
        assert!(config_args("oops", Path::new("c.cfg")).is_err());
    }

    #[test]
    fn spliced_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "trees=7\n").unwrap();
        let args: Vec<OsString> = ["xreg", "--threads", "1", "train", "--config"]
            .iter()
            .map(OsString::from)
            .chain([cfg.clone().into_os_string(), "--trees".into(), "2".into()])
            .collect();
        let out = expand(args, &["train", "predict"]).unwrap();
        assert_eq!(
            strs(&out),
            ["xreg", "--threads", "1", "train", "--trees", "7", "--trees", "2"]
        );
    }
}
