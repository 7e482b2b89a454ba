//! `key=value` defaults files for `--config`.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use relight::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            field: format!("{}:{}", origin.display(), i + 1),
            message: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Appends `--key value` for every config entry whose flag is absent from
/// `args`. A value of `true` becomes a bare switch; `false` is dropped.
pub fn apply(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config");
    let Some(pos) = pos else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .ok_or_else(|| Error::Argument("--config needs a file path".into()))?
        .clone();
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rest: Vec<OsString> = args[..pos].iter().chain(&args[pos + 2..]).cloned().collect();
    let present = |key: &str, rest: &[OsString]| {
        let flag = format!("--{key}");
        let prefix = format!("--{key}=");
        rest.iter().any(|a| a.to_str().is_some_and(|s| s == flag || s.starts_with(&prefix)))
    };
    for (key, value) in parse(&text, path)? {
        if present(&key, &rest) {
            continue;
        }
        match value.as_str() {
            "false" => {}
            "true" => rest.push(format!("--{key}").into()),
            _ => {
                rest.push(format!("--{key}").into());
                rest.push(value.into());
            }
        }
    }
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn command_line_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        fs::write(&cfg, "# defaults\nckpt = a.ckpt\nout=o.png\n\nseed=3\nverbose=true\nquiet=false\n").unwrap();
        let args = os(&["relight", "enhance", "--config", cfg.to_str().unwrap(), "--out", "x.png"]);
        let got = apply(args).unwrap();
        assert_eq!(got, os(&["relight", "enhance", "--out", "x.png", "--ckpt", "a.ckpt", "--seed", "3", "--verbose"]));
    }

    #[test]
    fn errors() {
        assert!(parse("nonsense", Path::new("c")).is_err());
        assert!(apply(os(&["relight", "--config"])).is_err());
        assert!(matches!(apply(os(&["relight", "--config", "/nonexistent/c"])), Err(Error::NotFound { .. })));
        assert_eq!(parse("max_upload_mb=4", Path::new("c")).unwrap(), vec![("max-upload-mb".into(), "4".into())]);
    }
}
