//! Flat `key = value` configuration text and typed value parsing.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Ranges and lists are comma separated (`-20, 20`).

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses config text into ordered `(key, value)` pairs.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}", n + 1), "empty key"));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override as given on the command line.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::config(arg, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}` as {}", std::any::type_name::<T>())))
}

pub fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{raw}`"))),
    }
}

pub fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    let raw = raw.trim().trim_start_matches(['(', '[']).trim_end_matches([')', ']']);
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(key, p)).collect()
}

/// A two-element `lo, hi` range with `lo <= hi`.
pub fn range<T: FromStr + PartialOrd + Copy>(key: &str, raw: &str) -> Result<(T, T)> {
    let v: Vec<T> = list(key, raw)?;
    match v.as_slice() {
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        [_, _] => Err(Error::config(key, format!("range `{raw}` is not ordered"))),
        _ => Err(Error::config(key, format!("expected `lo, hi`, got `{raw}`"))),
    }
}

/// Optional value where `none` (or empty) means absent.
pub fn optional<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" | "none" | "off" => Ok(None),
        _ => value(key, raw).map(Some),
    }
}

pub fn format_range<T: std::fmt::Display>(r: (T, T)) -> String {
    format!("{}, {}", r.0, r.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_comments() {
        let kv = parse_flat("# comment\n\ntrain.epochs = 5\naugment.rotation_degrees=-20, 20\n").unwrap();
        assert_eq!(kv, vec![("train.epochs".into(), "5".into()), ("augment.rotation_degrees".into(), "-20, 20".into())]);
        assert!(parse_flat("novalue").is_err());
    }

    #[test]
    fn typed_values() {
        assert_eq!(range::<f64>("k", "-20, 20").unwrap(), (-20.0, 20.0));
        assert!(range::<f64>("k", "3, 1").is_err());
        assert_eq!(list::<f64>("k", "[0.25,0.75]").unwrap(), vec![0.25, 0.75]);
        assert_eq!(optional::<usize>("k", "none").unwrap(), None);
        assert!(boolean("k", "maybe").is_err());
        let err = value::<usize>("train.epochs", "x").unwrap_err().to_string();
        assert!(err.contains("train.epochs"));
    }
}
