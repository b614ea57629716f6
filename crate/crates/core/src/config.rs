//! Flat `key = value` text configs. Blank lines and `#` comments are
//! skipped; later keys override earlier ones when applied in order.

use std::str::FromStr;

use crate::error::{config_err, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(config_err!("line {}: empty key", i + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err!("{key}: expected a boolean, got {v:?}")),
    }
}

/// Comma-separated list; empty items are rejected.
pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|item| parse_value(key, item)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines() {
        let kv = parse_kv("a = 1\n  # note\nb=x y # trailing\n\n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into()), ("b".into(), "x y".into())]
        );
        assert!(parse_kv("just words").is_err());
        assert!(parse_kv(" = 3").is_err());
        assert_eq!(parse_list::<u32>("w", "8, 16").unwrap(), vec![8, 16]);
        assert!(parse_list::<u32>("w", "8,,16").is_err());
        assert!(parse_bool("b", "maybe").is_err());
    }
}
