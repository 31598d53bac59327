//! Flat `key = value` configuration text with `#` comments.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parse `key = value` lines in order. Blank lines and `#` comments are
/// skipped; duplicate keys keep the last value.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                n + 1
            )));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.retain(|(old, _)| *old != k);
        out.push((k, v));
    }
    Ok(out)
}

/// Parse `value` for field `key`, naming the field on failure.
pub fn field<F>(key: &str, value: &str) -> Result<F>
where
    F: FromStr,
    F::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("field '{key}': cannot parse '{value}': {e}")))
}

pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
