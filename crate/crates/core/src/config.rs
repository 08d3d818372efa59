//! Flat `key = value` configuration text with `#` comments.

use std::path::Path;

use crate::error::{Error, Result};

/// Parses `key = value` lines in order. Blank lines and `#` comments are skipped;
/// anything else without an `=` is rejected with its line number.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_kv(&std::fs::read_to_string(path)?)
}

pub fn render_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let text = "# header\n epochs = 5 \n\nbase_lr=2e-4 # inline\n";
        let kv = parse_kv(text).unwrap();
        assert_eq!(
            kv,
            vec![
                ("epochs".to_string(), "5".to_string()),
                ("base_lr".to_string(), "2e-4".to_string())
            ]
        );
        assert_eq!(parse_kv(&render_kv(&kv)).unwrap(), kv);
    }

    #[test]
    fn rejects_malformed_lines() {
        let err = parse_kv("a = 1\nnonsense\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_kv(" = 3").is_err());
    }
}
