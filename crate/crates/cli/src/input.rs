//! Line-oriented input files: one item per line, with `\n`, `\t` and `\\`
//! escapes. Blank lines are skipped but still count toward line numbers.

use std::path::Path;

use crate::CliError;

/// One decoded item and the 1-based line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub line: usize,
    pub text: Vec<u8>,
}

pub fn unescape(line: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(line.len());
    let mut bytes = line.bytes();
    while let Some(b) = bytes.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match bytes.next() {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'\\') => out.push(b'\\'),
            Some(other) => return Err(format!("unknown escape \\{}", other as char)),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

pub fn parse_items(text: &str, path: &Path) -> Result<Vec<Item>, CliError> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let text = unescape(raw).map_err(|message| CliError::Input { path: path.to_path_buf(), line: i + 1, message })?;
        items.push(Item { line: i + 1, text });
    }
    Ok(items)
}

pub fn read_items(path: &Path) -> Result<Vec<Item>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_items(&text, path)
}
