//! Multiplier table files.
//!
//! Binary: the 8-byte magic `AXMULT01` followed by 65536 little-endian `u16`
//! products in a-major order. Text: one `a b p` line per operand pair in any
//! order; `#` starts a comment.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{MultiplierSource, MultiplierSpec, TABLE_LEN};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"AXMULT01";

/// Loads a table file, detecting the format from the magic bytes. The
/// multiplier is named after the file stem.
pub fn load_multiplier(path: impl AsRef<Path>, energy_per_op: f64) -> Result<MultiplierSpec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |message: String| Error::MultiplierFile {
        path: path.to_path_buf(),
        message,
    };
    let table = if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes).map_err(fail)?
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| fail(format!("neither `AXMULT01` binary nor UTF-8 text ({e})")))?;
        parse_text(text).map_err(fail)?
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "imported".to_string());
    MultiplierSpec::new(name, table, energy_per_op, MultiplierSource::Imported)
}

fn parse_binary(bytes: &[u8]) -> std::result::Result<Vec<u16>, String> {
    let body = &bytes[BINARY_MAGIC.len()..];
    if !body.len().is_multiple_of(2) {
        return Err(format!(
            "odd payload length {} at byte offset {}",
            body.len(),
            BINARY_MAGIC.len()
        ));
    }
    let entries = body.len() / 2;
    if entries != TABLE_LEN {
        return Err(format!(
            "payload holds {entries} entries, expected {TABLE_LEN} (file ends at byte {})",
            bytes.len()
        ));
    }
    Ok(body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

fn parse_text(text: &str) -> std::result::Result<Vec<u16>, String> {
    let mut table = vec![0u16; TABLE_LEN];
    let mut seen_at = vec![0usize; TABLE_LEN];
    let mut count = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format!(
                "line {lineno}: expected `a b p`, found {} fields",
                fields.len()
            ));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<u32>()
                .map_err(|_| format!("line {lineno}: {what} `{s}` is not a non-negative integer"))
        };
        let a = parse(fields[0], "operand a")?;
        let b = parse(fields[1], "operand b")?;
        let p = parse(fields[2], "product")?;
        if a > 255 || b > 255 {
            return Err(format!("line {lineno}: operand out of range ({a}, {b})"));
        }
        if p > u16::MAX as u32 {
            return Err(format!("line {lineno}: product {p} exceeds 65535"));
        }
        let idx = ((a as usize) << 8) | b as usize;
        if seen_at[idx] != 0 {
            return Err(format!(
                "line {lineno}: duplicate pair ({a}, {b}), first given on line {}",
                seen_at[idx]
            ));
        }
        seen_at[idx] = lineno;
        table[idx] = p as u16;
        count += 1;
    }
    if count != TABLE_LEN {
        let missing = seen_at.iter().position(|&l| l == 0).unwrap_or(0);
        return Err(format!(
            "{count} entries, expected {TABLE_LEN}; first missing pair is ({}, {})",
            missing >> 8,
            missing & 0xff
        ));
    }
    Ok(table)
}

pub fn save_binary(m: &MultiplierSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(BINARY_MAGIC.len() + 2 * TABLE_LEN);
    out.extend_from_slice(BINARY_MAGIC);
    for p in m.table() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_text(m: &MultiplierSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(TABLE_LEN * 12);
    writeln!(out, "# {}: a b product", m.name()).expect("write to vec");
    for (idx, p) in m.table().iter().enumerate() {
        writeln!(out, "{} {} {}", idx >> 8, idx & 0xff, p).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
