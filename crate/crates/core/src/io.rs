//! Export helpers: RFC-4180 CSV and raw little-endian `f64` tensors.
//!
//! A binary tensor file is the row-major sequence of its `f64` entries in
//! little-endian byte order, with no header. Shape and meaning live in a
//! JSON sidecar written next to it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Formats a float with 17 significant digits (round-trip exact).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// In-memory CSV table with CRLF record separators.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    buf: String,
    width: usize,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut c = Csv { buf: String::new(), width: header.len() };
        c.push_raw(header.iter().map(|s| quote(s.as_ref())));
        c
    }

    fn push_raw(&mut self, fields: impl Iterator<Item = String>) {
        let mut first = true;
        let mut count = 0;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            first = false;
            self.buf.push_str(&f);
            count += 1;
        }
        debug_assert!(self.width == 0 || count == self.width);
        self.buf.push_str("\r\n");
    }

    /// Appends a record; use [`Field`] to mix text and numbers.
    pub fn row(&mut self, fields: &[Field]) {
        self.push_raw(fields.iter().map(|f| match f {
            Field::Text(s) => quote(s),
            Field::Num(v) => fmt_f64(*v),
            Field::Int(i) => i.to_string(),
            Field::Empty => String::new(),
        }));
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Field {
    Text(String),
    Num(f64),
    Int(i64),
    Empty,
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::Num(v)
    }
}

impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::Int(v as i64)
    }
}

impl From<&str> for Field {
    fn from(v: &str) -> Self {
        Field::Text(v.to_string())
    }
}

impl From<String> for Field {
    fn from(v: String) -> Self {
        Field::Text(v)
    }
}

impl From<bool> for Field {
    fn from(v: bool) -> Self {
        Field::Text(if v { "true" } else { "false" }.into())
    }
}

/// Parses a CSV produced by [`Csv`] (no embedded newlines in fields).
pub fn parse_csv(text: &str) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for line in text.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let mut fields = Vec::new();
        let mut cur = String::new();
        let mut in_q = false;
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            match (c, in_q) {
                ('"', true) if chars.peek() == Some(&'"') => {
                    cur.push('"');
                    chars.next();
                }
                ('"', _) => in_q = !in_q,
                (',', false) => fields.push(std::mem::take(&mut cur)),
                _ => cur.push(c),
            }
        }
        fields.push(cur);
        rows.push(fields);
    }
    rows
}

pub fn write_f64_le(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// FNV-1a hash of a string, printed as 16 hex digits.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut s = String::new();
    write!(s, "{h:016x}").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut c = Csv::new(&["a", "b,c"]);
        c.row(&[Field::Num(0.1), Field::Text("x\"y".into())]);
        let rows = parse_csv(c.as_str());
        assert_eq!(rows[0], vec!["a", "b,c"]);
        assert_eq!(rows[1][0].parse::<f64>().unwrap(), 0.1);
        assert_eq!(rows[1][1], "x\"y");
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
