//! CSV tables with a `#`-prefixed JSON header line.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Float with 17 significant digits; infinities print as `inf` / `-inf`.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write<W: Write, H: Serialize>(&self, mut out: W, header: &H) -> Result<()> {
        let json = serde_json::to_string(header).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "# {json}")?;
        self.write_body(out)
    }

    /// Column line and rows only.
    pub fn write_body<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv<H: Serialize>(&self, header: &H) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf, header)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    }
}
