//! Minimal CSV writer: header row, `.` decimal separator, LF line endings.

use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        Self { buf, columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "csv row width mismatch");
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buf
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf.as_bytes())?;
        Ok(())
    }
}

/// Formats a float with enough digits to round-trip, `.` decimal separator.
pub fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    // {} on f64 prints the shortest representation that round-trips.
    write!(s, "{v}").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_lf_rows() {
        let mut w = CsvWriter::new(&["a", "b"]);
        w.row(&[fmt_f64(1.5), fmt_f64(-0.25)]);
        assert_eq!(w.into_string(), "a,b\n1.5,-0.25\n");
    }
}
