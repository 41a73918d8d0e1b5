//! CSV tables, assertions and the human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Renders a float deterministically: integers plainly, everything else in
/// shortest round-trip scientific notation.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// A CSV table whose first column is the config hash.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), header: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width of table {}", self.name);
        self.rows.push(row);
    }

    pub fn render(&self, hash: &str) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut head = vec!["config_hash".to_string()];
        head.extend(self.header.iter().cloned());
        w.write_record(&head).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![hash.to_string()];
            rec.extend(row.iter().map(Cell::render));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub limit: f64,
}

impl Assertion {
    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.value <= self.limit,
            Bound::AtLeast => self.value >= self.limit,
        }
    }
}

/// Everything a subcommand produces.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub command: String,
    pub tables: Vec<Table>,
    pub lines: Vec<String>,
    pub assertions: Vec<Assertion>,
    pub warnings: Vec<String>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), ..Self::default() }
    }

    pub fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    pub fn warn(&mut self, s: impl Into<String>) {
        self.warnings.push(s.into());
    }

    pub fn at_most(&mut self, name: impl Into<String>, value: f64, limit: Option<f64>) {
        if let Some(limit) = limit {
            self.assertions.push(Assertion { name: name.into(), value, bound: Bound::AtMost, limit });
        }
    }

    pub fn at_least(&mut self, name: impl Into<String>, value: f64, limit: Option<f64>) {
        if let Some(limit) = limit {
            self.assertions.push(Assertion { name: name.into(), value, bound: Bound::AtLeast, limit });
        }
    }

    pub fn failed(&self, strict: bool) -> bool {
        self.assertions.iter().any(|a| !a.passed()) || (strict && !self.warnings.is_empty())
    }

    pub fn summary(&self, hash: &str, strict: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layerlab {}", self.command);
        let _ = writeln!(s, "config hash {hash}");
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        for a in &self.assertions {
            let op = if a.bound == Bound::AtMost { "<=" } else { ">=" };
            let verdict = if a.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "assert {}: {} {op} {} {verdict}", a.name, fmt_f64(a.value), fmt_f64(a.limit));
        }
        let status = if self.failed(strict) { "FAILED" } else { "OK" };
        let _ = writeln!(s, "status {status}");
        s
    }

    /// Writes `<command>*.csv`, binary blobs and `<command>.txt`; returns the paths written.
    pub fn write(&self, dir: &Path, hash: &str, strict: bool) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for t in &self.tables {
            let p = dir.join(format!("{}.csv", t.name));
            std::fs::write(&p, t.render(hash))?;
            out.push(p);
        }
        for (name, bytes) in &self.blobs {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            out.push(p);
        }
        let p = dir.join(format!("{}.txt", self.command.replace('-', "_")));
        std::fs::write(&p, self.summary(hash, strict))?;
        out.push(p);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_rendering() {
        assert_eq!(fmt_f64(256.0), "256");
        assert_eq!(fmt_f64(-3.0), "-3");
        assert_eq!(fmt_f64(0.1), "1e-1");
        assert_eq!(fmt_f64(1.7320508075688772), "1.7320508075688772e0");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_f64(1e300), "1e300");
    }

    #[test]
    fn csv_carries_hash() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![1.0.into(), "p,q".into()]);
        assert_eq!(t.render("abc"), "config_hash,a,b\nabc,1,\"p,q\"\n");
    }

    #[test]
    fn assertions_and_strict_mode() {
        let mut r = Report::new("cell");
        r.at_most("err", 0.5, Some(1.0));
        r.at_most("skipped", 5.0, None);
        assert!(!r.failed(true));
        r.warn("w");
        assert!(!r.failed(false));
        assert!(r.failed(true));
        r.at_least("gain", 0.1, Some(0.3));
        assert!(r.failed(false));
        assert!(r.summary("h", false).contains("assert gain: 1e-1 >= 3e-1 FAIL"));
    }
}
