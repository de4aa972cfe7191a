//! JSON-lines metric streams and CSV tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grpo::IterationStats;

/// One record per line, fields in declaration order.
pub fn to_jsonl(records: &[IterationStats]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_line(r));
        out.push('\n');
    }
    out
}

pub fn record_line(r: &IterationStats) -> String {
    serde_json::to_string(r).expect("metrics records always serialize")
}

pub fn parse_jsonl(text: &str) -> Result<Vec<IterationStats>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1))))
        .collect()
}

/// A small CSV table with a header row. Cells never contain commas.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Lines starting with `#` are comments and precede the header.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        let _ = writeln!(out, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }

    /// Returns the table and its comment lines.
    pub fn parse_csv(text: &str) -> Result<(Table, Vec<String>)> {
        let mut comments = Vec::new();
        let mut lines = text.lines();
        let header = loop {
            match lines.next() {
                Some(l) if l.starts_with("# ") => comments.push(l[2..].to_string()),
                Some(l) => break l,
                None => return Err(Error::Format("csv without header".into())),
            }
        };
        let header: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let row: Vec<String> = l.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(Error::Format(format!("csv row {} has {} cells", i + 1, row.len())));
            }
            rows.push(row);
        }
        Ok((Table { header, rows }, comments))
    }
}

/// Curve table: iteration, success, push_fraction, clip_fraction.
pub fn curve_table(records: &[IterationStats]) -> Table {
    let mut t = Table::new(&["iteration", "success", "push_fraction", "clip_fraction"]);
    for r in records {
        t.push(vec![
            r.iter.to_string(),
            r.rollout_success_rate.to_string(),
            r.push_fraction.to_string(),
            r.clip_fraction.to_string(),
        ]);
    }
    t
}
