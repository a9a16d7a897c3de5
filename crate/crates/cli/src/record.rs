//! One CSV row per derivative estimate.

use std::cmp::Ordering;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};

pub const HEADER: &str = "method,t,k,J,epoch,error,seed,wall_ms,q,tref,kref";

/// Error column: a distance, or the divergence sentinel `div`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorValue {
    Finite(f64),
    Div,
}

impl ErrorValue {
    pub fn value(&self) -> Option<f64> {
        match *self {
            ErrorValue::Finite(x) => Some(x),
            ErrorValue::Div => None,
        }
    }

    /// `Div` sorts above every finite value.
    pub fn or_inf(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub t: usize,
    pub k: usize,
    pub j: usize,
    pub epoch: f64,
    pub error: ErrorValue,
    pub seed: u64,
    /// `None` is written as `na`; timings are off by default so reruns
    /// produce identical files.
    pub wall_ms: Option<f64>,
    pub q: f64,
    pub tref: usize,
    pub kref: usize,
}

impl RunRecord {
    pub fn to_row(&self) -> String {
        let err = match self.error {
            ErrorValue::Finite(x) => x.to_string(),
            ErrorValue::Div => "div".into(),
        };
        let wall = self.wall_ms.map_or_else(|| "na".to_string(), |w| w.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.method, self.t, self.k, self.j, self.epoch, err, self.seed, wall, self.q, self.tref, self.kref
        )
    }

    pub fn parse_row(line: &str) -> Result<RunRecord> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            bail!("expected 11 fields, got {}", f.len());
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>().with_context(|| format!("field {} '{}'", i + 1, f[i]))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse::<usize>().with_context(|| format!("field {} '{}'", i + 1, f[i]))
        };
        Ok(RunRecord {
            method: f[0].to_string(),
            t: int(1)?,
            k: int(2)?,
            j: int(3)?,
            epoch: num(4)?,
            error: if f[5] == "div" { ErrorValue::Div } else { ErrorValue::Finite(num(5)?) },
            seed: f[6].parse().with_context(|| format!("seed '{}'", f[6]))?,
            wall_ms: if f[7] == "na" { None } else { Some(num(7)?) },
            q: num(8)?,
            tref: int(9)?,
            kref: int(10)?,
        })
    }

    fn sort_key(&self) -> (&str, u64, usize, usize, usize) {
        (&self.method, self.seed, self.t, self.k, self.j)
    }
}

/// Canonical order: method, seed, t, k, J.
pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()).then(a.epoch.partial_cmp(&b.epoch).unwrap_or(Ordering::Equal)));
}

pub fn format_csv(records: &[RunRecord]) -> String {
    let mut rows = records.to_vec();
    sort_records(&mut rows);
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in &rows {
        let _ = writeln!(out, "{}", r.to_row());
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(anyhow!("bad header {:?}", other)),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| RunRecord::parse_row(l).with_context(|| format!("line {}", i + 2)))
        .collect()
}
