//! Desk-scale reproductions of the deterministic and stochastic sweeps.

pub mod elastic;
pub mod poisoning;

use anyhow::Result;
use fixdiff_core::deriv_stoch::{Sampling, ScheduleKind, StepSchedule};
use fixdiff_core::linalg::vecops;
use fixdiff_core::problems::Dataset;

use crate::config::{Config, ConfigError};
use crate::record::{ErrorValue, RunRecord};
use crate::svg::{LogPlot, Series};

/// Files produced by one experiment, besides `runs.csv`.
#[derive(Debug, Clone, Default)]
pub struct ExpOutput {
    pub records: Vec<RunRecord>,
    /// `(file name, contents)`
    pub files: Vec<(String, String)>,
}

/// Schedule given relative to `β = 2/(1−q²)`: `a₁ = b₁β`, `a₂ = b₂β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedSpec {
    pub kind: ScheduleKind,
    pub b1: f64,
    pub b2: f64,
}

impl SchedSpec {
    pub fn build(&self, q: f64) -> fixdiff_core::Result<StepSchedule> {
        StepSchedule::from_scaled(self.kind, self.b1, self.b2, 2.0 / (1.0 - q * q))
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            ScheduleKind::Harmonic => "dec",
            ScheduleKind::Constant => "const",
        }
    }

    /// Reads `<prefix>.dec.{b1,b2}` and `<prefix>.const.{b1,b2}`, keeping
    /// only the kinds listed under `<prefix>.kinds`.
    pub fn read_all(cfg: &Config, prefix: &str, dec: (f64, f64), cons: (f64, f64)) -> Result<Vec<SchedSpec>, ConfigError> {
        let kinds: Vec<String> = cfg.list_or(&format!("{prefix}.kinds"), &["dec".to_string(), "const".to_string()], "dec or const")?;
        let mut all = Vec::new();
        for (name, kind, def) in [("dec", ScheduleKind::Harmonic, dec), ("const", ScheduleKind::Constant, cons)] {
            let b1 = cfg.positive_f64_or(&format!("{prefix}.{name}.b1"), def.0)?;
            let b2 = cfg.positive_f64_or(&format!("{prefix}.{name}.b2"), def.1)?;
            all.push((name, SchedSpec { kind, b1, b2 }));
        }
        let mut out = Vec::new();
        for k in kinds {
            match all.iter().find(|(n, _)| *n == k.to_ascii_lowercase()) {
                Some((_, s)) if !out.contains(s) => out.push(*s),
                Some(_) => {}
                None => return Err(ConfigError::new(format!("{prefix}.kinds"), format!("unknown schedule '{k}'"))),
            }
        }
        Ok(out)
    }
}

pub fn read_sampling(cfg: &Config, path: &str, default: &str) -> Result<Sampling, ConfigError> {
    Ok(match cfg.choice_or(path, default, &["iid", "reshuffle"])?.as_str() {
        "iid" => Sampling::Iid,
        _ => Sampling::Reshuffle,
    })
}

/// `‖Xᵀy‖∞ / n`: the smallest `λ₁` giving the all-zero lasso solution.
pub fn lambda_max(train: &Dataset) -> Result<f64> {
    let y = train.real_targets()?;
    Ok(vecops::norm_inf(&train.x.matvec_t(y)) / train.rows() as f64)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub(crate) fn error_of(r: fixdiff_core::Result<Vec<f64>>, reference: &[f64]) -> ErrorValue {
    match r {
        Ok(v) if vecops::all_finite(&v) => ErrorValue::Finite(vecops::dist(&v, reference)),
        _ => ErrorValue::Div,
    }
}

/// Median error per method against `x(record)`, one series per method.
pub(crate) fn median_series(records: &[RunRecord], methods: &[String], x: impl Fn(&RunRecord) -> f64) -> Vec<Series> {
    let mut out = Vec::new();
    for m in methods {
        let mut cells: std::collections::BTreeMap<(usize, usize, usize), (f64, Vec<f64>)> = Default::default();
        for r in records.iter().filter(|r| &r.method == m) {
            cells.entry((r.t, r.k, r.j)).or_insert_with(|| (x(r), Vec::new())).1.push(r.error.or_inf());
        }
        let mut points: Vec<(f64, f64)> = cells.into_values().map(|(x, errs)| (x, median(errs))).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(Series { label: m.clone(), points });
    }
    out
}

pub(crate) fn plot(title: &str, x_label: &str, series: Vec<Series>, markers: Vec<(f64, String)>) -> String {
    LogPlot {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "median Euclidean error to reference".into(),
        series,
        markers,
    }
    .render()
}
