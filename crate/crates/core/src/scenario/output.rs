//! CSV files with fixed column order.

use std::path::Path;

use super::ScenarioError;
use crate::av::AvTrace;
use crate::toy::ToyTrace;

pub const TOY_TRACE_COLUMNS: [&str; 6] = ["step", "x", "y", "u0", "cost_step", "cost_cum"];

pub const AV_TRACE_COLUMNS: [&str; 13] = [
    "t",
    "s",
    "e",
    "dpsi",
    "Uy",
    "r",
    "delta",
    "u0",
    "sigma_max",
    "obj",
    "J_nom",
    "J_con",
    "status",
];

pub const AV_DIAGNOSTICS_COLUMNS: [&str; 6] = [
    "t",
    "observed",
    "iterations",
    "kkt_max",
    "flagged",
    "solve_ms",
];

/// Rows of formatted cells under a header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), ScenarioError> {
        let io = |e: csv::Error| ScenarioError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush()
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
    }
}

/// Shortest representation that reads back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn toy_trace_table(trace: &ToyTrace) -> Table {
    let mut t = Table::new(&TOY_TRACE_COLUMNS);
    for s in &trace.steps {
        t.push(vec![
            s.step.to_string(),
            num(s.state.x),
            num(s.state.y),
            num(s.u0),
            num(s.cost_step),
            num(s.cost_cum),
        ]);
    }
    t
}

pub fn av_trace_table(trace: &AvTrace) -> Table {
    let mut t = Table::new(&AV_TRACE_COLUMNS);
    for r in &trace.rows {
        let x = &r.state;
        t.push(vec![
            num(r.t),
            num(x.s),
            num(x.e),
            num(x.dpsi),
            num(x.uy),
            num(x.r),
            num(r.delta),
            num(r.u0),
            num(r.sigma_max),
            num(r.objective),
            num(r.j_nom),
            num(r.j_con),
            r.status.as_str().to_string(),
        ]);
    }
    t
}

/// Wall-time and solver effort; kept apart so result files stay
/// reproducible.
pub fn av_diagnostics_table(trace: &AvTrace) -> Table {
    let mut t = Table::new(&AV_DIAGNOSTICS_COLUMNS);
    for r in &trace.rows {
        t.push(vec![
            num(r.t),
            (r.observed as u8).to_string(),
            r.iterations.to_string(),
            num(r.kkt_max),
            (r.flagged as u8).to_string(),
            num(r.solve_time.as_secs_f64() * 1e3),
        ]);
    }
    t
}
