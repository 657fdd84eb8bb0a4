use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    /// Oracle or formula the value comes from.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Suite output. Everything except `timing` and `wall_clock_ms` is a pure
/// function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub metrics: Vec<Metric>,
    pub flags: Vec<Flag>,
    pub tables: BTreeMap<String, serde_json::Value>,
    pub timing: BTreeMap<String, f64>,
    pub wall_clock_ms: f64,
}

impl BenchReport {
    pub fn new(command: impl Into<String>, config: serde_json::Value) -> Self {
        BenchReport {
            schema: REPORT_SCHEMA,
            command: command.into(),
            config,
            metrics: Vec::new(),
            flags: Vec::new(),
            tables: BTreeMap::new(),
            timing: BTreeMap::new(),
            wall_clock_ms: 0.0,
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64, provenance: impl Into<String>) {
        self.metrics.push(Metric {
            name: name.into(),
            value,
            provenance: provenance.into(),
        });
    }

    pub fn flag(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.flags.push(Flag {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn table(&mut self, name: impl Into<String>, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("serializable table");
        self.tables.insert(name.into(), v);
    }

    pub fn passed(&self) -> bool {
        self.flags.iter().all(|f| f.pass)
    }

    /// Copy with wall-clock dependent fields cleared.
    pub fn deterministic(&self) -> Self {
        BenchReport {
            timing: BTreeMap::new(),
            wall_clock_ms: 0.0,
            ..self.clone()
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "== {} ==", self.command);
        let width = self.metrics.iter().map(|m| m.name.len()).max().unwrap_or(0);
        for m in &self.metrics {
            let _ = writeln!(s, "  {:width$}  {:>14.6}  [{}]", m.name, m.value, m.provenance);
        }
        for (k, v) in &self.timing {
            let _ = writeln!(s, "  {k:width$}  {v:>14.3}  [host timing]");
        }
        for f in &self.flags {
            let _ = writeln!(s, "  {} {}: {}", if f.pass { "PASS" } else { "FAIL" }, f.name, f.detail);
        }
        let _ = writeln!(s, "  wall clock {:.0} ms", self.wall_clock_ms);
        s
    }
}
