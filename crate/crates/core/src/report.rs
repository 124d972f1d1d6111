//! Run reports and their JSON / CSV / trace encodings.
//!
//! The CSV form is long-format with header `field,value`. `field` is a
//! JSON pointer into the JSON form; containers get their own row (`{}` or
//! `[]`) ahead of their children, and leaf values are JSON literals. That
//! keeps it loadable by spreadsheet tools and lossless on the way back.

use crate::ledger::Protocol;
use crate::sim::{MessageStats, Tick, TraceEvent};
use crate::switch::SwitchLog;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::io::{self, Write};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SAFETY: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

/// Default output directory for reports and traces.
pub const OUT_DIR_ENV: &str = "DCAST_OUT_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub p50: Tick,
    pub p95: Tick,
    pub max: Tick,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(mut v: Vec<Tick>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_unstable();
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            count: v.len() as u64,
            p50: rank(0.50),
            p95: rank(0.95),
            max: *v.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Heights at which two honest ledgers hold different entries.
    pub conflicting_heights: u64,
    /// Pre-switch ledger snapshots that are not a prefix of the final ledger.
    pub snapshot_violations: u64,
    /// HotStuff engines that saw a commit contradicting their chain.
    pub engine_faults: u64,
    /// Raft checks, enforced only when no node is Byzantine.
    pub cft_checks: bool,
    pub election_violations: u64,
    pub log_matching_violations: u64,
    pub leader_completeness_violations: u64,
    /// First few violations, human readable.
    pub details: Vec<String>,
}

const MAX_DETAILS: usize = 20;

impl SafetyReport {
    pub fn ok(&self) -> bool {
        let cft = !self.cft_checks
            || (self.election_violations == 0
                && self.log_matching_violations == 0
                && self.leader_completeness_violations == 0);
        self.conflicting_heights == 0
            && self.snapshot_violations == 0
            && self.engine_faults == 0
            && cft
    }

    pub fn note(&mut self, s: impl FnOnce() -> String) {
        if self.details.len() < MAX_DETAILS {
            self.details.push(s());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: u32,
    pub committed_height: u64,
    pub epoch: u64,
    pub protocol: Protocol,
    pub honest: bool,
    pub crashed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub duration: Tick,
    pub initial_protocol: Protocol,
    pub nodes: Vec<NodeSummary>,
    pub commit_latency: LatencySummary,
    pub messages: MessageStats,
    pub switches: SwitchLog,
    pub safety: SafetyReport,
    /// Fraction of honest node-time spent in each protocol.
    pub time_share: BTreeMap<Protocol, f64>,
}

impl RunReport {
    pub fn safe(&self) -> bool {
        self.safety.ok()
    }

    pub fn exit_code(&self) -> i32 {
        if self.safe() {
            EXIT_OK
        } else {
            EXIT_SAFETY
        }
    }

    /// Smallest committed height among honest, live nodes.
    pub fn min_honest_height(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|s| s.honest && !s.crashed)
            .map(|s| s.committed_height)
            .min()
            .unwrap_or(0)
    }

    pub fn max_height(&self) -> u64 {
        self.nodes
            .iter()
            .map(|s| s.committed_height)
            .max()
            .unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn to_csv(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["field", "value"]).expect("in-memory write");
        flatten("", &value, &mut |path, v| {
            w.write_record([path, v]).expect("in-memory write");
        });
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }

    pub fn from_csv(s: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let mut root = Value::Null;
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let (path, raw) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
            let v: Value = serde_json::from_str(raw).map_err(|e| format!("{path}: {e}"))?;
            insert(&mut root, path, v)?;
        }
        serde_json::from_value(root).map_err(|e| e.to_string())
    }
}

fn escape(seg: &str) -> String {
    seg.replace('~', "~0").replace('/', "~1")
}

fn unescape(seg: &str) -> String {
    seg.replace("~1", "/").replace("~0", "~")
}

fn flatten(path: &str, v: &Value, emit: &mut impl FnMut(&str, &str)) {
    match v {
        Value::Object(m) => {
            emit(path, "{}");
            for (k, c) in m {
                flatten(&format!("{path}/{}", escape(k)), c, emit);
            }
        }
        Value::Array(a) => {
            emit(path, "[]");
            for (i, c) in a.iter().enumerate() {
                flatten(&format!("{path}/{i}"), c, emit);
            }
        }
        leaf => emit(path, &leaf.to_string()),
    }
}

fn insert(root: &mut Value, path: &str, v: Value) -> Result<(), String> {
    if path.is_empty() {
        *root = v;
        return Ok(());
    }
    let (parent, last) = path
        .rsplit_once('/')
        .ok_or_else(|| format!("bad field `{path}`"))?;
    let slot = root
        .pointer_mut(parent)
        .ok_or_else(|| format!("field `{path}` precedes its container"))?;
    match slot {
        Value::Object(m) => {
            m.insert(unescape(last), v);
        }
        Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| format!("bad index in `{path}`"))?;
            if i != a.len() {
                return Err(format!("array rows out of order at `{path}`"));
            }
            a.push(v);
        }
        _ => return Err(format!("field `{path}` is under a scalar")),
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_trace(events: &[TraceEvent], mut w: impl Write) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(s: &str) -> serde_json::Result<Vec<TraceEvent>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s = LatencySummary::from_samples((1..=100).rev().collect());
        assert_eq!((s.count, s.p50, s.p95, s.max), (100, 50, 95, 100));
        let one = LatencySummary::from_samples(vec![7]);
        assert_eq!((one.p50, one.p95, one.max), (7, 7, 7));
        assert_eq!(
            LatencySummary::from_samples(Vec::new()),
            LatencySummary::default()
        );
    }

    #[test]
    fn pointer_escaping_survives_csv() {
        let mut root = Value::Null;
        let v: Value = serde_json::json!({"a/b": {"c~d": [1, "x,y", null]}, "e": []});
        flatten("", &v, &mut |p, raw| {
            insert(&mut root, p, serde_json::from_str(raw).unwrap()).unwrap()
        });
        assert_eq!(root, v);
    }

    #[test]
    fn safety_ok_ignores_cft_checks_when_off() {
        let mut s = SafetyReport {
            election_violations: 1,
            ..Default::default()
        };
        assert!(s.ok());
        s.cft_checks = true;
        assert!(!s.ok());
    }
}
