//! Scenario files: TOML with one section per concern. Every field has a
//! default, so an empty file is a valid four-node Raft run.
//!
//! ```toml
//! [cluster]
//! n = 4
//! f = 1
//! protocol = "raft"          # raft | hotstuff-basic | hotstuff-chained
//! duration = 10000
//! seed = 7
//!
//! [channel]
//! loss_prob = 0.05
//! latency_min = 5
//! latency_max = 20
//! bandwidth_cap = 1000
//! partitions = ["1000-3000:0,1|2,3", "5000-6000:2>0"]
//! bandwidth_schedule = ["8000:5"]
//!
//! [workload]
//! rate = 0.2                 # commands per tick
//!
//! [faults]
//! plan = ["2000:3:equivocate", "500:1:crash:4000"]
//!
//! [switch]
//! enabled = true
//! cooldown = 1000
//! manual = ["4000:hotstuff-basic"]
//! ```

use crate::fault::{FaultEvent, FaultPlan, FraudParams};
use crate::hotstuff::PacemakerConfig;
use crate::ledger::{NodeId, Protocol};
use crate::node::NodeParams;
use crate::raft::RaftConfig;
use crate::sim::{ChannelModel, LatencyDist, Partition, Tick};
use crate::switch::SwitchPolicy;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub n: usize,
    pub f: usize,
    pub protocol: String,
    pub duration: Tick,
    pub seed: u64,
    pub override_unsafe: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            n: 4,
            f: 1,
            protocol: "raft".into(),
            duration: 10_000,
            seed: 1,
            override_unsafe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub loss_prob: f64,
    pub latency_min: Tick,
    pub latency_max: Tick,
    pub bandwidth_cap: u32,
    /// `start-end:a>b` severs one direction; `start-end:0,1|2,3` severs
    /// every link between the two groups.
    pub partitions: Vec<String>,
    /// `tick:cap` steps.
    pub bandwidth_schedule: Vec<String>,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            latency_min: 5,
            latency_max: 5,
            bandwidth_cap: 1000,
            partitions: Vec::new(),
            bandwidth_schedule: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub rate: f64,
    /// Last tick at which commands arrive; defaults to 90% of the
    /// duration so in-flight commits can settle.
    pub until: Option<Tick>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            rate: 0.1,
            until: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSection {
    /// `tick:node:kind[:until]`
    pub plan: Vec<String>,
    pub fraud_latency_factor: f64,
    pub fraud_period: Tick,
    pub fraud_duty: f64,
    pub fraud_delay: Tick,
}

impl Default for FaultSection {
    fn default() -> Self {
        let d = FraudParams::default();
        Self {
            plan: Vec::new(),
            fraud_latency_factor: d.latency_factor,
            fraud_period: d.period,
            fraud_duty: d.duty,
            fraud_delay: d.delay_burst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SwitchSection {
    pub enabled: bool,
    /// `tick:protocol` operator requests.
    pub manual: Vec<String>,
    #[serde(flatten)]
    pub policy: SwitchPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub cluster: ClusterSection,
    pub channel: ChannelSection,
    pub workload: WorkloadSection,
    pub faults: FaultSection,
    pub switch: SwitchSection,
    pub raft: RaftConfig,
    pub hotstuff: PacemakerConfig,
}

/// Every problem found in a scenario, one per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub errors: Vec<String>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid scenario:")?;
        for e in &self.errors {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioError {}

impl ScenarioError {
    fn one(e: impl Into<String>) -> Self {
        Self {
            errors: vec![e.into()],
        }
    }
}

/// A scenario turned into the pieces the runner consumes.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub protocol: Protocol,
    pub channel: ChannelModel,
    pub plan: FaultPlan,
    pub manual: Vec<(Tick, Protocol)>,
    pub params: NodeParams,
    pub duration: Tick,
    pub rate: f64,
    pub workload_until: Tick,
    pub seed: u64,
}

fn parse_partition(s: &str) -> Result<Vec<Partition>, String> {
    let err = || format!("channel.partitions: `{s}` is not start-end:a>b or start-end:A|B");
    let (range, links) = s.split_once(':').ok_or_else(err)?;
    let (a, b) = range.split_once('-').ok_or_else(err)?;
    let start: Tick = a.trim().parse().map_err(|_| err())?;
    let end: Tick = b.trim().parse().map_err(|_| err())?;
    if end <= start {
        return Err(format!("channel.partitions: `{s}` ends before it starts"));
    }
    let ids = |g: &str| -> Result<Vec<NodeId>, String> {
        g.split(',')
            .map(|x| x.trim().parse::<u32>().map(NodeId).map_err(|_| err()))
            .collect()
    };
    let mk = |from, to| Partition {
        from,
        to,
        start,
        end,
    };
    if let Some((x, y)) = links.split_once('>') {
        let (x, y) = (ids(x)?, ids(y)?);
        Ok(x.iter()
            .flat_map(|&f| y.iter().map(move |&t| mk(f, t)))
            .collect())
    } else if let Some((x, y)) = links.split_once('|') {
        let (x, y) = (ids(x)?, ids(y)?);
        let mut v = Vec::new();
        for &f in &x {
            for &t in &y {
                v.push(mk(f, t));
                v.push(mk(t, f));
            }
        }
        Ok(v)
    } else {
        Err(err())
    }
}

fn parse_tick_pair<T: std::str::FromStr>(s: &str, field: &str) -> Result<(Tick, T), String> {
    let err = || format!("{field}: `{s}` is not tick:value");
    let (t, v) = s.split_once(':').ok_or_else(err)?;
    Ok((
        t.trim().parse().map_err(|_| err())?,
        v.trim().parse().map_err(|_| err())?,
    ))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::one(e.message().to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::one(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Sets a dotted field (`cluster.protocol`, `switch.cooldown`) from its
    /// TOML spelling; bare words are taken as strings.
    pub fn set(&mut self, field: &str, value: &str) -> Result<(), ScenarioError> {
        let mut root = toml::Value::try_from(&*self).expect("scenario serializes");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let (path, last) = match field.rsplit_once('.') {
            Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
            None => (Vec::new(), field),
        };
        let mut table = root.as_table_mut().expect("scenario is a table");
        for p in path {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ScenarioError::one(format!("{field}: not a table path")))?;
        }
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&root).expect("value serializes");
        *self = Self::parse(&text).map_err(|e| ScenarioError {
            errors: e
                .errors
                .into_iter()
                .map(|m| format!("{field}: {m}"))
                .collect(),
        })?;
        Ok(())
    }

    pub fn validate(&self) -> Result<Compiled, ScenarioError> {
        let mut errs = Vec::new();
        let c = &self.cluster;
        if c.n == 0 {
            errs.push("cluster.n: must be > 0".to_string());
        }
        if c.n < 3 * c.f + 1 && !c.override_unsafe {
            errs.push(format!(
                "cluster.n: {} < 3f+1 = {} (set override_unsafe to allow)",
                c.n,
                3 * c.f + 1
            ));
        }
        if c.duration == 0 {
            errs.push("cluster.duration: must be > 0".to_string());
        }
        let protocol = match c.protocol.parse::<Protocol>() {
            Ok(p) => p,
            Err(e) => {
                errs.push(format!("cluster.protocol: {e}"));
                Protocol::Raft
            }
        };
        let ch = &self.channel;
        let mut partitions = Vec::new();
        for p in &ch.partitions {
            match parse_partition(p) {
                Ok(v) => partitions.extend(v),
                Err(e) => errs.push(e),
            }
        }
        for p in &partitions {
            if p.from.index() >= c.n || p.to.index() >= c.n {
                errs.push(format!(
                    "channel.partitions: node out of range for n={}",
                    c.n
                ));
                break;
            }
        }
        let mut schedule = Vec::new();
        for s in &ch.bandwidth_schedule {
            match parse_tick_pair::<u32>(s, "channel.bandwidth_schedule") {
                Ok(v) => schedule.push(v),
                Err(e) => errs.push(e),
            }
        }
        schedule.sort();
        let latency = if ch.latency_min == ch.latency_max {
            LatencyDist::Fixed(ch.latency_min)
        } else {
            LatencyDist::Uniform {
                min: ch.latency_min,
                max: ch.latency_max,
            }
        };
        if ch.latency_min == 0 {
            errs.push("channel.latency_min: must be >= 1".to_string());
        }
        let channel = ChannelModel {
            loss_prob: ch.loss_prob,
            latency,
            bandwidth_cap: ch.bandwidth_cap,
            bandwidth_schedule: schedule,
            partitions,
        };
        if let Err(e) = channel.validate() {
            errs.push(format!("channel: {e}"));
        }
        if !(self.workload.rate >= 0.0 && self.workload.rate.is_finite()) {
            errs.push("workload.rate: must be a finite number >= 0".to_string());
        }
        let mut events = Vec::new();
        for s in &self.faults.plan {
            match s.parse::<FaultEvent>() {
                Ok(e) => events.push(e),
                Err(e) => errs.push(format!("faults.plan: {e}")),
            }
        }
        let plan = FaultPlan::new(events);
        errs.extend(plan.validate(c.n, c.f, c.override_unsafe));
        let fr = &self.faults;
        if !(fr.fraud_duty >= 0.0 && fr.fraud_duty <= 1.0) {
            errs.push("faults.fraud_duty: must be in [0, 1]".to_string());
        }
        if fr.fraud_period == 0 {
            errs.push("faults.fraud_period: must be > 0".to_string());
        }
        let mut manual = Vec::new();
        for s in &self.switch.manual {
            match parse_tick_pair::<Protocol>(s, "switch.manual") {
                Ok(v) => manual.push(v),
                Err(e) => errs.push(e),
            }
        }
        manual.sort();
        if c.n > 0 {
            errs.extend(self.switch.policy.validate(c.n));
        }
        let r = &self.raft;
        if r.election_min == 0 || r.election_min > r.election_max {
            errs.push("raft: need 0 < election_min <= election_max".to_string());
        }
        if r.heartbeat_interval == 0 || r.heartbeat_interval >= r.election_min {
            errs.push("raft.heartbeat_interval: must be in (0, election_min)".to_string());
        }
        if r.max_batch == 0 {
            errs.push("raft.max_batch: must be > 0".to_string());
        }
        if self.hotstuff.view_timeout == 0 || self.hotstuff.max_backoff == 0 {
            errs.push("hotstuff: view_timeout and max_backoff must be > 0".to_string());
        }
        if !errs.is_empty() {
            return Err(ScenarioError { errors: errs });
        }
        Ok(Compiled {
            protocol,
            channel,
            plan,
            manual,
            params: NodeParams {
                n: c.n,
                f: c.f,
                raft: self.raft,
                pacemaker: self.hotstuff,
                policy: self.switch.policy,
                controller: self.switch.enabled,
                fraud: FraudParams {
                    latency_factor: fr.fraud_latency_factor,
                    period: fr.fraud_period,
                    duty: fr.fraud_duty,
                    delay_burst: fr.fraud_delay,
                },
                seed: c.seed,
            },
            duration: c.duration,
            rate: self.workload.rate,
            workload_until: self.workload.until.unwrap_or(c.duration - c.duration / 10),
            seed: c.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default_raft() {
        let s = Scenario::parse("").unwrap();
        let c = s.validate().unwrap();
        assert_eq!(c.protocol, Protocol::Raft);
        assert_eq!(c.params.n, 4);
    }

    #[test]
    fn every_violation_is_listed() {
        let s = Scenario::parse(
            r#"
            [cluster]
            n = 3
            f = 1
            protocol = "paxos"
            duration = 0
            [channel]
            loss_prob = 1.5
            [faults]
            plan = ["10:9:crash"]
            "#,
        )
        .unwrap();
        let e = s.validate().unwrap_err();
        let joined = e.errors.join("\n");
        for field in [
            "cluster.n",
            "cluster.protocol",
            "cluster.duration",
            "channel:",
            "faults.plan",
        ] {
            assert!(joined.contains(field), "missing {field} in\n{joined}");
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(Scenario::parse("[cluster]\nnodes = 4\n").is_err());
    }

    #[test]
    fn partitions_and_schedule_parse() {
        let s = Scenario::parse(
            r#"
            [cluster]
            n = 4
            [channel]
            partitions = ["100-200:0,1|2,3", "300-400:2>0"]
            bandwidth_schedule = ["500:3", "50:900"]
            "#,
        )
        .unwrap();
        let c = s.validate().unwrap();
        assert_eq!(c.channel.partitions.len(), 9);
        assert!(c.channel.severed(NodeId(0), NodeId(3), 150));
        assert!(!c.channel.severed(NodeId(0), NodeId(1), 150));
        assert!(c.channel.severed(NodeId(2), NodeId(0), 350));
        assert!(!c.channel.severed(NodeId(0), NodeId(2), 350));
        assert_eq!(c.channel.cap_at(600), 3);
        assert_eq!(c.channel.cap_at(100), 900);
    }

    #[test]
    fn set_dotted_field() {
        let mut s = Scenario::default();
        s.set("cluster.protocol", "hotstuff-chained").unwrap();
        s.set("switch.cooldown", "250").unwrap();
        s.set("channel.loss_prob", "0.1").unwrap();
        assert_eq!(s.cluster.protocol, "hotstuff-chained");
        assert_eq!(s.switch.policy.cooldown, 250);
        assert_eq!(s.channel.loss_prob, 0.1);
        assert!(s.set("cluster.n", "\"four\"").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut s = Scenario::default();
        s.faults.plan = vec!["10:1:crash".into()];
        s.switch.enabled = true;
        s.switch.policy.byz_ratio_up = Some(0.25);
        let back = Scenario::parse(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }
}
