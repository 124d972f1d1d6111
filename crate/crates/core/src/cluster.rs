//! Drives a whole cluster through the simulator: node wake-ups, client
//! workload, fault activation, operator switch requests, and the global
//! safety checks that end up in the run report.

use crate::auth::KeyRing;
use crate::digest::Digest;
use crate::fault::{FaultKind, FaultPlan};
use crate::ledger::{Command, NodeId, Protocol};
use crate::node::{Engine, Message, Node, Out};
use crate::report::{LatencySummary, NodeSummary, RunReport, SafetyReport};
use crate::scenario::{Compiled, Scenario, ScenarioError};
use crate::sim::{
    Envelope, Fired, MessageStats, SimError, Simulator, Tick, TimerId, TimerKind, TraceEvent,
};
use crate::switch::{Outcome, SwitchLog, SwitchRecord};
use std::collections::{BTreeMap, BTreeSet};

/// Client id used for generated workload commands.
pub const WORKLOAD_CLIENT: u32 = 1;

/// How often Raft log matching is checked across nodes.
const LOG_CHECK_EVERY: Tick = 500;

pub struct Cluster {
    sim: Simulator<Message>,
    pub nodes: Vec<Node>,
    plan: FaultPlan,
    byzantine: BTreeSet<NodeId>,
    crashed: Vec<bool>,
    wake: Vec<Option<(Tick, TimerId)>>,
    manual: Vec<(Tick, Protocol)>,
    rate: f64,
    next_cmd: u64,
    workload_until: Tick,
    submitted: BTreeMap<u64, Tick>,
    latencies: Vec<Tick>,
    /// Chain hash per height as first committed by an honest node.
    canonical: Vec<Digest>,
    leaders: BTreeMap<(u64, u64), NodeId>,
    safety: SafetyReport,
    protocol_since: Vec<(Protocol, Tick)>,
    time_in: BTreeMap<Protocol, Tick>,
    next_log_check: Tick,
    duration: Tick,
    seed: u64,
    f: usize,
    initial: Protocol,
}

impl Cluster {
    pub fn new(c: &Compiled) -> Result<Self, SimError> {
        let n = c.params.n;
        let sim = Simulator::new(n, c.channel.clone(), c.seed)?;
        let ring = KeyRing::new(c.seed ^ 0x5EC2_E7D0_0D1E_5EED, n as u32);
        let nodes = (0..n as u32)
            .map(|i| Node::new(NodeId(i), c.params.clone(), c.protocol, ring, 0))
            .collect();
        let byzantine = c.plan.byzantine();
        let mut cl = Self {
            sim,
            nodes,
            plan: c.plan.clone(),
            crashed: vec![false; n],
            wake: vec![None; n],
            manual: c.manual.clone(),
            rate: c.rate,
            next_cmd: 1,
            workload_until: c.workload_until,
            submitted: BTreeMap::new(),
            latencies: Vec::new(),
            canonical: Vec::new(),
            leaders: BTreeMap::new(),
            safety: SafetyReport {
                cft_checks: byzantine.is_empty(),
                ..SafetyReport::default()
            },
            byzantine,
            protocol_since: vec![(c.protocol, 0); n],
            time_in: BTreeMap::new(),
            next_log_check: LOG_CHECK_EVERY,
            duration: c.duration,
            seed: c.seed,
            f: c.params.f,
            initial: c.protocol,
        };
        cl.init()?;
        Ok(cl)
    }

    pub fn from_scenario(s: &Scenario) -> Result<Self, ScenarioError> {
        let c = s.validate()?;
        Self::new(&c).map_err(|e| ScenarioError {
            errors: vec![format!("channel: {e}")],
        })
    }

    fn init(&mut self) -> Result<(), SimError> {
        let n = self.nodes.len();
        let mut points = self.plan.change_points();
        if points.remove(&0) {
            self.apply_faults(0);
        }
        for t in points {
            self.sim.set_timer(NodeId(0), t, TimerKind::Fault)?;
        }
        for i in 0..self.manual.len() {
            let t = self.manual[i].0.max(1);
            self.sim.set_timer(NodeId(0), t, TimerKind::Operator)?;
        }
        if let Some(t) = self.arrival(self.next_cmd) {
            self.sim.set_timer(NodeId(0), t, TimerKind::Workload)?;
        }
        for i in 0..n {
            if self.crashed[i] {
                continue;
            }
            let out = self.nodes[i].start(0);
            self.send_all(i, out);
            self.after(i);
        }
        Ok(())
    }

    pub fn enable_trace(&mut self) {
        self.sim.enable_trace();
    }

    pub fn now(&self) -> Tick {
        self.sim.now()
    }

    pub fn stats(&self) -> &MessageStats {
        self.sim.stats()
    }

    pub fn safety(&self) -> &SafetyReport {
        &self.safety
    }

    pub fn is_honest(&self, i: usize) -> bool {
        !self.byzantine.contains(&NodeId(i as u32))
    }

    pub fn is_crashed(&self, i: usize) -> bool {
        self.crashed[i]
    }

    /// Tick at which workload command `k` arrives, if inside the run.
    fn arrival(&self, k: u64) -> Option<Tick> {
        if self.rate <= 0.0 {
            return None;
        }
        let t = ((k as f64 / self.rate).ceil() as Tick).max(1);
        (t <= self.workload_until).then_some(t)
    }

    /// Processes every event up to and including `end`.
    pub fn run_until(&mut self, end: Tick) {
        while let Some(t) = self.sim.peek_tick() {
            if t > end {
                break;
            }
            for ev in self.sim.step() {
                self.fire(ev);
            }
            if self.sim.now() >= self.next_log_check {
                self.next_log_check = self.sim.now() + LOG_CHECK_EVERY;
                self.check_log_matching();
            }
        }
    }

    fn fire(&mut self, ev: Fired<Message>) {
        let now = self.sim.now();
        match ev {
            Fired::Deliver {
                src,
                dst,
                payload,
                send_tick,
            } => {
                let i = dst.index();
                if self.crashed[i] {
                    return;
                }
                let out = self.nodes[i].on_message(now, src, payload, send_tick);
                self.send_all(i, out);
                self.after(i);
            }
            Fired::Timer { node, id, kind } => match kind {
                TimerKind::Wake => {
                    let i = node.index();
                    if self.wake[i].is_none_or(|(_, w)| w != id) || self.crashed[i] {
                        return;
                    }
                    self.wake[i] = None;
                    let cap = self.sim.channel().cap_at(now);
                    self.nodes[i].observe_bandwidth(cap);
                    let out = self.nodes[i].on_wake(now);
                    self.send_all(i, out);
                    self.after(i);
                }
                TimerKind::Workload => {
                    while self.arrival(self.next_cmd).is_some_and(|t| t <= now) {
                        let seq = self.next_cmd;
                        self.next_cmd += 1;
                        let cmd = Command::new(WORKLOAD_CLIENT, seq, seq.to_le_bytes().to_vec());
                        self.submitted.insert(seq, now);
                        for (i, node) in self.nodes.iter_mut().enumerate() {
                            if !self.crashed[i] {
                                node.submit(cmd.clone());
                            }
                        }
                    }
                    if let Some(t) = self.arrival(self.next_cmd) {
                        self.sim
                            .set_timer(NodeId(0), t, TimerKind::Workload)
                            .expect("arrival is in the future");
                    }
                }
                TimerKind::Fault => self.apply_faults(now),
                TimerKind::Operator => {
                    let due: Vec<Protocol> = self
                        .manual
                        .iter()
                        .filter(|m| m.0.max(1) == now)
                        .map(|m| m.1)
                        .collect();
                    for target in due {
                        self.sim
                            .record(NodeId(0), "operator_switch", || format!("target={target}"));
                        for i in 0..self.nodes.len() {
                            if !self.crashed[i] {
                                let out = self.nodes[i].manual_switch(target, now);
                                self.send_all(i, out);
                                self.after(i);
                            }
                        }
                    }
                }
            },
        }
    }

    fn apply_faults(&mut self, now: Tick) {
        for i in 0..self.nodes.len() {
            let kind = self.plan.active(NodeId(i as u32), now);
            let was_crashed = self.crashed[i];
            let crashed = kind == Some(FaultKind::Crash);
            if self.nodes[i].fault != kind {
                self.sim.record(NodeId(i as u32), "fault", || {
                    kind.map_or("none".to_string(), |k| k.to_string())
                });
            }
            self.nodes[i].fault = kind;
            self.crashed[i] = crashed;
            if crashed && !was_crashed {
                if let Some((_, id)) = self.wake[i].take() {
                    self.sim.cancel_timer(id);
                }
            } else if !crashed && was_crashed {
                self.after(i);
            }
        }
    }

    fn send_all(&mut self, i: usize, out: Vec<Out>) {
        let now = self.sim.now();
        let src = NodeId(i as u32);
        for o in out {
            self.sim
                .schedule(Envelope {
                    src,
                    dst: o.to,
                    payload: o.msg,
                    send_tick: now + o.delay,
                    deliver: crate::sim::Delivery::Dropped,
                })
                .expect("nodes address cluster members");
        }
    }

    /// Bookkeeping after node `i` handled an event: commits, leadership,
    /// trace notes, protocol time, and its next wake-up.
    fn after(&mut self, i: usize) {
        let now = self.sim.now();
        let id = NodeId(i as u32);
        let honest = self.is_honest(i);
        let applied = self.nodes[i].take_applied();
        for e in &applied {
            let hash = self.nodes[i]
                .ledger
                .hash_at(e.height)
                .expect("applied entry is in the ledger");
            self.sim.record(id, "commit", || {
                format!(
                    "h={} cmd={}:{} via={}",
                    e.height, e.cmd.client, e.cmd.seq, e.origin_protocol
                )
            });
            if !honest {
                continue;
            }
            let h = e.height as usize;
            if h == self.canonical.len() + 1 {
                self.canonical.push(hash);
                if e.cmd.client == WORKLOAD_CLIENT {
                    if let Some(t) = self.submitted.remove(&e.cmd.seq) {
                        self.latencies.push(now - t);
                    }
                }
            } else if h <= self.canonical.len() && self.canonical[h - 1] != hash {
                self.safety.conflicting_heights += 1;
                self.safety
                    .note(|| format!("t={now}: {id} committed a conflicting entry at height {h}"));
            }
        }
        for (epoch, term) in self.nodes[i].take_became_leader() {
            if honest {
                self.check_leader(id, epoch, term);
            }
        }
        for (kind, detail) in self.nodes[i].take_notes() {
            self.sim.record(id, kind, || detail);
        }
        let (p, since) = self.protocol_since[i];
        if self.nodes[i].protocol != p {
            if honest {
                *self.time_in.entry(p).or_insert(0) += now - since;
            }
            self.protocol_since[i] = (self.nodes[i].protocol, now);
        }
        if self.crashed[i] {
            return;
        }
        let want = self.nodes[i].next_wake().max(now + 1);
        if self.wake[i].is_some_and(|(t, _)| t == want) {
            return;
        }
        if let Some((_, old)) = self.wake[i].take() {
            self.sim.cancel_timer(old);
        }
        let tid = self
            .sim
            .set_timer(id, want, TimerKind::Wake)
            .expect("wake is in the future");
        self.wake[i] = Some((want, tid));
    }

    fn check_leader(&mut self, id: NodeId, epoch: u64, term: u64) {
        let now = self.sim.now();
        if let Some(&other) = self.leaders.get(&(epoch, term)) {
            if other != id {
                self.safety.election_violations += 1;
                self.safety.note(|| {
                    format!("t={now}: {other} and {id} both lead epoch {epoch} term {term}")
                });
            }
        } else {
            self.leaders.insert((epoch, term), id);
        }
        // Everything committed in this epoch must already be in the new
        // leader's log.
        let node = &self.nodes[id.index()];
        let Engine::Raft(r) = &node.engine else {
            return;
        };
        let base = r.base_height();
        let committed = self.canonical.len() as u64;
        let mut missing = false;
        for h in base + 1..=committed {
            let Some(le) = r.log().get((h - base - 1) as usize) else {
                missing = true;
                break;
            };
            let Some(holder) = self
                .nodes
                .iter()
                .enumerate()
                .find(|(j, n)| self.is_honest(*j) && n.epoch == epoch && n.ledger.len() >= h)
            else {
                continue;
            };
            if holder.1.ledger.entry(h).is_some_and(|e| e.cmd != le.cmd) {
                missing = true;
                break;
            }
        }
        let known = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(j, n)| self.is_honest(*j) && n.epoch == epoch)
            .map(|(_, n)| n.ledger.len())
            .max()
            .unwrap_or(0);
        if missing && known > base {
            self.safety.leader_completeness_violations += 1;
            self.safety.note(|| {
                format!("t={now}: leader {id} of epoch {epoch} term {term} lacks committed entries")
            });
        }
    }

    /// Raft log matching: wherever two honest logs agree on an entry's
    /// term, they agree on everything before it.
    fn check_log_matching(&mut self) {
        let now = self.sim.now();
        let logs: Vec<(usize, u64, &[crate::raft::RaftLogEntry])> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_honest(*i))
            .filter_map(|(i, n)| match &n.engine {
                Engine::Raft(r) => Some((i, n.epoch, r.log())),
                Engine::Hs(_) => None,
            })
            .collect();
        let mut bad = Vec::new();
        for (a, (ia, ea, la)) in logs.iter().enumerate() {
            for (ib, eb, lb) in &logs[a + 1..] {
                if ea != eb {
                    continue;
                }
                let mut diverged = false;
                for (x, y) in la.iter().zip(lb.iter()) {
                    if x.term == y.term && diverged {
                        bad.push((*ia, *ib));
                        break;
                    }
                    if x != y {
                        diverged = true;
                        if x.term == y.term {
                            bad.push((*ia, *ib));
                            break;
                        }
                    }
                }
            }
        }
        for (a, b) in bad {
            self.safety.log_matching_violations += 1;
            self.safety
                .note(|| format!("t={now}: raft logs of n{a} and n{b} break log matching"));
        }
    }

    fn merged_log(&self) -> SwitchLog {
        let mut completed: BTreeMap<u64, SwitchRecord> = BTreeMap::new();
        let mut aborted: BTreeMap<u64, SwitchRecord> = BTreeMap::new();
        let mut suppressed = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !self.is_honest(i) {
                continue;
            }
            for r in &node.log {
                match r.outcome {
                    Outcome::Completed => {
                        if completed.get(&r.epoch).is_none_or(|c| r.tick < c.tick) {
                            completed.insert(r.epoch, r.clone());
                        }
                    }
                    Outcome::Aborted => {
                        if aborted.get(&r.epoch).is_none_or(|c| r.tick < c.tick) {
                            aborted.insert(r.epoch, r.clone());
                        }
                    }
                    Outcome::Suppressed => suppressed.push(r.clone()),
                }
            }
        }
        let mut all: Vec<SwitchRecord> = completed
            .into_values()
            .chain(aborted.into_values())
            .chain(suppressed)
            .collect();
        all.sort_by_key(|r| (r.tick, r.epoch, r.node));
        let mut log = SwitchLog::default();
        for r in all {
            log.push(r);
        }
        log
    }

    /// Runs to the configured duration and builds the report.
    pub fn run(mut self) -> (RunReport, Vec<TraceEvent>) {
        self.run_until(self.duration);
        self.finish()
    }

    pub fn finish(mut self) -> (RunReport, Vec<TraceEvent>) {
        let end = self.sim.now().max(self.duration);
        self.check_log_matching();
        for i in 0..self.nodes.len() {
            if !self.is_honest(i) {
                continue;
            }
            let node = &self.nodes[i];
            for &(h, hash) in &node.switch_snapshots {
                if node.ledger.hash_at(h) != Some(hash) {
                    self.safety.snapshot_violations += 1;
                    self.safety
                        .note(|| format!("n{i}: pre-switch ledger at height {h} is not a prefix"));
                }
            }
            if node.engine_safety_fault() {
                self.safety.engine_faults += 1;
                self.safety
                    .note(|| format!("n{i}: engine committed against its chain"));
            }
            let (p, since) = self.protocol_since[i];
            *self.time_in.entry(p).or_insert(0) += end - since;
        }
        let total: Tick = self.time_in.values().sum();
        let time_share = self
            .time_in
            .iter()
            .map(|(&p, &t)| {
                (
                    p,
                    if total == 0 {
                        0.0
                    } else {
                        t as f64 / total as f64
                    },
                )
            })
            .collect();
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeSummary {
                node: i as u32,
                committed_height: n.ledger.len(),
                epoch: n.epoch,
                protocol: n.protocol,
                honest: self.is_honest(i),
                crashed: self.crashed[i],
            })
            .collect();
        let report = RunReport {
            seed: self.seed,
            n: self.nodes.len(),
            f: self.f,
            duration: self.duration,
            initial_protocol: self.initial,
            nodes,
            commit_latency: LatencySummary::from_samples(std::mem::take(&mut self.latencies)),
            messages: self.sim.stats().clone(),
            switches: self.merged_log(),
            safety: self.safety.clone(),
            time_share,
        };
        (report, self.sim.take_trace())
    }
}

/// Validates and runs a scenario.
pub fn run(s: &Scenario, trace: bool) -> Result<(RunReport, Vec<TraceEvent>), ScenarioError> {
    let mut c = Cluster::from_scenario(s)?;
    if trace {
        c.enable_trace();
    }
    Ok(c.run())
}
