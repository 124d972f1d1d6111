//! One cluster member: the active consensus engine plus its committed
//! ledger, mempool, condition monitor, switch state and fault behaviour.
//!
//! A switch is ordered through the running protocol as a barrier command.
//! Once a node commits the barrier at height `h` it applies nothing
//! further, signs its checkpoint at `h`, and activates the target protocol
//! as soon as it holds a quorum of matching checkpoint votes.

use crate::auth::{HeaderKind, KeyRing, SignedHeader, SigningKey};
use crate::engine::{Mempool, ProposalSource, Step};
use crate::fault::{self, FaultKind, FraudParams};
use crate::hotstuff::{HotStuffNode, HsMsg, Mode, PacemakerConfig};
use crate::ledger::{Command, CommittedLedger, LedgerEntry, NodeId, Protocol};
use crate::raft::{candidacy_digest, vote_digest, RaftConfig, RaftMsg, RaftNode, Role};
use crate::sim::{Payload, Tick};
use crate::switch::{
    activation_quorum, decide, detect_fraud, Barrier, CheckpointTally, CheckpointVote,
    ConditionMonitor, ConditionReport, FraudVerdict, Outcome, QuorumStatus, SwitchCert,
    SwitchPolicy, SwitchRecord, Trigger,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Body {
    Raft(RaftMsg),
    Hs(HsMsg),
    /// Asks whoever leads to order a switch barrier.
    SwitchPrepare(Barrier),
    CheckpointVote(CheckpointVote),
    SwitchCommit(SwitchCert),
    Report(ConditionReport),
    SyncRequest {
        have: u64,
    },
    Sync {
        cert: SwitchCert,
        entries: Vec<LedgerEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub epoch: u64,
    pub body: Body,
}

impl Payload for Message {
    fn kind(&self) -> &'static str {
        match &self.body {
            Body::Raft(m) => m.kind(),
            Body::Hs(m) => m.kind(),
            Body::SwitchPrepare(_) => "switch.prepare",
            Body::CheckpointVote(_) => "switch.checkpoint_vote",
            Body::SwitchCommit(_) => "switch.commit",
            Body::Report(_) => "report",
            Body::SyncRequest { .. } => "sync.request",
            Body::Sync { .. } => "sync.entries",
        }
    }

    fn round(&self) -> Option<u64> {
        match &self.body {
            Body::Raft(m) => Some(m.term()),
            Body::Hs(m) => m.view(),
            _ => Some(self.epoch),
        }
    }
}

/// Cluster-wide settings every node is built from.
#[derive(Debug, Clone)]
pub struct NodeParams {
    pub n: usize,
    pub f: usize,
    pub raft: RaftConfig,
    pub pacemaker: PacemakerConfig,
    pub policy: SwitchPolicy,
    /// Run the switch controller (reports, decisions).
    pub controller: bool,
    pub fraud: FraudParams,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Engine {
    Raft(RaftNode),
    Hs(HotStuffNode),
}

#[derive(Debug, Clone)]
pub struct Out {
    pub to: NodeId,
    pub msg: Message,
    /// Extra delay before the message enters the channel.
    pub delay: Tick,
}

#[derive(Debug, Clone)]
struct Pending {
    barrier: Barrier,
    height: u64,
    last_sent: Tick,
}

const BYZ_CAMPAIGN_PERIOD: Tick = 1000;
const SYNC_BACKOFF: Tick = 200;
const ENDORSE_VALIDITY_INTERVALS: Tick = 5;

#[derive(Debug, Clone)]
pub struct Node {
    id: NodeId,
    p: NodeParams,
    key: SigningKey,
    ring: KeyRing,
    pub epoch: u64,
    pub protocol: Protocol,
    pub engine: Engine,
    pub ledger: CommittedLedger,
    pub mempool: Mempool,
    pub monitor: ConditionMonitor,
    /// Local view of switch attempts and outcomes.
    pub log: Vec<SwitchRecord>,
    attempts: Vec<Tick>,
    last_switch: Option<Tick>,
    /// Targets this node's own rule recently agreed with.
    endorsed: BTreeMap<Protocol, Tick>,
    barrier_request: Option<Barrier>,
    last_prepare: Option<Tick>,
    pending: Option<Pending>,
    held: Vec<LedgerEntry>,
    tallies: BTreeMap<(u64, Protocol), CheckpointTally>,
    certs: BTreeMap<u64, SwitchCert>,
    last_sync_request: Option<Tick>,
    next_report: Tick,
    report_seq: u64,
    next_campaign: Tick,
    pub fault: Option<FaultKind>,
    /// `(height, hash)` of the ledger just before each activation.
    pub switch_snapshots: Vec<(u64, crate::digest::Digest)>,
    applied: Vec<LedgerEntry>,
    became_leader: Vec<(u64, u64)>,
    notes: Vec<(&'static str, String)>,
    pub apply_errors: u64,
    future: Vec<(NodeId, Message, Tick)>,
    helped: BTreeMap<NodeId, Tick>,
}

impl Node {
    pub fn new(id: NodeId, p: NodeParams, protocol: Protocol, ring: KeyRing, now: Tick) -> Self {
        let key = ring.signing_key(id);
        let engine = Self::make_engine(
            id,
            &p,
            protocol,
            0,
            0,
            crate::ledger::GENESIS_HASH,
            &key,
            ring,
            now,
        );
        let monitor = ConditionMonitor::new(p.n, &p.policy, now);
        let next_report = now + p.policy.report_interval;
        Self {
            id,
            key,
            ring,
            epoch: 0,
            protocol,
            engine,
            ledger: CommittedLedger::new(),
            mempool: Mempool::new(),
            monitor,
            log: Vec::new(),
            attempts: Vec::new(),
            last_switch: None,
            endorsed: BTreeMap::new(),
            barrier_request: None,
            last_prepare: None,
            pending: None,
            held: Vec::new(),
            tallies: BTreeMap::new(),
            certs: BTreeMap::new(),
            last_sync_request: None,
            next_report,
            report_seq: 0,
            next_campaign: now + BYZ_CAMPAIGN_PERIOD,
            fault: None,
            switch_snapshots: Vec::new(),
            applied: Vec::new(),
            became_leader: Vec::new(),
            notes: Vec::new(),
            apply_errors: 0,
            future: Vec::new(),
            helped: BTreeMap::new(),
            p,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn make_engine(
        id: NodeId,
        p: &NodeParams,
        protocol: Protocol,
        epoch: u64,
        base: u64,
        base_hash: crate::digest::Digest,
        key: &SigningKey,
        ring: KeyRing,
        now: Tick,
    ) -> Engine {
        let seed = p.seed ^ (u64::from(id.0) << 32) ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        match protocol {
            Protocol::Raft => Engine::Raft(RaftNode::new(
                id,
                p.n,
                epoch,
                base,
                p.raft,
                key.clone(),
                seed,
                now,
            )),
            Protocol::HotstuffBasic | Protocol::HotstuffChained => {
                let mode = if protocol == Protocol::HotstuffBasic {
                    Mode::Basic
                } else {
                    Mode::Chained
                };
                Engine::Hs(HotStuffNode::new(
                    id,
                    p.n,
                    p.f,
                    epoch,
                    mode,
                    base,
                    base_hash,
                    p.pacemaker,
                    key.clone(),
                    ring,
                    now,
                ))
            }
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn is_leader(&self) -> bool {
        match &self.engine {
            Engine::Raft(r) => r.role == Role::Leader,
            Engine::Hs(h) => h.leader(h.cur_view) == self.id,
        }
    }

    pub fn is_switching(&self) -> bool {
        self.pending.is_some()
    }

    pub fn submit(&mut self, cmd: Command) {
        self.mempool.submit(cmd);
    }

    pub fn observe_bandwidth(&mut self, cap: u32) {
        self.monitor.observe_bandwidth(f64::from(cap));
    }

    /// Entries appended to the ledger since the last call.
    pub fn take_applied(&mut self) -> Vec<LedgerEntry> {
        std::mem::take(&mut self.applied)
    }

    /// `(epoch, term)` pairs in which this node became Raft leader.
    pub fn take_became_leader(&mut self) -> Vec<(u64, u64)> {
        std::mem::take(&mut self.became_leader)
    }

    /// Trace notes since the last call.
    pub fn take_notes(&mut self) -> Vec<(&'static str, String)> {
        std::mem::take(&mut self.notes)
    }

    pub fn next_wake(&self) -> Tick {
        let mut t = match &self.engine {
            Engine::Raft(r) => r.next_deadline(),
            Engine::Hs(h) => h.next_deadline(),
        };
        if self.p.controller {
            t = t.min(self.next_report);
        }
        if let Some(p) = &self.pending {
            t = t.min(p.last_sent + self.p.policy.switch_timeout);
        }
        if self.fault == Some(FaultKind::Equivocate) && self.protocol == Protocol::Raft {
            t = t.min(self.next_campaign);
        }
        t
    }

    /// Initial messages (HotStuff replicas announce view 1).
    pub fn start(&mut self, now: Tick) -> Vec<Out> {
        let mut out = Vec::new();
        if let Engine::Hs(h) = &mut self.engine {
            let step = h.start(now, ProposalSource::new(&self.mempool));
            self.absorb_hs(step, now, &mut out);
        }
        out
    }

    fn proposal_barrier(&self, now: Tick) -> Option<Command> {
        if self.pending.is_some() {
            return None;
        }
        let b = self.barrier_request?;
        (b.epoch == self.epoch + 1 && self.endorses(&b, now)).then(|| b.command())
    }

    fn endorses(&self, b: &Barrier, now: Tick) -> bool {
        if b.epoch != self.epoch + 1 || b.target == self.protocol {
            return false;
        }
        if b.trigger == Trigger::Manual {
            return true;
        }
        let validity = self.p.policy.report_interval * ENDORSE_VALIDITY_INTERVALS;
        self.endorsed
            .get(&b.target)
            .is_some_and(|&t| t + validity >= now)
    }

    pub fn on_wake(&mut self, now: Tick) -> Vec<Out> {
        let mut out = Vec::new();
        if self.p.controller && now >= self.next_report {
            self.next_report = now + self.p.policy.report_interval;
            self.send_report(now, &mut out);
            self.run_controller(now, &mut out);
        }
        if let Some(p) = &self.pending {
            if now >= p.last_sent + self.p.policy.switch_timeout {
                let (epoch, target) = (p.barrier.epoch, p.barrier.target);
                if let Some(p) = self.pending.as_mut() {
                    p.last_sent = now;
                }
                if let Some(v) = self
                    .tallies
                    .get(&(epoch, target))
                    .and_then(|t| t.votes().find(|v| v.voter == self.id).copied())
                {
                    self.broadcast(Body::CheckpointVote(v), &mut out);
                }
            }
        }
        if self.fault == Some(FaultKind::Equivocate) && now >= self.next_campaign {
            self.next_campaign = now + BYZ_CAMPAIGN_PERIOD;
            if let Engine::Raft(r) = &mut self.engine {
                if r.role != Role::Leader {
                    let step = r.on_election_timeout(now);
                    self.absorb_raft(step, now, &mut out);
                }
            }
        }
        let barrier = self.proposal_barrier(now);
        let src = ProposalSource {
            mempool: &self.mempool,
            barrier: barrier.as_ref(),
        };
        match &mut self.engine {
            Engine::Raft(r) => {
                let step = r.on_tick(now, src);
                self.absorb_raft(step, now, &mut out);
            }
            Engine::Hs(h) => {
                let step = h.on_tick(now, src);
                self.absorb_hs(step, now, &mut out);
            }
        }
        out
    }

    fn send_report(&mut self, now: Tick, out: &mut Vec<Out>) {
        self.monitor.prune(now, self.p.policy.byz_clear_window);
        let (headers, proofs) = self.monitor.take_gossip();
        let mut latency = self.monitor.latency_ewma.unwrap_or(0.0);
        let mut bandwidth = self.monitor.bandwidth_avail.unwrap_or(0.0);
        let fraud = self.fault == Some(FaultKind::FraudReport) && self.p.fraud.burst_on(now);
        if fraud {
            latency *= self.p.fraud.latency_factor;
            bandwidth = 0.0;
        }
        let copies = if fraud { 1 + self.p.n } else { 1 };
        for i in 0..copies {
            self.report_seq += 1;
            let r = ConditionReport::sign(
                &self.key,
                now,
                self.report_seq,
                latency,
                bandwidth,
                self.ledger.len(),
                if i == 0 { headers.clone() } else { Vec::new() },
                if i == 0 { proofs.clone() } else { Vec::new() },
            );
            self.broadcast(Body::Report(r), out);
        }
    }

    fn run_controller(&mut self, now: Tick, out: &mut Vec<Out>) {
        if self.pending.is_some() {
            return;
        }
        let success = match &self.engine {
            Engine::Hs(h) => h.success_rate(),
            Engine::Raft(_) => None,
        };
        let sig = self.monitor.signals(now, &self.p.policy, success);
        let Some(d) = decide(&self.p.policy, &sig, self.protocol, now, self.last_switch) else {
            return;
        };
        let policy = self.p.policy;
        if policy.detector {
            let reports = self.monitor.per_reporter(now);
            let verdict = detect_fraud(&policy, &d, &self.attempts, &reports, now);
            let completed_recent = self
                .log
                .iter()
                .filter(|r| r.outcome == Outcome::Completed && r.tick + policy.rate_window > now)
                .count();
            let allowed = match &verdict {
                FraudVerdict::Allow => true,
                FraudVerdict::LockBft => {
                    d.target.is_bft()
                        && !self.protocol.is_bft()
                        && completed_recent < policy.max_switch_rate
                }
                FraudVerdict::Suppress(who) => {
                    self.monitor.distrust(who.iter().copied());
                    false
                }
            };
            if !allowed {
                // one suppressed record per cooldown keeps the log readable
                let recent = self
                    .log
                    .iter()
                    .rev()
                    .find(|r| r.outcome == Outcome::Suppressed);
                if recent.is_none_or(|r| r.tick + policy.cooldown <= now) {
                    self.log.push(SwitchRecord {
                        tick: now,
                        epoch: self.epoch + 1,
                        from: self.protocol,
                        to: d.target,
                        trigger: d.trigger,
                        outcome: Outcome::Suppressed,
                        node: self.id,
                        checkpoint_height: None,
                    });
                    self.notes.push((
                        "switch_suppressed",
                        format!("{verdict:?} target={}", d.target),
                    ));
                }
                return;
            }
        }
        self.endorsed.insert(d.target, now);
        let barrier = Barrier {
            epoch: self.epoch + 1,
            target: d.target,
            trigger: d.trigger,
            decided_tick: now,
            initiator: self.id,
        };
        self.request_switch(barrier, now, out);
    }

    /// Operator-requested switch, bypassing the rule and the detector.
    pub fn manual_switch(&mut self, target: Protocol, now: Tick) -> Vec<Out> {
        let mut out = Vec::new();
        if self.pending.is_none() && target != self.protocol {
            let barrier = Barrier {
                epoch: self.epoch + 1,
                target,
                trigger: Trigger::Manual,
                decided_tick: now,
                initiator: self.id,
            };
            self.request_switch(barrier, now, &mut out);
        }
        out
    }

    fn request_switch(&mut self, b: Barrier, now: Tick, out: &mut Vec<Out>) {
        let fresh = self.barrier_request.is_none_or(|r| r.epoch != b.epoch);
        if fresh || self.barrier_request.is_some_and(|r| r.target != b.target) {
            self.barrier_request = Some(b);
        }
        let resend = self
            .last_prepare
            .is_none_or(|t| now >= t + self.p.policy.report_interval * ENDORSE_VALIDITY_INTERVALS);
        if fresh || resend {
            if fresh {
                self.attempts.push(now);
                self.notes.push((
                    "switch_request",
                    format!(
                        "epoch={} target={} trigger={}",
                        b.epoch, b.target, b.trigger
                    ),
                ));
            }
            self.last_prepare = Some(now);
            self.broadcast(Body::SwitchPrepare(b), out);
        }
    }

    fn broadcast(&self, body: Body, out: &mut Vec<Out>) {
        let msg = Message {
            epoch: self.epoch,
            body,
        };
        for p in 0..self.p.n as u32 {
            if p != self.id.0 {
                out.push(Out {
                    to: NodeId(p),
                    msg: msg.clone(),
                    delay: 0,
                });
            }
        }
    }

    fn send(&self, to: NodeId, body: Body, out: &mut Vec<Out>) {
        out.push(Out {
            to,
            msg: Message {
                epoch: self.epoch,
                body,
            },
            delay: 0,
        });
    }
}

const MAX_FUTURE: usize = 512;

impl Node {
    fn delay(&self, now: Tick) -> Tick {
        if self.fault == Some(FaultKind::FraudDelay) && self.p.fraud.burst_on(now) {
            self.p.fraud.delay_burst
        } else {
            0
        }
    }

    fn absorb_raft(&mut self, step: Step<RaftMsg>, now: Tick, out: &mut Vec<Out>) {
        let Step {
            out: msgs,
            committed,
        } = step;
        if let Engine::Raft(r) = &mut self.engine {
            if let Some(term) = r.take_became_leader() {
                self.became_leader.push((self.epoch, term));
                self.notes
                    .push(("leader", format!("epoch={} term={term}", self.epoch)));
            }
        }
        let n = self.p.n;
        let per_peer = match self.fault {
            Some(FaultKind::Equivocate) => {
                fault::equivocate_raft(msgs, &self.key, self.epoch, self.id, n)
            }
            Some(FaultKind::Silent) => crate::engine::expand(fault::silence_raft(msgs), self.id, n),
            _ => crate::engine::expand(msgs, self.id, n),
        };
        let delay = self.delay(now);
        for (to, m) in per_peer {
            out.push(Out {
                to,
                msg: Message {
                    epoch: self.epoch,
                    body: Body::Raft(m),
                },
                delay,
            });
        }
        self.apply(committed, now, out);
    }

    fn absorb_hs(&mut self, step: Step<HsMsg>, now: Tick, out: &mut Vec<Out>) {
        let Step {
            out: msgs,
            committed,
        } = step;
        let n = self.p.n;
        let per_peer = match self.fault {
            Some(FaultKind::Equivocate) => {
                fault::equivocate_hotstuff(msgs, &self.key, self.epoch, self.id, n)
            }
            Some(FaultKind::Silent) => {
                crate::engine::expand(fault::silence_hotstuff(msgs), self.id, n)
            }
            _ => crate::engine::expand(msgs, self.id, n),
        };
        let delay = self.delay(now);
        for (to, m) in per_peer {
            out.push(Out {
                to,
                msg: Message {
                    epoch: self.epoch,
                    body: Body::Hs(m),
                },
                delay,
            });
        }
        self.apply(committed, now, out);
    }

    /// True if the HotStuff engine ever saw a commit contradicting its
    /// committed chain.
    pub fn engine_safety_fault(&self) -> bool {
        matches!(&self.engine, Engine::Hs(h) if h.safety_fault)
    }

    fn apply(&mut self, entries: Vec<LedgerEntry>, now: Tick, out: &mut Vec<Out>) {
        let epoch = self.epoch;
        for e in entries {
            if self.epoch != epoch {
                // activated mid-batch; the rest belongs to the old engine
                break;
            }
            if self.pending.is_some() {
                self.held.push(e);
                continue;
            }
            let next = self.ledger.len() + 1;
            if e.height < next {
                continue;
            }
            if e.height > next {
                self.apply_errors += 1;
                self.notes
                    .push(("apply_gap", format!("have={} got={}", next - 1, e.height)));
                continue;
            }
            self.ledger.append(e.clone()).expect("height checked above");
            self.mempool.mark_committed(&e.cmd);
            self.applied.push(e.clone());
            if let Some(b) = Barrier::decode(&e.cmd) {
                if b.epoch == self.epoch + 1 && b.target != self.protocol {
                    self.enter_pending(b, e.height, now, out);
                }
            }
        }
    }

    fn enter_pending(&mut self, b: Barrier, height: u64, now: Tick, out: &mut Vec<Out>) {
        let cp = self
            .ledger
            .checkpoint(height, self.protocol)
            .expect("barrier height is within the ledger");
        let vote = CheckpointVote::sign(&self.key, b.epoch, b.target, cp);
        self.pending = Some(Pending {
            barrier: b,
            height,
            last_sent: now,
        });
        self.barrier_request = None;
        if self.attempts.last().is_none_or(|&t| t < b.decided_tick) {
            self.attempts.push(now);
        }
        self.notes.push((
            "barrier_committed",
            format!(
                "epoch={} target={} h={height} hash={}",
                b.epoch, b.target, cp.ledger_hash
            ),
        ));
        self.broadcast(Body::CheckpointVote(vote), out);
        self.tally_vote(vote, now, out);
    }

    fn tally_vote(&mut self, v: CheckpointVote, now: Tick, out: &mut Vec<Out>) {
        let (n, f) = (self.p.n, self.p.f);
        let tally = self.tallies.entry((v.epoch, v.target)).or_insert_with(|| {
            CheckpointTally::new(n, activation_quorum(v.target, n, f), v.epoch, v.target)
        });
        if !tally.add(v, &self.ring) {
            return;
        }
        match tally.status() {
            QuorumStatus::Reached(cert) => self.try_activate(cert, v.voter, now, out),
            QuorumStatus::Unreachable => {
                if self
                    .pending
                    .as_ref()
                    .is_some_and(|p| p.barrier.epoch == v.epoch && p.barrier.target == v.target)
                {
                    self.abort(now, out);
                }
            }
            QuorumStatus::Pending => {}
        }
    }

    fn abort(&mut self, now: Tick, out: &mut Vec<Out>) {
        let Some(p) = self.pending.take() else {
            return;
        };
        self.tallies.remove(&(p.barrier.epoch, p.barrier.target));
        self.log.push(SwitchRecord {
            tick: now,
            epoch: p.barrier.epoch,
            from: self.protocol,
            to: p.barrier.target,
            trigger: p.barrier.trigger,
            outcome: Outcome::Aborted,
            node: self.id,
            checkpoint_height: Some(p.height),
        });
        self.notes.push((
            "switch_aborted",
            format!("epoch={} h={}", p.barrier.epoch, p.height),
        ));
        let held = std::mem::take(&mut self.held);
        self.apply(held, now, out);
    }

    fn try_activate(&mut self, cert: SwitchCert, hint: NodeId, now: Tick, out: &mut Vec<Out>) {
        if cert.epoch != self.epoch + 1 {
            return;
        }
        let h = cert.checkpoint.height;
        let len = self.ledger.len();
        if len < h {
            self.request_sync(hint, now, out);
        } else if len == h && self.ledger.tip_hash() == cert.checkpoint.ledger_hash {
            self.activate(cert, now, out);
        } else {
            self.notes.push((
                "checkpoint_mismatch",
                format!("epoch={} h={h} len={len}", cert.epoch),
            ));
        }
    }

    fn request_sync(&mut self, to: NodeId, now: Tick, out: &mut Vec<Out>) {
        if to == self.id
            || self
                .last_sync_request
                .is_some_and(|t| now < t + SYNC_BACKOFF)
        {
            return;
        }
        self.last_sync_request = Some(now);
        self.send(
            to,
            Body::SyncRequest {
                have: self.ledger.len(),
            },
            out,
        );
    }

    fn activate(&mut self, cert: SwitchCert, now: Tick, out: &mut Vec<Out>) {
        let from = self.protocol;
        let h = cert.checkpoint.height;
        let trigger = self
            .pending
            .as_ref()
            .map(|p| p.barrier.trigger)
            .or_else(|| {
                self.ledger
                    .entry(h)
                    .and_then(|e| Barrier::decode(&e.cmd))
                    .map(|b| b.trigger)
            })
            .unwrap_or(Trigger::Manual);
        self.switch_snapshots.push((h, self.ledger.tip_hash()));
        self.epoch = cert.epoch;
        self.protocol = cert.target;
        self.engine = Self::make_engine(
            self.id,
            &self.p,
            cert.target,
            cert.epoch,
            h,
            cert.checkpoint.ledger_hash,
            &self.key,
            self.ring,
            now,
        );
        self.pending = None;
        self.held.clear();
        self.barrier_request = None;
        self.last_switch = Some(now);
        self.endorsed.clear();
        self.tallies.retain(|(e, _), _| *e > cert.epoch);
        self.log.push(SwitchRecord {
            tick: now,
            epoch: cert.epoch,
            from,
            to: cert.target,
            trigger,
            outcome: Outcome::Completed,
            node: self.id,
            checkpoint_height: Some(h),
        });
        self.notes.push((
            "switch_activated",
            format!("epoch={} {from}->{} h={h}", cert.epoch, cert.target),
        ));
        self.broadcast(Body::SwitchCommit(cert.clone()), out);
        self.certs.insert(cert.epoch, cert);
        out.extend(self.start(now));
        let future = std::mem::take(&mut self.future);
        for (from, msg, send_tick) in future {
            if msg.epoch == self.epoch {
                out.extend(self.on_message(now, from, msg, send_tick));
            } else if msg.epoch > self.epoch {
                self.future.push((from, msg, send_tick));
            }
        }
    }

    fn on_sync(
        &mut self,
        cert: SwitchCert,
        entries: Vec<LedgerEntry>,
        now: Tick,
        out: &mut Vec<Out>,
    ) {
        if cert.epoch != self.epoch + 1 || !cert.verify(&self.ring, self.p.n, self.p.f) {
            return;
        }
        let h = cert.checkpoint.height;
        let mut len = self.ledger.len();
        if len > h {
            return;
        }
        let mut hash = self.ledger.tip_hash();
        let mut fresh = Vec::new();
        for e in entries {
            if e.height <= len {
                continue;
            }
            if e.height != len + 1 || e.height > h {
                break;
            }
            hash = crate::ledger::chain_hash(hash, &e);
            len += 1;
            fresh.push(e);
        }
        if len != h || hash != cert.checkpoint.ledger_hash {
            return;
        }
        self.pending = None;
        self.held.clear();
        for e in fresh {
            self.ledger.append(e.clone()).expect("contiguous");
            self.mempool.mark_committed(&e.cmd);
            self.applied.push(e);
        }
        self.notes
            .push(("synced", format!("epoch={} h={h}", cert.epoch)));
        self.activate(cert, now, out);
    }

    /// Checks that signed headers match the claims they travel with and
    /// verify. `Err(true)` means a tag failed to verify.
    fn check_headers(&self, from: NodeId, body: &Body) -> Result<Vec<SignedHeader>, bool> {
        let ring = &self.ring;
        let ok = |h: &SignedHeader, kind: HeaderKind, round: u64, slot: u64, digest| {
            if h.key.signer != from
                || h.key.kind != kind
                || h.key.epoch != self.epoch
                || h.key.round != round
                || h.key.slot != slot
                || h.digest != digest
            {
                return Err(false);
            }
            if !h.verify(ring) {
                return Err(true);
            }
            Ok(())
        };
        match body {
            Body::Raft(RaftMsg::VoteRequest(r)) => {
                if r.candidate != from {
                    return Err(false);
                }
                ok(
                    &r.header,
                    HeaderKind::RaftCandidacy,
                    r.term,
                    0,
                    candidacy_digest(r.last_log_index, r.last_log_term),
                )?;
                Ok(vec![r.header])
            }
            Body::Raft(RaftMsg::VoteReply(r)) => {
                if r.voter != from {
                    return Err(false);
                }
                match (&r.header, r.granted) {
                    (Some(h), true) => {
                        ok(h, HeaderKind::RaftVote, r.term, 0, vote_digest(self.id))?;
                        Ok(vec![*h])
                    }
                    (None, false) => Ok(Vec::new()),
                    _ => Err(false),
                }
            }
            Body::Raft(RaftMsg::AppendEntries(a)) => {
                if a.leader != from || a.entry_headers.len() != a.entries.len() {
                    return Err(false);
                }
                for (i, (e, h)) in a.entries.iter().zip(&a.entry_headers).enumerate() {
                    ok(
                        h,
                        HeaderKind::RaftEntry,
                        e.term,
                        a.prev_log_index + 1 + i as u64,
                        e.cmd.digest(),
                    )?;
                }
                Ok(a.entry_headers.clone())
            }
            Body::Raft(RaftMsg::AppendReply(r)) => {
                if r.follower != from {
                    return Err(false);
                }
                Ok(Vec::new())
            }
            Body::Hs(m) => {
                let hs = m.headers();
                for h in &hs {
                    if h.key.signer != from || h.key.epoch != self.epoch {
                        return Err(false);
                    }
                    if !h.verify(ring) {
                        return Err(true);
                    }
                }
                Ok(hs)
            }
            _ => Ok(Vec::new()),
        }
    }

    fn endorse_check(&self, now: Tick) -> impl Fn(&Command) -> bool {
        let epoch = self.epoch;
        let protocol = self.protocol;
        let switching = self.pending.is_some();
        let validity = self.p.policy.report_interval * ENDORSE_VALIDITY_INTERVALS;
        let endorsed = self.endorsed.clone();
        move |cmd: &Command| {
            let Some(b) = Barrier::decode(cmd) else {
                return false;
            };
            !switching
                && b.epoch == epoch + 1
                && b.target != protocol
                && (b.trigger == Trigger::Manual
                    || endorsed
                        .get(&b.target)
                        .is_some_and(|&t| t + validity >= now))
        }
    }

    pub fn on_message(
        &mut self,
        now: Tick,
        from: NodeId,
        msg: Message,
        send_tick: Tick,
    ) -> Vec<Out> {
        let mut out = Vec::new();
        let controller = self.p.controller;
        if controller {
            self.monitor
                .observe_latency(now.saturating_sub(send_tick) as f64);
        }
        let Message { epoch, body } = msg;
        match body {
            Body::Report(r) => {
                if r.reporter != from || !r.verify(&self.ring) {
                    if controller {
                        self.monitor.observe_invalid_tag(from, now);
                    }
                    return out;
                }
                if controller {
                    self.monitor.observe_report(&r, now);
                    for h in r.headers {
                        let was = self.suspected(h.key.signer, now);
                        if h.verify(&self.ring)
                            && self.monitor.observe_header(h, now, false).is_some()
                        {
                            self.evidence_note(h.key.signer, was);
                        }
                    }
                    for p in r.proofs {
                        let was = self.suspected(p.offender(), now);
                        if self.monitor.observe_proof(p, &self.ring, now) {
                            self.evidence_note(p.offender(), was);
                        }
                    }
                }
            }
            Body::SwitchPrepare(b) => {
                if self.pending.is_none()
                    && self.endorses(&b, now)
                    && self.barrier_request.is_none_or(|r| r.epoch != b.epoch)
                {
                    self.barrier_request = Some(b);
                }
            }
            Body::CheckpointVote(v) => {
                if v.voter != from {
                    return out;
                }
                if v.epoch <= self.epoch {
                    if let Some(cert) = self.certs.get(&v.epoch) {
                        self.send(from, Body::SwitchCommit(cert.clone()), &mut out);
                    }
                } else if v.epoch == self.epoch + 1 {
                    self.tally_vote(v, now, &mut out);
                }
            }
            Body::SwitchCommit(cert) => {
                if cert.epoch == self.epoch + 1 && cert.verify(&self.ring, self.p.n, self.p.f) {
                    self.try_activate(cert, from, now, &mut out);
                } else if cert.epoch > self.epoch + 1 {
                    self.request_sync(from, now, &mut out);
                }
            }
            Body::SyncRequest { have } => {
                if let Some(cert) = self.certs.get(&(epoch + 1)) {
                    let h = cert.checkpoint.height;
                    let entries: Vec<LedgerEntry> = if have < h {
                        self.ledger.entries_after(have)[..(h - have) as usize].to_vec()
                    } else {
                        Vec::new()
                    };
                    let cert = cert.clone();
                    self.send(from, Body::Sync { cert, entries }, &mut out);
                }
            }
            Body::Sync { cert, entries } => self.on_sync(cert, entries, now, &mut out),
            body @ (Body::Raft(_) | Body::Hs(_)) => {
                if epoch > self.epoch {
                    if epoch == self.epoch + 1 && self.future.len() < MAX_FUTURE {
                        self.future.push((from, Message { epoch, body }, send_tick));
                    }
                    self.request_sync(from, now, &mut out);
                    return out;
                }
                if epoch < self.epoch {
                    if let Some(cert) = self.certs.get(&(epoch + 1)) {
                        if self
                            .helped
                            .get(&from)
                            .is_none_or(|&t| now >= t + SYNC_BACKOFF)
                        {
                            self.helped.insert(from, now);
                            self.send(from, Body::SwitchCommit(cert.clone()), &mut out);
                        }
                    }
                    return out;
                }
                let headers = match self.check_headers(from, &body) {
                    Ok(h) => h,
                    Err(bad_tag) => {
                        if bad_tag && controller {
                            self.monitor.observe_invalid_tag(from, now);
                        }
                        return out;
                    }
                };
                if controller {
                    for h in headers {
                        let gossip = h.key.kind != HeaderKind::HsVote;
                        let was = self.suspected(h.key.signer, now);
                        if self.monitor.observe_header(h, now, gossip).is_some() {
                            self.evidence_note(h.key.signer, was);
                        }
                    }
                    if self
                        .monitor
                        .is_suspect(from, now, self.p.policy.byz_clear_window)
                    {
                        return out;
                    }
                }
                self.dispatch(now, from, body, &mut out);
            }
        }
        out
    }

    fn suspected(&self, who: NodeId, now: Tick) -> bool {
        self.monitor
            .is_suspect(who, now, self.p.policy.byz_clear_window)
    }

    /// Notes only the first proof against a node while it stays suspected.
    fn evidence_note(&mut self, who: NodeId, was_suspect: bool) {
        if !was_suspect {
            self.notes.push(("evidence", format!("node={}", who.0)));
        }
    }

    fn dispatch(&mut self, now: Tick, from: NodeId, body: Body, out: &mut Vec<Out>) {
        match (body, &mut self.engine) {
            (Body::Raft(m), Engine::Raft(r)) => {
                let step = r.on_message(now, from, &m);
                self.absorb_raft(step, now, out);
            }
            (Body::Hs(m), Engine::Hs(_)) => {
                let barrier = self.proposal_barrier(now);
                let check = self.endorse_check(now);
                let Engine::Hs(h) = &mut self.engine else {
                    unreachable!()
                };
                let src = ProposalSource {
                    mempool: &self.mempool,
                    barrier: barrier.as_ref(),
                };
                let step = h.on_message(now, from, m, src, Some(&check));
                self.absorb_hs(step, now, out);
            }
            _ => {}
        }
    }
}
