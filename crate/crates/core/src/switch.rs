//! Switch controller: condition monitoring, the switch rule, the fraud
//! detector, and the checkpoint quorum that gates activation.

use crate::auth::{AuthTag, EquivocationProof, HeaderKey, KeyRing, SignedHeader, SigningKey};
use crate::digest::{Digest, Encoder};
use crate::ledger::{Checkpoint, Command, NodeId, Protocol, SWITCH_CLIENT};
use crate::sim::Tick;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    ByzRatio,
    Latency,
    Bandwidth,
    Manual,
}

impl Trigger {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        [
            Trigger::ByzRatio,
            Trigger::Latency,
            Trigger::Bandwidth,
            Trigger::Manual,
        ]
        .get(t as usize)
        .copied()
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::ByzRatio => "byz_ratio",
            Trigger::Latency => "latency",
            Trigger::Bandwidth => "bandwidth",
            Trigger::Manual => "manual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwitchPolicy {
    /// Proven-Byzantine fraction that moves CFT to BFT. `None` means
    /// `1 / (3N)`, so a single proven node suffices.
    pub byz_ratio_up: Option<f64>,
    pub byz_clear_window: Tick,
    pub latency_req: f64,
    pub bandwidth_min: f64,
    pub cooldown: Tick,
    pub max_switch_rate: usize,
    pub rate_window: Tick,
    pub switch_timeout: Tick,
    pub report_interval: Tick,
    pub ewma_alpha: f64,
    pub outlier_z: f64,
    pub preferred_bft: Protocol,
    /// Allow basic/chained switches inside BFT on view success rate.
    pub variant_switching: bool,
    pub detector: bool,
}

impl Default for SwitchPolicy {
    fn default() -> Self {
        Self {
            byz_ratio_up: None,
            byz_clear_window: 3000,
            latency_req: 100.0,
            bandwidth_min: 20.0,
            cooldown: 1000,
            max_switch_rate: 3,
            rate_window: 10_000,
            switch_timeout: 1000,
            report_interval: 100,
            ewma_alpha: 0.2,
            outlier_z: 3.5,
            preferred_bft: Protocol::HotstuffChained,
            variant_switching: false,
            detector: true,
        }
    }
}

impl SwitchPolicy {
    pub fn ratio_threshold(&self, n: usize) -> f64 {
        self.byz_ratio_up.unwrap_or(1.0 / (3.0 * n as f64))
    }

    pub fn validate(&self, n: usize) -> Vec<String> {
        let mut errs = Vec::new();
        let rho = self.ratio_threshold(n);
        if !(rho > 0.0 && rho <= 1.0 / 3.0) {
            errs.push(format!("switch.byz_ratio_up: {rho} outside (0, 1/3]"));
        }
        if self.cooldown == 0 {
            errs.push("switch.cooldown: must be > 0".into());
        }
        if self.report_interval == 0 {
            errs.push("switch.report_interval: must be > 0".into());
        }
        if self.switch_timeout == 0 {
            errs.push("switch.switch_timeout: must be > 0".into());
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            errs.push(format!(
                "switch.ewma_alpha: {} outside (0, 1]",
                self.ewma_alpha
            ));
        }
        if self.max_switch_rate == 0 {
            errs.push("switch.max_switch_rate: must be > 0".into());
        }
        if !self.preferred_bft.is_bft() {
            errs.push("switch.preferred_bft: must be a HotStuff variant".into());
        }
        errs
    }
}

pub fn ewma(prev: Option<f64>, sample: f64, alpha: f64) -> f64 {
    match prev {
        None => sample,
        Some(p) => p + alpha * (sample - p),
    }
}

/// Signed periodic condition report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub reporter: NodeId,
    pub tick: Tick,
    pub seq: u64,
    pub latency: f64,
    pub bandwidth: f64,
    pub committed_height: u64,
    pub headers: Vec<SignedHeader>,
    pub proofs: Vec<EquivocationProof>,
    pub tag: AuthTag,
}

impl ConditionReport {
    fn body_digest(
        reporter: NodeId,
        tick: Tick,
        seq: u64,
        latency: f64,
        bandwidth: f64,
        committed_height: u64,
    ) -> Digest {
        let mut enc = Encoder::tagged("report");
        enc.u32(reporter.0)
            .u64(tick)
            .u64(seq)
            .u64(latency.to_bits())
            .u64(bandwidth.to_bits())
            .u64(committed_height);
        enc.finish()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sign(
        key: &SigningKey,
        tick: Tick,
        seq: u64,
        latency: f64,
        bandwidth: f64,
        committed_height: u64,
        headers: Vec<SignedHeader>,
        proofs: Vec<EquivocationProof>,
    ) -> Self {
        let reporter = key.signer();
        let d = Self::body_digest(reporter, tick, seq, latency, bandwidth, committed_height);
        Self {
            reporter,
            tick,
            seq,
            latency,
            bandwidth,
            committed_height,
            headers,
            proofs,
            tag: key.sign_digest(d),
        }
    }

    pub fn verify(&self, ring: &KeyRing) -> bool {
        self.tag.signer == self.reporter
            && ring.verify_digest(
                &self.tag,
                Self::body_digest(
                    self.reporter,
                    self.tick,
                    self.seq,
                    self.latency,
                    self.bandwidth,
                    self.committed_height,
                ),
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    InvalidTag,
    Equivocation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub tick: Tick,
    pub kind: EvidenceKind,
    pub proof: Option<EquivocationProof>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Sample {
    tick: Tick,
    reporter: NodeId,
    latency: f64,
    bandwidth: f64,
}

/// Aggregated view of the signals a switch decision reads.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Signals {
    pub n: usize,
    pub active_suspects: usize,
    pub last_evidence: Option<Tick>,
    pub latency: Option<f64>,
    pub bandwidth: Option<f64>,
    pub view_success: Option<f64>,
}

/// Per-node monitor of latency, bandwidth and Byzantine evidence.
#[derive(Debug, Clone)]
pub struct ConditionMonitor {
    n: usize,
    alpha: f64,
    pub latency_ewma: Option<f64>,
    pub bandwidth_avail: Option<f64>,
    sample_window: Tick,
    samples: VecDeque<Sample>,
    latest: BTreeMap<NodeId, Sample>,
    evidence: BTreeMap<NodeId, Vec<Evidence>>,
    /// Reporters whose figures the detector rejected as outliers.
    distrusted: BTreeSet<NodeId>,
    witnessed: BTreeMap<HeaderKey, (SignedHeader, Tick)>,
    fresh_headers: Vec<SignedHeader>,
    fresh_proofs: Vec<EquivocationProof>,
    started: Tick,
}

impl ConditionMonitor {
    pub fn new(n: usize, policy: &SwitchPolicy, started: Tick) -> Self {
        Self {
            n,
            alpha: policy.ewma_alpha,
            latency_ewma: None,
            bandwidth_avail: None,
            sample_window: policy.report_interval * 3,
            samples: VecDeque::new(),
            latest: BTreeMap::new(),
            evidence: BTreeMap::new(),
            distrusted: BTreeSet::new(),
            witnessed: BTreeMap::new(),
            fresh_headers: Vec::new(),
            fresh_proofs: Vec::new(),
            started,
        }
    }

    pub fn observe_latency(&mut self, sample: f64) {
        self.latency_ewma = Some(ewma(self.latency_ewma, sample.max(0.0), self.alpha));
    }

    pub fn observe_bandwidth(&mut self, cap: f64) {
        self.bandwidth_avail = Some(cap);
    }

    fn add_evidence(&mut self, who: NodeId, ev: Evidence) -> bool {
        let list = self.evidence.entry(who).or_default();
        if let Some(p) = ev.proof {
            if list
                .iter()
                .any(|e| e.proof.is_some_and(|q| q.first.key == p.first.key))
            {
                return false;
            }
            self.fresh_proofs.push(p);
        }
        list.push(ev);
        true
    }

    /// Records a verified header; returns a proof if it conflicts with one
    /// already seen under the same key.
    pub fn observe_header(
        &mut self,
        h: SignedHeader,
        now: Tick,
        gossip: bool,
    ) -> Option<EquivocationProof> {
        match self.witnessed.get(&h.key) {
            Some((prev, _)) if prev.digest != h.digest => {
                let proof = EquivocationProof {
                    first: *prev,
                    second: h,
                };
                let added = self.add_evidence(
                    h.key.signer,
                    Evidence {
                        tick: now,
                        kind: EvidenceKind::Equivocation,
                        proof: Some(proof),
                    },
                );
                added.then_some(proof)
            }
            Some(_) => None,
            None => {
                self.witnessed.insert(h.key, (h, now));
                if gossip {
                    self.fresh_headers.push(h);
                }
                None
            }
        }
    }

    /// Adds a proof received from a peer after checking it.
    pub fn observe_proof(&mut self, p: EquivocationProof, ring: &KeyRing, now: Tick) -> bool {
        p.verify(ring)
            && self.add_evidence(
                p.offender(),
                Evidence {
                    tick: now,
                    kind: EvidenceKind::Equivocation,
                    proof: Some(p),
                },
            )
    }

    pub fn observe_invalid_tag(&mut self, from: NodeId, now: Tick) {
        self.add_evidence(
            from,
            Evidence {
                tick: now,
                kind: EvidenceKind::InvalidTag,
                proof: None,
            },
        );
    }

    pub fn observe_report(&mut self, r: &ConditionReport, now: Tick) {
        let s = Sample {
            tick: now,
            reporter: r.reporter,
            latency: r.latency,
            bandwidth: r.bandwidth,
        };
        self.samples.push_back(s);
        self.latest.insert(r.reporter, s);
    }

    /// Drops state older than the windows that read it.
    pub fn prune(&mut self, now: Tick, keep_headers: Tick) {
        let cutoff = now.saturating_sub(self.sample_window);
        while self.samples.front().is_some_and(|s| s.tick < cutoff) {
            self.samples.pop_front();
        }
        self.latest.retain(|_, s| s.tick >= cutoff);
        let hcut = now.saturating_sub(keep_headers);
        self.witnessed.retain(|_, (_, t)| *t >= hcut);
    }

    /// Headers and proofs gathered since the previous report.
    pub fn take_gossip(&mut self) -> (Vec<SignedHeader>, Vec<EquivocationProof>) {
        (
            std::mem::take(&mut self.fresh_headers),
            std::mem::take(&mut self.fresh_proofs),
        )
    }

    pub fn evidence(&self) -> &BTreeMap<NodeId, Vec<Evidence>> {
        &self.evidence
    }

    pub fn distrust(&mut self, who: impl IntoIterator<Item = NodeId>) {
        self.distrusted.extend(who);
    }

    pub fn distrusted(&self) -> &BTreeSet<NodeId> {
        &self.distrusted
    }

    /// Nodes with evidence newer than `window`.
    pub fn active_suspects(&self, now: Tick, window: Tick) -> BTreeSet<NodeId> {
        self.evidence
            .iter()
            .filter(|(_, evs)| evs.iter().any(|e| e.tick + window > now))
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn last_evidence(&self) -> Option<Tick> {
        self.evidence.values().flatten().map(|e| e.tick).max()
    }

    pub fn is_suspect(&self, who: NodeId, now: Tick, window: Tick) -> bool {
        self.evidence
            .get(&who)
            .is_some_and(|evs| evs.iter().any(|e| e.tick + window > now))
    }

    fn excluded(&self, who: NodeId, now: Tick, window: Tick) -> bool {
        self.distrusted.contains(&who)
            || self
                .evidence
                .get(&who)
                .is_some_and(|evs| evs.iter().any(|e| e.tick + window > now))
    }

    /// Mean over every report sample in the window, plus this node's own
    /// reading. No per-reporter deduplication: this is the aggregate the
    /// fraud detector exists to second-guess.
    pub fn signals(&self, now: Tick, policy: &SwitchPolicy, view_success: Option<f64>) -> Signals {
        let w = policy.byz_clear_window;
        let mut lat = Vec::new();
        let mut bw = Vec::new();
        for s in &self.samples {
            if s.tick + self.sample_window >= now && !self.excluded(s.reporter, now, w) {
                lat.push(s.latency);
                bw.push(s.bandwidth);
            }
        }
        lat.extend(self.latency_ewma);
        bw.extend(self.bandwidth_avail);
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Signals {
            n: self.n,
            active_suspects: self.active_suspects(now, w).len(),
            last_evidence: Some(
                self.last_evidence()
                    .unwrap_or(self.started)
                    .max(self.started),
            ),
            latency: mean(&lat),
            bandwidth: mean(&bw),
            view_success,
        }
    }

    /// Latest latency and bandwidth figure per reporter.
    pub fn per_reporter(&self, now: Tick) -> Vec<(NodeId, f64, f64)> {
        self.latest
            .iter()
            .filter(|(_, s)| s.tick + self.sample_window >= now)
            .map(|(n, s)| (*n, s.latency, s.bandwidth))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub target: Protocol,
    pub trigger: Trigger,
    pub decided_tick: Tick,
    pub checkpoint: Option<Checkpoint>,
    /// First leader under the target; Raft targets elect one instead.
    pub new_leader: Option<NodeId>,
}

/// The switch rule. `last_switch` is the tick of the latest completed
/// switch, if any.
pub fn decide(
    policy: &SwitchPolicy,
    sig: &Signals,
    current: Protocol,
    now: Tick,
    last_switch: Option<Tick>,
) -> Option<SwitchDecision> {
    if last_switch.is_some_and(|t| now < t + policy.cooldown) {
        return None;
    }
    let mk = |target, trigger| {
        Some(SwitchDecision {
            target,
            trigger,
            decided_tick: now,
            checkpoint: None,
            new_leader: None,
        })
    };
    if !current.is_bft() {
        let ratio = sig.active_suspects as f64 / sig.n as f64;
        if sig.active_suspects > 0 && ratio + 1e-12 >= policy.ratio_threshold(sig.n) {
            return mk(policy.preferred_bft, Trigger::ByzRatio);
        }
        return None;
    }
    let quiet = sig.active_suspects == 0
        && sig
            .last_evidence
            .is_some_and(|t| now >= t + policy.byz_clear_window);
    if quiet {
        if sig.bandwidth.is_some_and(|b| b < policy.bandwidth_min) {
            return mk(Protocol::Raft, Trigger::Bandwidth);
        }
        if sig.latency.is_some_and(|l| l > policy.latency_req) {
            return mk(Protocol::Raft, Trigger::Latency);
        }
    }
    if policy.variant_switching {
        match (current, sig.view_success) {
            (Protocol::HotstuffBasic, Some(s)) if s >= 0.9 => {
                return mk(Protocol::HotstuffChained, Trigger::Latency)
            }
            (Protocol::HotstuffChained, Some(s)) if s < 0.5 => {
                return mk(Protocol::HotstuffBasic, Trigger::Latency)
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FraudVerdict {
    Allow,
    Suppress(Vec<NodeId>),
    LockBft,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Robust z-score per value: `|x - median| / max(1.4826 * MAD, 1)`.
pub fn mad_z_scores(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let med = median(&mut values.to_vec());
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&mut dev);
    let scale = (1.4826 * mad).max(1.0);
    values.iter().map(|x| (x - med).abs() / scale).collect()
}

/// Fraud check run before a switch attempt. `attempts` are the ticks of
/// earlier switch attempts this node took part in.
pub fn detect_fraud(
    policy: &SwitchPolicy,
    decision: &SwitchDecision,
    attempts: &[Tick],
    reports: &[(NodeId, f64, f64)],
    now: Tick,
) -> FraudVerdict {
    let recent = attempts
        .iter()
        .filter(|&&t| t + policy.rate_window > now)
        .count();
    if recent >= policy.max_switch_rate {
        return FraudVerdict::LockBft;
    }
    let pick: fn(&(NodeId, f64, f64)) -> f64 = match decision.trigger {
        Trigger::Latency => |r| r.1,
        Trigger::Bandwidth => |r| r.2,
        _ => return FraudVerdict::Allow,
    };
    let vals: Vec<f64> = reports.iter().map(pick).collect();
    let z = mad_z_scores(&vals);
    let outliers: Vec<NodeId> = reports
        .iter()
        .zip(&z)
        .filter(|(_, z)| **z > policy.outlier_z)
        .map(|(r, _)| r.0)
        .collect();
    if outliers.is_empty() || outliers.len() * 2 >= reports.len() {
        return FraudVerdict::Allow;
    }
    let mut inliers: Vec<f64> = reports
        .iter()
        .filter(|r| !outliers.contains(&r.0))
        .map(pick)
        .collect();
    let m = median(&mut inliers);
    let still_holds = match decision.trigger {
        Trigger::Latency => m > policy.latency_req,
        _ => m < policy.bandwidth_min,
    };
    if still_holds {
        FraudVerdict::Allow
    } else {
        FraudVerdict::Suppress(outliers)
    }
}

/// Contents of the barrier command a switch is ordered by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Barrier {
    pub epoch: u64,
    pub target: Protocol,
    pub trigger: Trigger,
    pub decided_tick: Tick,
    pub initiator: NodeId,
}

impl Barrier {
    /// `epoch` is the epoch the switch leads into.
    pub fn command(&self) -> Command {
        let mut p = Vec::with_capacity(14);
        p.push(self.target.tag());
        p.push(self.trigger.tag());
        p.extend_from_slice(&self.decided_tick.to_le_bytes());
        p.extend_from_slice(&self.initiator.0.to_le_bytes());
        Command::new(SWITCH_CLIENT, self.epoch, p)
    }

    pub fn decode(cmd: &Command) -> Option<Self> {
        if !cmd.is_switch_barrier() || cmd.payload.len() != 14 {
            return None;
        }
        let p = &cmd.payload;
        Some(Self {
            epoch: cmd.seq,
            target: Protocol::from_tag(p[0])?,
            trigger: Trigger::from_tag(p[1])?,
            decided_tick: u64::from_le_bytes(p[2..10].try_into().ok()?),
            initiator: NodeId(u32::from_le_bytes(p[10..14].try_into().ok()?)),
        })
    }
}

/// Signed statement of the ledger hash at the barrier height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointVote {
    pub voter: NodeId,
    pub epoch: u64,
    pub target: Protocol,
    pub checkpoint: Checkpoint,
    pub tag: AuthTag,
}

impl CheckpointVote {
    fn digest(epoch: u64, target: Protocol, cp: &Checkpoint) -> Digest {
        let mut enc = Encoder::tagged("ckpt.vote");
        enc.u64(epoch)
            .u8(target.tag())
            .u64(cp.height)
            .digest(cp.ledger_hash)
            .u8(cp.protocol_at_checkpoint.tag());
        enc.finish()
    }

    pub fn sign(key: &SigningKey, epoch: u64, target: Protocol, checkpoint: Checkpoint) -> Self {
        Self {
            voter: key.signer(),
            epoch,
            target,
            checkpoint,
            tag: key.sign_digest(Self::digest(epoch, target, &checkpoint)),
        }
    }

    pub fn verify(&self, ring: &KeyRing) -> bool {
        self.tag.signer == self.voter
            && ring.verify_digest(
                &self.tag,
                Self::digest(self.epoch, self.target, &self.checkpoint),
            )
    }
}

/// Votes needed to activate `target`: a strict majority for Raft, `N - f`
/// for HotStuff.
pub fn activation_quorum(target: Protocol, n: usize, f: usize) -> usize {
    if target.is_bft() {
        n - f
    } else {
        n / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuorumStatus {
    Pending,
    Reached(SwitchCert),
    Unreachable,
}

#[derive(Debug, Clone)]
pub struct CheckpointTally {
    n: usize,
    quorum: usize,
    epoch: u64,
    target: Protocol,
    votes: BTreeMap<NodeId, CheckpointVote>,
}

impl CheckpointTally {
    pub fn new(n: usize, quorum: usize, epoch: u64, target: Protocol) -> Self {
        Self {
            n,
            quorum,
            epoch,
            target,
            votes: BTreeMap::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn target(&self) -> Protocol {
        self.target
    }

    pub fn votes(&self) -> impl Iterator<Item = &CheckpointVote> {
        self.votes.values()
    }

    /// Verified votes for this switch only; the first vote per voter counts.
    pub fn add(&mut self, v: CheckpointVote, ring: &KeyRing) -> bool {
        if v.epoch != self.epoch || v.target != self.target || !v.verify(ring) {
            return false;
        }
        if self.votes.contains_key(&v.voter) {
            return false;
        }
        self.votes.insert(v.voter, v);
        true
    }

    pub fn status(&self) -> QuorumStatus {
        let mut groups: BTreeMap<(u64, Digest), Vec<CheckpointVote>> = BTreeMap::new();
        for v in self.votes.values() {
            groups
                .entry((v.checkpoint.height, v.checkpoint.ledger_hash))
                .or_default()
                .push(*v);
        }
        let best = groups.values().map(Vec::len).max().unwrap_or(0);
        if let Some(votes) = groups.into_values().find(|g| g.len() >= self.quorum) {
            return QuorumStatus::Reached(SwitchCert {
                epoch: self.epoch,
                target: self.target,
                checkpoint: votes[0].checkpoint,
                votes,
            });
        }
        let outstanding = self.n - self.votes.len();
        if best + outstanding < self.quorum {
            QuorumStatus::Unreachable
        } else {
            QuorumStatus::Pending
        }
    }
}

/// Quorum of matching checkpoint votes authorising a switch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchCert {
    pub epoch: u64,
    pub target: Protocol,
    pub checkpoint: Checkpoint,
    pub votes: Vec<CheckpointVote>,
}

impl SwitchCert {
    pub fn verify(&self, ring: &KeyRing, n: usize, f: usize) -> bool {
        let mut seen = BTreeSet::new();
        for v in &self.votes {
            if v.epoch != self.epoch
                || v.target != self.target
                || v.checkpoint != self.checkpoint
                || !v.verify(ring)
                || !seen.insert(v.voter)
            {
                return false;
            }
        }
        seen.len() >= activation_quorum(self.target, n, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Aborted,
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub tick: Tick,
    /// Epoch the switch leads into (for suppressed decisions, the epoch it
    /// would have).
    pub epoch: u64,
    pub from: Protocol,
    pub to: Protocol,
    pub trigger: Trigger,
    pub outcome: Outcome,
    pub node: NodeId,
    pub checkpoint_height: Option<u64>,
}

/// Append-only switch history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwitchLog {
    records: Vec<SwitchRecord>,
}

impl SwitchLog {
    pub fn push(&mut self, r: SwitchRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[SwitchRecord] {
        &self.records
    }

    pub fn completed(&self) -> impl Iterator<Item = &SwitchRecord> {
        self.records
            .iter()
            .filter(|r| r.outcome == Outcome::Completed)
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.records.iter().filter(|r| r.outcome == outcome).count()
    }

    /// Largest number of completed switches in any window of `len` ticks.
    pub fn max_completed_in_window(&self, len: Tick) -> usize {
        let ticks: Vec<Tick> = self.completed().map(|r| r.tick).collect();
        let mut best = 0;
        let mut lo = 0;
        for hi in 0..ticks.len() {
            while ticks[hi] >= ticks[lo] + len {
                lo += 1;
            }
            best = best.max(hi - lo + 1);
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::HeaderKind;

    fn policy() -> SwitchPolicy {
        SwitchPolicy::default()
    }

    #[test]
    fn ewma_step() {
        assert_eq!(ewma(Some(100.0), 200.0, 0.2), 120.0);
        assert_eq!(ewma(None, 7.0, 0.2), 7.0);
    }

    #[test]
    fn ewma_converges_to_constant_latency() {
        let mut m = ConditionMonitor::new(4, &policy(), 0);
        m.observe_latency(0.0);
        for _ in 0..100 {
            m.observe_latency(5.0);
        }
        // closed form: 5 * (1 - 0.8^100)
        let expect = 5.0 * (1.0 - 0.8f64.powi(100));
        assert!((m.latency_ewma.unwrap() - expect).abs() < 1e-9);
        assert!((m.latency_ewma.unwrap() - 5.0).abs() <= 1.0);
    }

    #[test]
    fn conflicting_votes_make_suspect() {
        let ring = KeyRing::new(9, 4);
        let k = ring.signing_key(NodeId(3));
        let mut m = ConditionMonitor::new(4, &policy(), 0);
        let a = SignedHeader::sign(&k, HeaderKind::HsVote, 0, 7, 0, Digest(1));
        let b = SignedHeader::sign(&k, HeaderKind::HsVote, 0, 7, 0, Digest(2));
        assert!(m.observe_header(a, 10, false).is_none());
        assert!(m.observe_header(a, 11, false).is_none());
        let p = m.observe_header(b, 12, false).unwrap();
        assert!(p.verify(&ring));
        assert_eq!(
            m.active_suspects(12, 100).into_iter().collect::<Vec<_>>(),
            vec![NodeId(3)]
        );
        // a forwarded copy of the same proof adds nothing new
        let mut other = ConditionMonitor::new(4, &policy(), 0);
        assert!(other.observe_proof(p, &ring, 20));
        assert!(!other.observe_proof(p, &ring, 21));
        assert_eq!(m.last_evidence(), Some(12));
    }

    fn sig(n: usize, suspects: usize, last_ev: Tick, bw: f64, lat: f64) -> Signals {
        Signals {
            n,
            active_suspects: suspects,
            last_evidence: Some(last_ev),
            latency: Some(lat),
            bandwidth: Some(bw),
            view_success: None,
        }
    }

    #[test]
    fn one_suspect_of_four_moves_raft_to_bft() {
        let mut p = policy();
        p.byz_ratio_up = Some(0.25);
        let d = decide(&p, &sig(4, 1, 0, 1000.0, 5.0), Protocol::Raft, 5000, None).unwrap();
        assert!(d.target.is_bft());
        assert_eq!(d.trigger, Trigger::ByzRatio);
        // the default threshold also fires on a single suspect
        assert!(decide(
            &policy(),
            &sig(7, 1, 0, 1000.0, 5.0),
            Protocol::Raft,
            5000,
            None
        )
        .is_some());
        assert!(decide(
            &policy(),
            &sig(7, 0, 0, 1000.0, 5.0),
            Protocol::Raft,
            5000,
            None
        )
        .is_none());
    }

    #[test]
    fn quiet_low_bandwidth_moves_bft_to_raft() {
        let p = policy();
        let d = decide(
            &p,
            &sig(4, 0, 0, 5.0, 5.0),
            Protocol::HotstuffChained,
            3000,
            None,
        )
        .unwrap();
        assert_eq!((d.target, d.trigger), (Protocol::Raft, Trigger::Bandwidth));
        // evidence inside the clear window blocks it
        assert!(decide(
            &p,
            &sig(4, 0, 1000, 5.0, 5.0),
            Protocol::HotstuffChained,
            3000,
            None
        )
        .is_none());
        assert!(decide(
            &p,
            &sig(4, 0, 0, 500.0, 5.0),
            Protocol::HotstuffChained,
            3000,
            None
        )
        .is_none());
    }

    #[test]
    fn cooldown_suppresses() {
        let mut p = policy();
        p.cooldown = 500;
        assert!(decide(
            &p,
            &sig(4, 1, 0, 1000.0, 5.0),
            Protocol::Raft,
            1010,
            Some(1000)
        )
        .is_none());
        assert!(decide(
            &p,
            &sig(4, 1, 0, 1000.0, 5.0),
            Protocol::Raft,
            1500,
            Some(1000)
        )
        .is_some());
    }

    #[test]
    fn variant_switch_on_view_success() {
        let mut p = policy();
        p.variant_switching = true;
        let mut s = sig(4, 1, 100, 1000.0, 5.0);
        s.view_success = Some(0.95);
        let d = decide(&p, &s, Protocol::HotstuffBasic, 200, None).unwrap();
        assert_eq!(d.target, Protocol::HotstuffChained);
        s.view_success = Some(0.3);
        let d = decide(&p, &s, Protocol::HotstuffChained, 200, None).unwrap();
        assert_eq!(d.target, Protocol::HotstuffBasic);
    }

    fn dec(trigger: Trigger, target: Protocol) -> SwitchDecision {
        SwitchDecision {
            target,
            trigger,
            decided_tick: 0,
            checkpoint: None,
            new_leader: None,
        }
    }

    #[test]
    fn too_many_attempts_lock_bft() {
        let p = policy();
        let v = detect_fraud(
            &p,
            &dec(Trigger::Latency, Protocol::Raft),
            &[10, 20, 30, 40, 50],
            &[],
            100,
        );
        assert_eq!(v, FraudVerdict::LockBft);
        let v = detect_fraud(
            &p,
            &dec(Trigger::ByzRatio, Protocol::HotstuffChained),
            &[10],
            &[],
            100,
        );
        assert_eq!(v, FraudVerdict::Allow);
    }

    #[test]
    fn lone_latency_outlier_is_suppressed() {
        let p = policy();
        let reports: Vec<_> = [40.0, 42.0, 41.0, 900.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| (NodeId(i as u32), l, 1000.0))
            .collect();
        let z = mad_z_scores(&[40.0, 42.0, 41.0, 900.0]);
        // independent arithmetic: median 41.5, MAD 1.0
        assert!((z[3] - 858.5 / 1.4826).abs() < 1e-9);
        assert!((z[0] - 1.5 / 1.4826).abs() < 1e-9);
        let v = detect_fraud(
            &p,
            &dec(Trigger::Latency, Protocol::Raft),
            &[],
            &reports,
            100,
        );
        assert_eq!(v, FraudVerdict::Suppress(vec![NodeId(3)]));
    }

    #[test]
    fn consistent_reports_allow() {
        let p = policy();
        let reports: Vec<_> = (0..4)
            .map(|i| (NodeId(i), 150.0 + i as f64, 1000.0))
            .collect();
        let v = detect_fraud(
            &p,
            &dec(Trigger::Latency, Protocol::Raft),
            &[],
            &reports,
            100,
        );
        assert_eq!(v, FraudVerdict::Allow);
    }

    #[test]
    fn barrier_round_trip() {
        let b = Barrier {
            epoch: 3,
            target: Protocol::HotstuffBasic,
            trigger: Trigger::Bandwidth,
            decided_tick: 12345,
            initiator: NodeId(2),
        };
        let c = b.command();
        assert!(c.is_switch_barrier());
        assert_eq!(Barrier::decode(&c), Some(b));
    }

    fn cp(h: u64, hash: u64) -> Checkpoint {
        Checkpoint {
            height: h,
            ledger_hash: Digest(hash),
            protocol_at_checkpoint: Protocol::Raft,
        }
    }

    #[test]
    fn tally_reaches_quorum_on_matching_votes() {
        let ring = KeyRing::new(1, 4);
        let mut t = CheckpointTally::new(4, 3, 1, Protocol::HotstuffChained);
        for i in 0..2 {
            let v = CheckpointVote::sign(
                &ring.signing_key(NodeId(i)),
                1,
                Protocol::HotstuffChained,
                cp(10, 7),
            );
            assert!(t.add(v, &ring));
            assert!(!t.add(v, &ring));
        }
        assert_eq!(t.status(), QuorumStatus::Pending);
        let v = CheckpointVote::sign(
            &ring.signing_key(NodeId(3)),
            1,
            Protocol::HotstuffChained,
            cp(10, 7),
        );
        t.add(v, &ring);
        let QuorumStatus::Reached(cert) = t.status() else {
            panic!()
        };
        assert!(cert.verify(&ring, 4, 1));
        let mut short = cert.clone();
        short.votes.pop();
        assert!(!short.verify(&ring, 4, 1));
    }

    #[test]
    fn split_checkpoint_hashes_abort() {
        let ring = KeyRing::new(1, 4);
        let mut t = CheckpointTally::new(4, 3, 1, Protocol::HotstuffChained);
        for (i, h) in [(0, 7), (1, 7), (2, 8)] {
            t.add(
                CheckpointVote::sign(
                    &ring.signing_key(NodeId(i)),
                    1,
                    Protocol::HotstuffChained,
                    cp(10, h),
                ),
                &ring,
            );
        }
        assert_eq!(t.status(), QuorumStatus::Pending);
        t.add(
            CheckpointVote::sign(
                &ring.signing_key(NodeId(3)),
                1,
                Protocol::HotstuffChained,
                cp(10, 8),
            ),
            &ring,
        );
        assert_eq!(t.status(), QuorumStatus::Unreachable);
    }

    #[test]
    fn raft_target_needs_majority_only() {
        assert_eq!(activation_quorum(Protocol::Raft, 4, 1), 3);
        assert_eq!(activation_quorum(Protocol::Raft, 7, 2), 4);
        assert_eq!(activation_quorum(Protocol::HotstuffBasic, 7, 2), 5);
    }

    #[test]
    fn report_signature_covers_figures() {
        let ring = KeyRing::new(4, 4);
        let k = ring.signing_key(NodeId(1));
        let mut r = ConditionReport::sign(&k, 100, 1, 5.0, 1000.0, 3, vec![], vec![]);
        assert!(r.verify(&ring));
        r.latency = 500.0;
        assert!(!r.verify(&ring));
    }

    #[test]
    fn window_count_of_completed() {
        let mut log = SwitchLog::default();
        for t in [0, 100, 5000, 5100, 5200, 20_000] {
            log.push(SwitchRecord {
                tick: t,
                epoch: 1,
                from: Protocol::Raft,
                to: Protocol::HotstuffChained,
                trigger: Trigger::Manual,
                outcome: Outcome::Completed,
                node: NodeId(0),
                checkpoint_height: None,
            });
        }
        assert_eq!(log.max_completed_in_window(1000), 3);
        assert_eq!(log.max_completed_in_window(10_000), 5);
    }
}
