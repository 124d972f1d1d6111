//! Scheduled crash and Byzantine behaviour.
//!
//! Byzantine transforms rewrite a node's honest outputs. They only ever sign
//! with the faulty node's own key.

use crate::auth::{HeaderKind, SignedHeader, SigningKey};
use crate::digest::Digest;
use crate::engine::{expand, Dest};
use crate::hotstuff::{sign_proposal, sign_vote, HsMsg, Phase};
use crate::ledger::{Command, NodeId};
use crate::raft::{candidacy_digest, sign_entry, vote_digest, RaftMsg};
use crate::sim::Tick;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Drops all inbound and outbound traffic.
    Crash,
    /// Conflicting proposals to disjoint peer halves; conflicting votes.
    Equivocate,
    /// Withholds votes.
    Silent,
    /// Falsifies its own condition reports and injects spoofed ones.
    FraudReport,
    /// Holds back its outbound traffic in bursts, degrading what honest
    /// peers observe on the channel.
    FraudDelay,
    /// Recovery marker ending an earlier fault.
    Recover,
}

impl FaultKind {
    pub fn is_byzantine(self) -> bool {
        matches!(
            self,
            FaultKind::Equivocate
                | FaultKind::Silent
                | FaultKind::FraudReport
                | FaultKind::FraudDelay
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Crash => "crash",
            FaultKind::Equivocate => "equivocate",
            FaultKind::Silent => "silent",
            FaultKind::FraudReport => "fraud_report",
            FaultKind::FraudDelay => "fraud_delay",
            FaultKind::Recover => "recover",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "crash" => FaultKind::Crash,
            "equivocate" => FaultKind::Equivocate,
            "silent" => FaultKind::Silent,
            "fraud_report" | "fraud" => FaultKind::FraudReport,
            "fraud_delay" => FaultKind::FraudDelay,
            "recover" => FaultKind::Recover,
            other => return Err(format!("unknown fault kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: Tick,
    pub node: NodeId,
    pub kind: FaultKind,
    /// Fault ends at this tick; `None` means permanent.
    pub until: Option<Tick>,
}

impl FromStr for FaultEvent {
    type Err = String;

    /// `tick:node:kind[:until]`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(format!("fault `{s}`: expected tick:node:kind[:until]"));
        }
        let num = |p: &str, what: &str| {
            p.parse::<u64>()
                .map_err(|_| format!("fault `{s}`: bad {what} `{p}`"))
        };
        let at = num(parts[0], "tick")?;
        let node = NodeId(num(parts[1], "node")? as u32);
        let kind = parts[2].parse().map_err(|e| format!("fault `{s}`: {e}"))?;
        let until = parts.get(3).map(|p| num(p, "until")).transpose()?;
        if until.is_some_and(|u| u <= at) {
            return Err(format!("fault `{s}`: until must be after tick"));
        }
        Ok(FaultEvent {
            at,
            node,
            kind,
            until,
        })
    }
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.at, self.node.0, self.kind)?;
        if let Some(u) = self.until {
            write!(f, ":{u}")?;
        }
        Ok(())
    }
}

/// Per-node fault schedule. A later event for the same node replaces the
/// earlier one, so at most one kind is active per node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    events: Vec<FaultEvent>,
}

impl FaultPlan {
    pub fn new(mut events: Vec<FaultEvent>) -> Self {
        events.sort_by_key(|e| (e.at, e.node));
        Self { events }
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn active(&self, node: NodeId, tick: Tick) -> Option<FaultKind> {
        let ev = self
            .events
            .iter()
            .rfind(|e| e.node == node && e.at <= tick)?;
        if ev.kind == FaultKind::Recover || ev.until.is_some_and(|u| tick >= u) {
            return None;
        }
        Some(ev.kind)
    }

    /// Nodes that are Byzantine at any point of the run.
    pub fn byzantine(&self) -> BTreeSet<NodeId> {
        self.events
            .iter()
            .filter(|e| e.kind.is_byzantine())
            .map(|e| e.node)
            .collect()
    }

    pub fn is_honest(&self, node: NodeId) -> bool {
        !self.byzantine().contains(&node)
    }

    /// Ticks at which some node's fault status changes.
    pub fn change_points(&self) -> BTreeSet<Tick> {
        self.events
            .iter()
            .flat_map(|e| std::iter::once(e.at).chain(e.until))
            .collect()
    }

    pub fn validate(&self, n: usize, f: usize, override_unsafe: bool) -> Vec<String> {
        let mut errs = Vec::new();
        for e in &self.events {
            if e.node.index() >= n {
                errs.push(format!(
                    "faults.plan: node {} out of range for n={n}",
                    e.node.0
                ));
            }
        }
        let byz = self.byzantine().len();
        if byz > f && !override_unsafe {
            errs.push(format!("faults.plan: {byz} Byzantine nodes exceed f={f}"));
        }
        errs
    }
}

/// Fraud attacker tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FraudParams {
    pub latency_factor: f64,
    pub period: Tick,
    /// Fraction of each period the attack is on.
    pub duty: f64,
    /// Hold-back applied to outbound traffic during a delay burst.
    pub delay_burst: Tick,
}

impl Default for FraudParams {
    fn default() -> Self {
        Self {
            latency_factor: 5.0,
            period: 1000,
            duty: 0.5,
            delay_burst: 100,
        }
    }
}

impl FraudParams {
    pub fn burst_on(&self, tick: Tick) -> bool {
        let on = (self.period as f64 * self.duty) as Tick;
        tick % self.period.max(1) < on
    }
}

/// Splits peers of `me` into two disjoint halves; `true` for the second.
pub fn second_half(me: NodeId, peer: NodeId, n: usize) -> bool {
    let rank = if peer.0 > me.0 { peer.0 - 1 } else { peer.0 };
    rank as usize >= (n - 1).div_ceil(2)
}

fn tweak(cmd: &Command) -> Command {
    let mut c = cmd.clone();
    c.payload.push(0xEE);
    c
}

/// Byzantine Raft node. As leader it ships different entries to each peer
/// half; as candidate it claims a stale log, with a different claim per
/// half; as voter it grants every request.
pub fn equivocate_raft(
    out: Vec<(Dest, RaftMsg)>,
    key: &SigningKey,
    epoch: u64,
    me: NodeId,
    n: usize,
) -> Vec<(NodeId, RaftMsg)> {
    expand(out, me, n)
        .into_iter()
        .map(|(to, m)| {
            let b = second_half(me, to, n);
            let m = match m {
                RaftMsg::AppendEntries(mut ae) if b && !ae.entries.is_empty() => {
                    for (i, e) in ae.entries.iter_mut().enumerate() {
                        e.cmd = tweak(&e.cmd);
                        ae.entry_headers[i] =
                            sign_entry(key, epoch, ae.prev_log_index + 1 + i as u64, e);
                    }
                    RaftMsg::AppendEntries(ae)
                }
                RaftMsg::VoteRequest(mut vr) => {
                    vr.last_log_term = 0;
                    vr.last_log_index = u64::from(b);
                    vr.header = SignedHeader::sign(
                        key,
                        HeaderKind::RaftCandidacy,
                        epoch,
                        vr.term,
                        0,
                        candidacy_digest(vr.last_log_index, vr.last_log_term),
                    );
                    RaftMsg::VoteRequest(vr)
                }
                RaftMsg::VoteReply(mut r) => {
                    r.granted = true;
                    r.header = Some(SignedHeader::sign(
                        key,
                        HeaderKind::RaftVote,
                        epoch,
                        r.term,
                        0,
                        vote_digest(to),
                    ));
                    RaftMsg::VoteReply(r)
                }
                other => other,
            };
            (to, m)
        })
        .collect()
}

/// Byzantine HotStuff node. As leader it proposes a different block to each
/// peer half; as voter it also votes for a fabricated block.
pub fn equivocate_hotstuff(
    out: Vec<(Dest, HsMsg)>,
    key: &SigningKey,
    epoch: u64,
    me: NodeId,
    n: usize,
) -> Vec<(NodeId, HsMsg)> {
    let mut v = Vec::new();
    for (to, m) in expand(out, me, n) {
        match m {
            HsMsg::Proposal {
                view,
                mut block,
                justify,
                header,
            } if second_half(me, to, n) => {
                block.cmd = tweak(&block.cmd);
                let header2 = sign_proposal(key, epoch, view, block.hash());
                debug_assert_ne!(header.digest, header2.digest);
                v.push((
                    to,
                    HsMsg::Proposal {
                        view,
                        block,
                        justify,
                        header: header2,
                    },
                ));
            }
            HsMsg::Vote(h) => {
                let phase = match h.key.slot {
                    1 => Phase::PreCommit,
                    2 => Phase::Commit,
                    _ => Phase::Prepare,
                };
                let fake = sign_vote(
                    key,
                    epoch,
                    h.key.round,
                    phase,
                    Digest(h.digest.0 ^ 0x5A5A_5A5A),
                );
                v.push((to, HsMsg::Vote(h)));
                v.push((to, HsMsg::Vote(fake)));
            }
            other => v.push((to, other)),
        }
    }
    v
}

pub fn silence_raft(out: Vec<(Dest, RaftMsg)>) -> Vec<(Dest, RaftMsg)> {
    out.into_iter()
        .filter(|(_, m)| !matches!(m, RaftMsg::VoteReply(_)))
        .collect()
}

pub fn silence_hotstuff(out: Vec<(Dest, HsMsg)>) -> Vec<(Dest, HsMsg)> {
    out.into_iter()
        .filter(|(_, m)| !matches!(m, HsMsg::Vote(_)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{EquivocationProof, KeyRing};
    use crate::hotstuff::{Block, QuorumCertificate};

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "100:2:crash",
            "5:0:crash:900",
            "2000:3:equivocate",
            "0:1:fraud_report",
        ] {
            let e: FaultEvent = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
        }
        assert!("1:2".parse::<FaultEvent>().is_err());
        assert!("10:2:crash:5".parse::<FaultEvent>().is_err());
        assert!("10:2:melt".parse::<FaultEvent>().is_err());
    }

    #[test]
    fn latest_event_wins_and_until_expires() {
        let plan = FaultPlan::new(vec![
            "100:1:crash:300".parse().unwrap(),
            "500:1:silent".parse().unwrap(),
            "700:1:recover".parse().unwrap(),
        ]);
        let at = |t| plan.active(NodeId(1), t);
        assert_eq!(at(99), None);
        assert_eq!(at(100), Some(FaultKind::Crash));
        assert_eq!(at(300), None);
        assert_eq!(at(600), Some(FaultKind::Silent));
        assert_eq!(at(700), None);
        assert_eq!(plan.active(NodeId(0), 600), None);
    }

    #[test]
    fn byzantine_budget_checked() {
        let plan = FaultPlan::new(vec![
            "1:1:silent".parse().unwrap(),
            "1:2:equivocate".parse().unwrap(),
        ]);
        assert_eq!(plan.validate(4, 1, false).len(), 1);
        assert!(plan.validate(4, 1, true).is_empty());
        assert!(!plan.validate(2, 2, false).is_empty());
    }

    #[test]
    fn halves_are_disjoint_and_cover_peers() {
        for n in 2..12usize {
            for me in 0..n as u32 {
                let peers: Vec<_> = (0..n as u32).filter(|&p| p != me).collect();
                let b = peers
                    .iter()
                    .filter(|&&p| second_half(NodeId(me), NodeId(p), n))
                    .count();
                assert_eq!(b, (n - 1) / 2, "n={n} me={me}");
            }
        }
    }

    #[test]
    fn equivocating_leader_yields_proof() {
        let ring = KeyRing::new(3, 4);
        let key = ring.signing_key(NodeId(1));
        let block = Block {
            epoch: 0,
            height: 1,
            parent: Digest(1),
            cmd: Command::noop(1),
            proposer: NodeId(1),
            view: 1,
        };
        let header = sign_proposal(&key, 0, 1, block.hash());
        let msg = HsMsg::Proposal {
            view: 1,
            block,
            justify: QuorumCertificate::genesis(Digest(1)),
            header,
        };
        let out = equivocate_hotstuff(vec![(Dest::All, msg)], &key, 0, NodeId(1), 4);
        assert_eq!(out.len(), 3);
        let hs: Vec<_> = out.iter().flat_map(|(_, m)| m.headers()).collect();
        let distinct: BTreeSet<_> = hs.iter().map(|h| h.digest).collect();
        assert_eq!(distinct.len(), 2);
        let proof = EquivocationProof {
            first: hs[0],
            second: *hs.iter().find(|h| h.digest != hs[0].digest).unwrap(),
        };
        assert!(proof.verify(&ring));
    }

    #[test]
    fn fraud_burst_duty_cycle() {
        let p = FraudParams::default();
        let on = (0..10_000).filter(|&t| p.burst_on(t)).count();
        assert_eq!(on, 5000);
        assert!(p.burst_on(0) && !p.burst_on(500) && p.burst_on(1000));
    }
}
