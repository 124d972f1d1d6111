//! Raft: randomized-timeout leader election and leader-driven log
//! replication with strict-majority commit.
//!
//! One [`RaftNode`] runs per cluster member and per switch epoch. Log index
//! `i` of an epoch maps to ledger height `base_height + i`. The node is a
//! pure step machine: every input returns a [`Step`] with outbound messages
//! and newly committed ledger entries.

use crate::auth::{HeaderKind, SignedHeader, SigningKey};
use crate::digest::{Digest, Encoder};
use crate::engine::{ProposalSource, Step};
use crate::ledger::{Command, LedgerEntry, NodeId, Protocol};
use crate::sim::Tick;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaftConfig {
    pub election_min: Tick,
    pub election_max: Tick,
    pub heartbeat_interval: Tick,
    /// Maximum entries carried by one AppendEntries.
    pub max_batch: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            election_min: 150,
            election_max: 300,
            heartbeat_interval: 50,
            max_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftLogEntry {
    pub term: u64,
    pub cmd: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub term: u64,
    pub candidate: NodeId,
    pub last_log_index: u64,
    pub last_log_term: u64,
    pub header: SignedHeader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteReply {
    pub term: u64,
    pub voter: NodeId,
    pub granted: bool,
    /// Signed only when the vote is granted.
    pub header: Option<SignedHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendEntries {
    pub term: u64,
    pub leader: NodeId,
    pub prev_log_index: u64,
    pub prev_log_term: u64,
    pub entries: Vec<RaftLogEntry>,
    /// One signed header per entry, binding `(entry term, index)` to the
    /// command digest.
    pub entry_headers: Vec<SignedHeader>,
    pub leader_commit: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendReply {
    pub term: u64,
    pub follower: NodeId,
    pub success: bool,
    /// On success the follower's match index; on failure a hint for the
    /// leader's next_index back-off.
    pub match_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RaftMsg {
    VoteRequest(VoteRequest),
    VoteReply(VoteReply),
    AppendEntries(AppendEntries),
    AppendReply(AppendReply),
}

impl RaftMsg {
    pub fn term(&self) -> u64 {
        match self {
            RaftMsg::VoteRequest(m) => m.term,
            RaftMsg::VoteReply(m) => m.term,
            RaftMsg::AppendEntries(m) => m.term,
            RaftMsg::AppendReply(m) => m.term,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RaftMsg::VoteRequest(_) => "raft.vote_request",
            RaftMsg::VoteReply(_) => "raft.vote_reply",
            RaftMsg::AppendEntries(_) => "raft.append_entries",
            RaftMsg::AppendReply(_) => "raft.append_reply",
        }
    }

    pub fn headers(&self) -> Vec<SignedHeader> {
        match self {
            RaftMsg::VoteRequest(m) => vec![m.header],
            RaftMsg::VoteReply(m) => m.header.into_iter().collect(),
            RaftMsg::AppendEntries(m) => m.entry_headers.clone(),
            RaftMsg::AppendReply(_) => Vec::new(),
        }
    }
}

pub fn candidacy_digest(last_log_index: u64, last_log_term: u64) -> Digest {
    let mut enc = Encoder::tagged("raft.cand");
    enc.u64(last_log_index).u64(last_log_term);
    enc.finish()
}

pub fn vote_digest(candidate: NodeId) -> Digest {
    let mut enc = Encoder::tagged("raft.vote");
    enc.u32(candidate.0);
    enc.finish()
}

pub fn sign_entry(key: &SigningKey, epoch: u64, index: u64, entry: &RaftLogEntry) -> SignedHeader {
    SignedHeader::sign(
        key,
        HeaderKind::RaftEntry,
        epoch,
        entry.term,
        index,
        entry.cmd.digest(),
    )
}

/// The up-to-date check used when granting votes: compare last terms, then
/// last indices.
pub fn log_up_to_date(
    cand_last_term: u64,
    cand_last_index: u64,
    my_last_term: u64,
    my_last_index: u64,
) -> bool {
    cand_last_term > my_last_term
        || (cand_last_term == my_last_term && cand_last_index >= my_last_index)
}

/// Strict majority of the full cluster, leader included.
pub fn majority(n: usize) -> usize {
    n / 2 + 1
}

#[derive(Debug, Clone)]
pub struct RaftNode {
    id: NodeId,
    n: usize,
    epoch: u64,
    base_height: u64,
    cfg: RaftConfig,
    key: SigningKey,
    rng: ChaCha8Rng,

    pub role: Role,
    pub current_term: u64,
    pub voted_for: Option<NodeId>,
    pub leader_id: Option<NodeId>,
    log: Vec<RaftLogEntry>,
    pub commit_index: u64,
    last_applied: u64,
    next_index: Vec<u64>,
    match_index: Vec<u64>,
    votes: BTreeSet<NodeId>,
    election_deadline: Tick,
    heartbeat_deadline: Tick,
    /// Set when a leader is elected; consumed by observers.
    became_leader: Option<u64>,
}

impl RaftNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: NodeId,
        n: usize,
        epoch: u64,
        base_height: u64,
        cfg: RaftConfig,
        key: SigningKey,
        seed: u64,
        now: Tick,
    ) -> Self {
        let mut enc = Encoder::tagged("raft.rng");
        enc.u64(seed).u32(id.0).u64(epoch);
        let mut node = Self {
            id,
            n,
            epoch,
            base_height,
            cfg,
            key,
            rng: ChaCha8Rng::seed_from_u64(enc.finish().0),
            role: Role::Follower,
            current_term: 0,
            voted_for: None,
            leader_id: None,
            log: Vec::new(),
            commit_index: 0,
            last_applied: 0,
            next_index: vec![1; n],
            match_index: vec![0; n],
            votes: BTreeSet::new(),
            election_deadline: 0,
            heartbeat_deadline: 0,
            became_leader: None,
        };
        node.reset_election_timer(now);
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn base_height(&self) -> u64 {
        self.base_height
    }

    pub fn log(&self) -> &[RaftLogEntry] {
        &self.log
    }

    pub fn last_log_index(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn last_log_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.log.get(index as usize - 1).map_or(0, |e| e.term)
        }
    }

    pub fn election_deadline(&self) -> Tick {
        self.election_deadline
    }

    pub fn take_became_leader(&mut self) -> Option<u64> {
        self.became_leader.take()
    }

    /// Next tick at which [`RaftNode::on_tick`] has work to do.
    pub fn next_deadline(&self) -> Tick {
        match self.role {
            Role::Leader => self.heartbeat_deadline,
            _ => self.election_deadline,
        }
    }

    fn reset_election_timer(&mut self, now: Tick) {
        let t = self
            .rng
            .gen_range(self.cfg.election_min..=self.cfg.election_max);
        self.election_deadline = now + t;
    }

    fn step_down(&mut self, term: u64, now: Tick) {
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
        }
        if self.role != Role::Follower {
            self.role = Role::Follower;
            self.reset_election_timer(now);
        }
        self.votes.clear();
    }

    /// Drives timeouts: election for followers/candidates, heartbeats for
    /// the leader.
    pub fn on_tick(&mut self, now: Tick, src: ProposalSource<'_>) -> Step<RaftMsg> {
        match self.role {
            Role::Leader if now >= self.heartbeat_deadline => self.leader_tick(now, src),
            Role::Follower | Role::Candidate if now >= self.election_deadline => {
                self.on_election_timeout(now)
            }
            _ => Step::default(),
        }
    }

    /// Starts a new term as candidate and asks every peer for a vote.
    pub fn on_election_timeout(&mut self, now: Tick) -> Step<RaftMsg> {
        let mut step = Step::default();
        if self.role == Role::Leader {
            return step;
        }
        self.current_term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_id = None;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election_timer(now);
        let (lli, llt) = (self.last_log_index(), self.last_log_term());
        let header = SignedHeader::sign(
            &self.key,
            HeaderKind::RaftCandidacy,
            self.epoch,
            self.current_term,
            0,
            candidacy_digest(lli, llt),
        );
        step.broadcast(RaftMsg::VoteRequest(VoteRequest {
            term: self.current_term,
            candidate: self.id,
            last_log_index: lli,
            last_log_term: llt,
            header,
        }));
        if self.votes.len() >= majority(self.n) {
            // single-node cluster
            self.become_leader(now, &mut step);
        }
        step
    }

    pub fn handle_vote_request(&mut self, now: Tick, req: &VoteRequest) -> VoteReply {
        if req.term > self.current_term {
            self.step_down(req.term, now);
        }
        let free = self.voted_for.is_none() || self.voted_for == Some(req.candidate);
        let grant = req.term == self.current_term
            && free
            && log_up_to_date(
                req.last_log_term,
                req.last_log_index,
                self.last_log_term(),
                self.last_log_index(),
            );
        let mut header = None;
        if grant {
            self.voted_for = Some(req.candidate);
            self.reset_election_timer(now);
            header = Some(SignedHeader::sign(
                &self.key,
                HeaderKind::RaftVote,
                self.epoch,
                req.term,
                0,
                vote_digest(req.candidate),
            ));
        }
        VoteReply {
            term: self.current_term,
            voter: self.id,
            granted: grant,
            header,
        }
    }

    fn handle_vote_reply(&mut self, now: Tick, rep: &VoteReply) -> Step<RaftMsg> {
        let mut step = Step::default();
        if rep.term > self.current_term {
            self.step_down(rep.term, now);
            return step;
        }
        if self.role != Role::Candidate || rep.term != self.current_term || !rep.granted {
            return step;
        }
        self.votes.insert(rep.voter);
        if self.votes.len() >= majority(self.n) {
            self.become_leader(now, &mut step);
        }
        step
    }

    fn become_leader(&mut self, now: Tick, step: &mut Step<RaftMsg>) {
        self.role = Role::Leader;
        self.leader_id = Some(self.id);
        self.became_leader = Some(self.current_term);
        let next = self.last_log_index() + 1;
        self.next_index = vec![next; self.n];
        self.match_index = vec![0; self.n];
        // A no-op from the new term lets earlier-term entries commit.
        self.log.push(RaftLogEntry {
            term: self.current_term,
            cmd: Command::noop((self.epoch << 40) | (self.current_term << 8) | self.id.0 as u64),
        });
        self.match_index[self.id.index()] = self.last_log_index();
        self.heartbeat_deadline = now;
        step.merge(self.replicate(now));
    }

    /// True if an uncommitted switch barrier sits in the log.
    pub fn has_pending_barrier(&self) -> bool {
        self.log[self.commit_index as usize..]
            .iter()
            .any(|e| e.cmd.is_switch_barrier())
    }

    fn append_proposals(&mut self, src: ProposalSource<'_>) {
        if self.has_pending_barrier() {
            return;
        }
        if let Some(barrier) = src.barrier {
            self.log.push(RaftLogEntry {
                term: self.current_term,
                cmd: barrier.clone(),
            });
            return;
        }
        let in_flight: BTreeSet<(u32, u64)> = self.log[self.commit_index as usize..]
            .iter()
            .map(|e| e.cmd.id())
            .collect();
        let fresh = src
            .mempool
            .select(self.cfg.max_batch, |c| in_flight.contains(&c.id()));
        for cmd in fresh {
            self.log.push(RaftLogEntry {
                term: self.current_term,
                cmd,
            });
        }
        self.match_index[self.id.index()] = self.last_log_index();
    }

    /// Heartbeat round: append pending commands and send AppendEntries to
    /// every follower (exactly N-1 sends).
    pub fn leader_tick(&mut self, now: Tick, src: ProposalSource<'_>) -> Step<RaftMsg> {
        if self.role != Role::Leader {
            return Step::default();
        }
        self.append_proposals(src);
        let mut step = self.replicate(now);
        // single-node clusters commit on their own
        step.committed.extend(self.advance_commit());
        step
    }

    fn replicate(&mut self, now: Tick) -> Step<RaftMsg> {
        let mut step = Step::default();
        self.heartbeat_deadline = now + self.cfg.heartbeat_interval;
        for p in 0..self.n {
            if p == self.id.index() {
                continue;
            }
            let next = self.next_index[p].clamp(1, self.last_log_index() + 1);
            let prev = next - 1;
            let end = (prev as usize + self.cfg.max_batch).min(self.log.len());
            let entries: Vec<RaftLogEntry> = self.log[prev as usize..end].to_vec();
            let entry_headers = entries
                .iter()
                .enumerate()
                .map(|(i, e)| sign_entry(&self.key, self.epoch, next + i as u64, e))
                .collect();
            step.send(
                NodeId(p as u32),
                RaftMsg::AppendEntries(AppendEntries {
                    term: self.current_term,
                    leader: self.id,
                    prev_log_index: prev,
                    prev_log_term: self.term_at(prev),
                    entries,
                    entry_headers,
                    leader_commit: self.commit_index,
                }),
            );
        }
        step
    }

    fn handle_append_entries(
        &mut self,
        now: Tick,
        ae: &AppendEntries,
    ) -> (AppendReply, Vec<LedgerEntry>) {
        let fail = |s: &Self, hint: u64| AppendReply {
            term: s.current_term,
            follower: s.id,
            success: false,
            match_index: hint,
        };
        if ae.term < self.current_term {
            return (fail(self, self.last_log_index()), Vec::new());
        }
        if ae.term > self.current_term || self.role != Role::Follower {
            self.step_down(ae.term, now);
        }
        self.leader_id = Some(ae.leader);
        self.reset_election_timer(now);

        if ae.prev_log_index > self.last_log_index() {
            return (fail(self, self.last_log_index()), Vec::new());
        }
        if self.term_at(ae.prev_log_index) != ae.prev_log_term {
            return (fail(self, ae.prev_log_index.saturating_sub(1)), Vec::new());
        }
        for (i, entry) in ae.entries.iter().enumerate() {
            let idx = ae.prev_log_index + 1 + i as u64;
            if idx <= self.last_log_index() {
                if self.term_at(idx) == entry.term {
                    continue;
                }
                // Conflicting suffix: never below what is already committed.
                assert!(idx > self.commit_index, "raft: truncating committed entry");
                self.log.truncate(idx as usize - 1);
            }
            self.log.push(entry.clone());
        }
        let last_new = ae.prev_log_index + ae.entries.len() as u64;
        if ae.leader_commit > self.commit_index {
            self.commit_index = ae.leader_commit.min(last_new).max(self.commit_index);
        }
        let reply = AppendReply {
            term: self.current_term,
            follower: self.id,
            success: true,
            match_index: last_new,
        };
        (reply, self.apply())
    }

    fn handle_append_reply(&mut self, rep: &AppendReply, now: Tick) -> Vec<LedgerEntry> {
        if rep.term > self.current_term {
            self.step_down(rep.term, now);
            return Vec::new();
        }
        if self.role != Role::Leader || rep.term != self.current_term {
            return Vec::new();
        }
        let p = rep.follower.index();
        if p >= self.n {
            return Vec::new();
        }
        if rep.success {
            let m = rep.match_index.min(self.last_log_index());
            if m > self.match_index[p] {
                self.match_index[p] = m;
            }
            self.next_index[p] = self.next_index[p].max(m + 1);
            self.advance_commit()
        } else {
            self.next_index[p] = (rep.match_index + 1)
                .min(self.next_index[p].saturating_sub(1))
                .max(1);
            Vec::new()
        }
    }

    /// Moves commit_index to the largest index of the current term stored on
    /// a strict majority of all N nodes, then applies.
    pub fn advance_commit(&mut self) -> Vec<LedgerEntry> {
        if self.role != Role::Leader {
            return Vec::new();
        }
        self.match_index[self.id.index()] = self.last_log_index();
        let mut sorted = self.match_index.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        // sorted[k-1] is replicated on at least k nodes
        let candidate = sorted[majority(self.n) - 1];
        if candidate > self.commit_index && self.term_at(candidate) == self.current_term {
            self.commit_index = candidate;
        }
        self.apply()
    }

    fn apply(&mut self) -> Vec<LedgerEntry> {
        let mut out = Vec::new();
        while self.last_applied < self.commit_index {
            self.last_applied += 1;
            let e = &self.log[self.last_applied as usize - 1];
            out.push(LedgerEntry {
                height: self.base_height + self.last_applied,
                cmd: e.cmd.clone(),
                origin_protocol: Protocol::Raft,
                origin_round: e.term,
            });
        }
        out
    }

    pub fn on_message(&mut self, now: Tick, from: NodeId, msg: &RaftMsg) -> Step<RaftMsg> {
        let mut step = Step::default();
        match msg {
            RaftMsg::VoteRequest(req) => {
                let rep = self.handle_vote_request(now, req);
                step.send(from, RaftMsg::VoteReply(rep));
            }
            RaftMsg::VoteReply(rep) => step = self.handle_vote_reply(now, rep),
            RaftMsg::AppendEntries(ae) => {
                let (rep, committed) = self.handle_append_entries(now, ae);
                step.send(from, RaftMsg::AppendReply(rep));
                step.committed = committed;
            }
            RaftMsg::AppendReply(rep) => step.committed = self.handle_append_reply(rep, now),
        }
        step
    }

    /// Test helper: seed a log directly.
    #[doc(hidden)]
    pub fn force_log(&mut self, log: Vec<RaftLogEntry>, term: u64) {
        self.log = log;
        self.current_term = term;
    }

    /// Test helper: promote to leader without an election.
    #[doc(hidden)]
    pub fn force_leader(&mut self, now: Tick) -> Step<RaftMsg> {
        let mut step = Step::default();
        self.votes.clear();
        self.become_leader(now, &mut step);
        step
    }

    #[doc(hidden)]
    pub fn match_index_mut(&mut self) -> &mut Vec<u64> {
        &mut self.match_index
    }
}
