//! HotStuff BFT replica.
//!
//! Basic mode runs prepare, pre-commit and commit phases per view, each a
//! leader broadcast answered by unicast votes, followed by a decide
//! broadcast. Chained mode pipelines them: every view carries one generic
//! proposal whose justify QC certifies the previous view's block, and a
//! block commits once it heads three consecutive-view QCs.
//!
//! Leaders rotate: view `v` is led by `(v + shift) mod N`. Votes are
//! [`SignedHeader`]s, and a QC is a set of at least `N - f` distinct,
//! verifying votes over `(phase, block, view)`.

use crate::auth::{HeaderKind, KeyRing, SignedHeader, SigningKey};
use crate::digest::{Digest, Encoder};
use crate::engine::{Dest, ProposalSource, Step};
use crate::ledger::{Command, LedgerEntry, NodeId, Protocol};
use crate::sim::Tick;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Basic,
    Chained,
}

impl Mode {
    pub fn protocol(self) -> Protocol {
        match self {
            Mode::Basic => Protocol::HotstuffBasic,
            Mode::Chained => Protocol::HotstuffChained,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacemakerConfig {
    pub view_timeout: Tick,
    /// Cap on the exponential back-off multiplier.
    pub max_backoff: u64,
}

impl Default for PacemakerConfig {
    fn default() -> Self {
        Self {
            view_timeout: 400,
            max_backoff: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prepare,
    PreCommit,
    Commit,
}

impl Phase {
    fn slot(self) -> u64 {
        match self {
            Phase::Prepare => 0,
            Phase::PreCommit => 1,
            Phase::Commit => 2,
        }
    }

    fn from_slot(slot: u64) -> Option<Self> {
        match slot {
            0 => Some(Phase::Prepare),
            1 => Some(Phase::PreCommit),
            2 => Some(Phase::Commit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub epoch: u64,
    pub height: u64,
    pub parent: Digest,
    pub cmd: Command,
    pub proposer: NodeId,
    pub view: u64,
}

impl Block {
    pub fn hash(&self) -> Digest {
        let mut enc = Encoder::tagged("hs.block");
        enc.u64(self.epoch)
            .u64(self.height)
            .digest(self.parent)
            .u32(self.proposer.0)
            .u64(self.view);
        self.cmd.encode(&mut enc);
        enc.finish()
    }

    /// Root block of an epoch, anchored at a checkpoint.
    pub fn genesis(epoch: u64, height: u64, checkpoint_hash: Digest) -> Self {
        Block {
            epoch,
            height,
            parent: checkpoint_hash,
            cmd: Command::noop(0),
            proposer: NodeId(u32::MAX),
            view: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub phase: Phase,
    pub block: Digest,
    pub view: u64,
    pub votes: Vec<SignedHeader>,
}

impl QuorumCertificate {
    pub fn genesis(block: Digest) -> Self {
        Self {
            phase: Phase::Prepare,
            block,
            view: 0,
            votes: Vec::new(),
        }
    }

    pub fn voters(&self) -> BTreeSet<NodeId> {
        self.votes.iter().map(|v| v.key.signer).collect()
    }

    /// At least `quorum` distinct signers, every vote verifying over this
    /// QC's `(epoch, view, phase, block)`. The view-0 QC is valid only for
    /// the epoch's genesis block.
    pub fn verify(&self, ring: &KeyRing, epoch: u64, quorum: usize, genesis: Digest) -> bool {
        if self.view == 0 {
            return self.block == genesis && self.votes.is_empty();
        }
        let mut seen = BTreeSet::new();
        for v in &self.votes {
            if v.key.kind != HeaderKind::HsVote
                || v.key.epoch != epoch
                || v.key.round != self.view
                || v.key.slot != self.phase.slot()
                || v.digest != self.block
                || !v.verify(ring)
                || !seen.insert(v.key.signer)
            {
                return false;
            }
        }
        seen.len() >= quorum
    }
}

pub fn sign_vote(
    key: &SigningKey,
    epoch: u64,
    view: u64,
    phase: Phase,
    block: Digest,
) -> SignedHeader {
    SignedHeader::sign(key, HeaderKind::HsVote, epoch, view, phase.slot(), block)
}

pub fn sign_proposal(key: &SigningKey, epoch: u64, view: u64, block: Digest) -> SignedHeader {
    SignedHeader::sign(key, HeaderKind::HsProposal, epoch, view, 0, block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    PreCommit,
    Commit,
    Decide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HsMsg {
    /// Sent to the leader of `view` on entering it.
    NewView {
        view: u64,
        high_qc: QuorumCertificate,
        committed_height: u64,
    },
    /// Basic-mode prepare or chained-mode generic proposal.
    Proposal {
        view: u64,
        block: Block,
        justify: QuorumCertificate,
        header: SignedHeader,
    },
    Vote(SignedHeader),
    /// Basic-mode pre-commit, commit and decide broadcasts.
    Phase {
        stage: Stage,
        view: u64,
        qc: QuorumCertificate,
        block: Block,
    },
    Fetch {
        block: Digest,
    },
    Blocks {
        blocks: Vec<Block>,
    },
}

impl HsMsg {
    pub fn view(&self) -> Option<u64> {
        match self {
            HsMsg::NewView { view, .. }
            | HsMsg::Proposal { view, .. }
            | HsMsg::Phase { view, .. } => Some(*view),
            HsMsg::Vote(h) => Some(h.key.round),
            HsMsg::Fetch { .. } | HsMsg::Blocks { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HsMsg::NewView { .. } => "hs.new_view",
            HsMsg::Proposal { .. } => "hs.proposal",
            HsMsg::Vote(h) => match h.key.slot {
                0 => "hs.vote.prepare",
                1 => "hs.vote.precommit",
                _ => "hs.vote.commit",
            },
            HsMsg::Phase {
                stage: Stage::PreCommit,
                ..
            } => "hs.precommit",
            HsMsg::Phase {
                stage: Stage::Commit,
                ..
            } => "hs.commit",
            HsMsg::Phase {
                stage: Stage::Decide,
                ..
            } => "hs.decide",
            HsMsg::Fetch { .. } => "hs.fetch",
            HsMsg::Blocks { .. } => "hs.blocks",
        }
    }

    pub fn headers(&self) -> Vec<SignedHeader> {
        match self {
            HsMsg::Proposal { header, .. } => vec![*header],
            HsMsg::Vote(h) => vec![*h],
            _ => Vec::new(),
        }
    }
}

/// `Fn(&Command) -> bool` deciding whether a proposed switch barrier may be
/// voted for.
pub type BarrierCheck<'a> = &'a dyn Fn(&Command) -> bool;

const MAX_DEFERRED: usize = 32;
const FETCH_DEPTH: usize = 128;
const OUTCOME_WINDOW: usize = 16;
/// Idle time, as a fraction of the view timeout, before the last protocol
/// messages are sent again.
const RESEND_DIVISOR: Tick = 4;
const MAX_RESENDS: u32 = 4;

#[derive(Debug, Clone)]
pub struct HotStuffNode {
    id: NodeId,
    n: usize,
    quorum: usize,
    epoch: u64,
    mode: Mode,
    cfg: PacemakerConfig,
    key: SigningKey,
    ring: KeyRing,
    leader_shift: u64,

    genesis: Digest,
    blocks: BTreeMap<Digest, Block>,
    /// Justify QC each known block was proposed with.
    justify_of: BTreeMap<Digest, QuorumCertificate>,

    pub cur_view: u64,
    pub high_qc: QuorumCertificate,
    pub locked_qc: QuorumCertificate,
    committed_height: u64,
    committed_block: Digest,
    /// Commands committed in this epoch; the mempool only learns of them
    /// after the current step returns.
    committed_cmds: BTreeSet<(u32, u64)>,

    voted: BTreeSet<(u64, Phase)>,
    proposed: BTreeSet<u64>,
    new_views: BTreeMap<u64, BTreeMap<NodeId, QuorumCertificate>>,
    votes: BTreeMap<(u64, Phase, Digest), BTreeMap<NodeId, SignedHeader>>,
    formed: BTreeSet<(u64, Phase)>,
    last_decide: Option<HsMsg>,
    decide_resent: BTreeSet<(u64, NodeId)>,
    deferred: VecDeque<(NodeId, HsMsg)>,
    fetching: BTreeSet<Digest>,

    view_deadline: Tick,
    consecutive_timeouts: u32,
    outcomes: VecDeque<bool>,
    views_entered: u64,
    /// Latest outbound protocol messages, repeated while nothing newer is
    /// sent; covers lost messages without waiting for a view change.
    resend: Vec<(Dest, HsMsg)>,
    resend_at: Tick,
    resends: u32,
    /// Set if a commit would have contradicted the committed chain.
    pub safety_fault: bool,
}

impl HotStuffNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: NodeId,
        n: usize,
        f: usize,
        epoch: u64,
        mode: Mode,
        checkpoint_height: u64,
        checkpoint_hash: Digest,
        cfg: PacemakerConfig,
        key: SigningKey,
        ring: KeyRing,
        now: Tick,
    ) -> Self {
        let genesis = Block::genesis(epoch, checkpoint_height, checkpoint_hash);
        let gh = genesis.hash();
        let gqc = QuorumCertificate::genesis(gh);
        // Epoch 0 follows plain `v mod N`; later epochs start at the
        // checkpoint-height leader.
        let leader_shift = if epoch == 0 {
            0
        } else {
            (checkpoint_height + n as u64 - 1) % n as u64
        };
        let mut blocks = BTreeMap::new();
        blocks.insert(gh, genesis);
        let mut justify_of = BTreeMap::new();
        justify_of.insert(gh, gqc.clone());
        Self {
            id,
            n,
            quorum: n - f,
            epoch,
            mode,
            cfg,
            key,
            ring,
            leader_shift,
            genesis: gh,
            blocks,
            justify_of,
            cur_view: 1,
            high_qc: gqc.clone(),
            locked_qc: gqc,
            committed_height: checkpoint_height,
            committed_block: gh,
            committed_cmds: BTreeSet::new(),
            voted: BTreeSet::new(),
            proposed: BTreeSet::new(),
            new_views: BTreeMap::new(),
            votes: BTreeMap::new(),
            formed: BTreeSet::new(),
            last_decide: None,
            decide_resent: BTreeSet::new(),
            deferred: VecDeque::new(),
            fetching: BTreeSet::new(),
            view_deadline: now + cfg.view_timeout,
            consecutive_timeouts: 0,
            outcomes: VecDeque::new(),
            views_entered: 1,
            resend: Vec::new(),
            resend_at: Tick::MAX,
            resends: 0,
            safety_fault: false,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn genesis_hash(&self) -> Digest {
        self.genesis
    }

    pub fn committed_height(&self) -> u64 {
        self.committed_height
    }

    pub fn block(&self, hash: &Digest) -> Option<&Block> {
        self.blocks.get(hash)
    }

    pub fn leader(&self, view: u64) -> NodeId {
        NodeId(((view + self.leader_shift) % self.n as u64) as u32)
    }

    pub fn next_deadline(&self) -> Tick {
        self.view_deadline.min(self.resend_at)
    }

    pub fn view_deadline(&self) -> Tick {
        self.view_deadline
    }

    /// Fraction of recent views that completed without a timeout.
    pub fn success_rate(&self) -> Option<f64> {
        if self.outcomes.len() < OUTCOME_WINDOW / 2 {
            return None;
        }
        let ok = self.outcomes.iter().filter(|&&o| o).count();
        Some(ok as f64 / self.outcomes.len() as f64)
    }

    pub fn views_entered(&self) -> u64 {
        self.views_entered
    }

    fn record_outcome(&mut self, ok: bool) {
        self.outcomes.push_back(ok);
        if self.outcomes.len() > OUTCOME_WINDOW {
            self.outcomes.pop_front();
        }
    }

    fn timeout_len(&self) -> Tick {
        let mult = (1u64 << self.consecutive_timeouts.min(16)).min(self.cfg.max_backoff);
        self.cfg.view_timeout * mult
    }

    fn enter_view(&mut self, view: u64, now: Tick) {
        if view > self.cur_view {
            self.cur_view = view;
            self.views_entered += 1;
        }
        self.view_deadline = now + self.timeout_len();
    }

    fn verify_qc(&self, qc: &QuorumCertificate) -> bool {
        qc.verify(&self.ring, self.epoch, self.quorum, self.genesis)
    }

    fn update_high_qc(&mut self, qc: &QuorumCertificate) {
        if qc.view > self.high_qc.view {
            self.high_qc = qc.clone();
        }
    }

    /// Walks parents from `hash` down to `ancestor`'s height.
    fn extends(&self, mut hash: Digest, ancestor: Digest) -> bool {
        let Some(target) = self.blocks.get(&ancestor) else {
            return false;
        };
        loop {
            if hash == ancestor {
                return true;
            }
            match self.blocks.get(&hash) {
                Some(b) if b.height > target.height => hash = b.parent,
                _ => return false,
            }
        }
    }

    /// Uncommitted chain from the committed block (exclusive) up to `hash`,
    /// oldest first. `Err(missing)` names the first unknown block.
    fn uncommitted_chain(&self, hash: Digest) -> Result<Vec<Block>, Option<Digest>> {
        let mut chain = Vec::new();
        let mut cur = hash;
        loop {
            if cur == self.committed_block {
                chain.reverse();
                return Ok(chain);
            }
            let Some(b) = self.blocks.get(&cur) else {
                return Err(Some(cur));
            };
            if b.height <= self.committed_height {
                // forked below the committed tip
                return Err(None);
            }
            chain.push(b.clone());
            cur = b.parent;
        }
    }

    fn request_block(&mut self, hash: Digest, from: NodeId, step: &mut Step<HsMsg>) {
        if from != self.id && self.fetching.insert(hash) {
            step.send(from, HsMsg::Fetch { block: hash });
        }
    }

    fn defer(&mut self, from: NodeId, msg: HsMsg) {
        if self.deferred.len() >= MAX_DEFERRED {
            self.deferred.pop_front();
        }
        self.deferred.push_back((from, msg));
    }

    fn store_block(&mut self, block: Block) -> Digest {
        let h = block.hash();
        self.fetching.remove(&h);
        self.blocks.entry(h).or_insert(block);
        h
    }

    /// Commits `hash` and its uncommitted ancestors in height order.
    fn commit_through(&mut self, hash: Digest, from: NodeId, step: &mut Step<HsMsg>) -> bool {
        if let Some(b) = self.blocks.get(&hash) {
            if b.height <= self.committed_height {
                return true;
            }
        }
        match self.uncommitted_chain(hash) {
            Ok(chain) => {
                for b in chain {
                    self.committed_height = b.height;
                    self.committed_block = b.hash();
                    self.committed_cmds.insert(b.cmd.id());
                    step.committed.push(LedgerEntry {
                        height: b.height,
                        cmd: b.cmd.clone(),
                        origin_protocol: self.mode.protocol(),
                        origin_round: b.view,
                    });
                }
                true
            }
            Err(Some(missing)) => {
                self.request_block(missing, from, step);
                false
            }
            Err(None) => {
                self.safety_fault = true;
                true
            }
        }
    }

    /// Starts the epoch: every replica reports to the view-1 leader.
    pub fn start(&mut self, now: Tick, src: ProposalSource<'_>) -> Step<HsMsg> {
        self.view_deadline = now + self.timeout_len();
        let nv = self.new_view_msg(1);
        let leader = self.leader(1);
        self.run(now, vec![(self.id, leader, nv)], src, None)
    }

    fn new_view_msg(&self, view: u64) -> HsMsg {
        HsMsg::NewView {
            view,
            high_qc: self.high_qc.clone(),
            committed_height: self.committed_height,
        }
    }

    pub fn on_tick(&mut self, now: Tick, src: ProposalSource<'_>) -> Step<HsMsg> {
        if now >= self.view_deadline {
            return self.pacemaker_timeout(now, src);
        }
        let mut step = Step::default();
        if now >= self.resend_at {
            self.resends += 1;
            self.resend_at = if self.resends >= MAX_RESENDS {
                Tick::MAX
            } else {
                now + self.resend_interval()
            };
            step.out = self.resend.clone();
        }
        step
    }

    fn resend_interval(&self) -> Tick {
        (self.cfg.view_timeout / RESEND_DIVISOR).max(1)
    }

    /// View expired without progress: move to the next view and report to
    /// its leader.
    pub fn pacemaker_timeout(&mut self, now: Tick, src: ProposalSource<'_>) -> Step<HsMsg> {
        self.record_outcome(false);
        self.consecutive_timeouts += 1;
        let next = self.cur_view + 1;
        self.enter_view(next, now);
        let leader = self.leader(next);
        let nv = self.new_view_msg(next);
        self.run(now, vec![(self.id, leader, nv)], src, None)
    }

    pub fn on_message(
        &mut self,
        now: Tick,
        from: NodeId,
        msg: HsMsg,
        src: ProposalSource<'_>,
        barrier_ok: Option<BarrierCheck<'_>>,
    ) -> Step<HsMsg> {
        self.run(now, vec![(from, self.id, msg)], src, barrier_ok)
    }

    /// Processes a worklist; messages addressed to this node are handled
    /// locally instead of being sent.
    fn run(
        &mut self,
        now: Tick,
        initial: Vec<(NodeId, NodeId, HsMsg)>,
        src: ProposalSource<'_>,
        barrier_ok: Option<BarrierCheck<'_>>,
    ) -> Step<HsMsg> {
        let mut step = Step::default();
        let mut work: VecDeque<(NodeId, HsMsg)> = VecDeque::new();
        for (from, to, msg) in initial {
            if to == self.id {
                work.push_back((from, msg));
            } else {
                step.send(to, msg);
            }
        }
        let mut budget = 10_000;
        while let Some((from, msg)) = work.pop_front() {
            budget -= 1;
            assert!(budget > 0, "hotstuff: local work loop did not converge");
            let mut local = Step::default();
            let retry = self.handle(now, from, msg, src, barrier_ok, &mut local);
            for (dest, m) in local.out {
                match dest {
                    crate::engine::Dest::To(to) if to == self.id => work.push_back((self.id, m)),
                    crate::engine::Dest::To(to) => step.send(to, m),
                    crate::engine::Dest::All => {
                        work.push_back((self.id, m.clone()));
                        step.broadcast(m);
                    }
                }
            }
            step.committed.extend(local.committed);
            if retry {
                let pending: Vec<_> = self.deferred.drain(..).collect();
                work.extend(pending);
            }
        }
        let fresh: Vec<(Dest, HsMsg)> = step
            .out
            .iter()
            .filter(|(_, m)| !matches!(m, HsMsg::Fetch { .. } | HsMsg::Blocks { .. }))
            .cloned()
            .collect();
        if !fresh.is_empty() {
            self.resend = fresh;
            self.resends = 0;
            self.resend_at = now + self.resend_interval();
        }
        step
    }

    /// Returns true when new blocks arrived and deferred messages should be
    /// retried.
    fn handle(
        &mut self,
        now: Tick,
        from: NodeId,
        msg: HsMsg,
        src: ProposalSource<'_>,
        barrier_ok: Option<BarrierCheck<'_>>,
        step: &mut Step<HsMsg>,
    ) -> bool {
        match msg {
            HsMsg::NewView {
                view,
                high_qc,
                committed_height,
            } => {
                self.on_new_view(now, from, view, high_qc, committed_height, src, step);
                false
            }
            HsMsg::Proposal { .. } => {
                self.handle_proposal(now, from, msg, barrier_ok, step);
                false
            }
            HsMsg::Vote(v) => {
                self.handle_vote(now, from, v, src, step);
                false
            }
            HsMsg::Phase { .. } => {
                self.handle_phase_msg(now, from, msg, step);
                false
            }
            HsMsg::Fetch { block } => {
                let mut blocks = Vec::new();
                let mut cur = block;
                while let Some(b) = self.blocks.get(&cur) {
                    if b.view == 0 || blocks.len() >= FETCH_DEPTH {
                        break;
                    }
                    blocks.push(b.clone());
                    cur = b.parent;
                }
                if !blocks.is_empty() {
                    step.send(from, HsMsg::Blocks { blocks });
                }
                false
            }
            HsMsg::Blocks { blocks } => {
                let mut any = false;
                for b in blocks {
                    if b.epoch == self.epoch && b.view > 0 {
                        self.store_block(b);
                        any = true;
                    }
                }
                any
            }
        }
    }

    /// Leader side: collect `N - f` new-view messages for `view`, then
    /// propose on the branch of the highest QC among them.
    #[allow(clippy::too_many_arguments)]
    pub fn on_new_view(
        &mut self,
        now: Tick,
        from: NodeId,
        view: u64,
        high_qc: QuorumCertificate,
        committed_height: u64,
        src: ProposalSource<'_>,
        step: &mut Step<HsMsg>,
    ) {
        if self.leader(view) != self.id || view < self.cur_view || !self.verify_qc(&high_qc) {
            return;
        }
        if from != self.id
            && committed_height < self.committed_height
            && self.decide_resent.insert((view, from))
        {
            if let Some(d) = &self.last_decide {
                step.send(from, d.clone());
            }
        }
        self.new_views
            .entry(view)
            .or_default()
            .insert(from, high_qc);
        self.try_propose(now, view, src, step);
    }

    fn try_propose(
        &mut self,
        now: Tick,
        view: u64,
        src: ProposalSource<'_>,
        step: &mut Step<HsMsg>,
    ) {
        if self.proposed.contains(&view) || view < self.cur_view || self.leader(view) != self.id {
            return;
        }
        let from_new_views = self
            .new_views
            .get(&view)
            .filter(|m| m.len() >= self.quorum)
            .and_then(|m| {
                m.iter()
                    .max_by_key(|(_, qc)| qc.view)
                    .map(|(n, qc)| (*n, qc.clone()))
            });
        let chained_ready = self.mode == Mode::Chained
            && view > 1
            && self.high_qc.view + 1 == view
            && self.formed.contains(&(view - 1, Phase::Prepare));
        let (origin, justify) = match from_new_views {
            Some((origin, qc)) => {
                let best = if self.high_qc.view > qc.view {
                    self.high_qc.clone()
                } else {
                    qc
                };
                (origin, best)
            }
            None if chained_ready => (self.id, self.high_qc.clone()),
            None => return,
        };
        let Some(parent) = self.blocks.get(&justify.block).cloned() else {
            self.request_block(justify.block, origin, step);
            return;
        };
        self.update_high_qc(&justify);
        if view > self.cur_view {
            self.enter_view(view, now);
        }
        let cmd = self.choose_command(view, justify.block, src);
        let block = Block {
            epoch: self.epoch,
            height: parent.height + 1,
            parent: justify.block,
            cmd,
            proposer: self.id,
            view,
        };
        let header = sign_proposal(&self.key, self.epoch, view, block.hash());
        self.proposed.insert(view);
        self.new_views.retain(|v, _| *v > view);
        step.broadcast(HsMsg::Proposal {
            view,
            block,
            justify,
            header,
        });
    }

    fn choose_command(&self, view: u64, parent: Digest, src: ProposalSource<'_>) -> Command {
        let noop = Command::noop((self.epoch << 40) | view);
        // without the full branch we cannot tell which commands it already holds
        let Ok(chain) = self.uncommitted_chain(parent) else {
            return noop;
        };
        if chain.iter().any(|b| b.cmd.is_switch_barrier()) {
            return noop;
        }
        if let Some(b) = src.barrier {
            return b.clone();
        }
        let in_chain: BTreeSet<_> = chain.iter().map(|b| b.cmd.id()).collect();
        src.mempool
            .select(1, |c| {
                in_chain.contains(&c.id()) || self.committed_cmds.contains(&c.id())
            })
            .into_iter()
            .next()
            .unwrap_or(noop)
    }

    fn handle_proposal(
        &mut self,
        now: Tick,
        from: NodeId,
        msg: HsMsg,
        barrier_ok: Option<BarrierCheck<'_>>,
        step: &mut Step<HsMsg>,
    ) {
        let HsMsg::Proposal {
            view,
            ref block,
            ref justify,
            header,
        } = msg
        else {
            return;
        };
        let bh = block.hash();
        let leader = self.leader(view);
        if view < self.cur_view
            || block.epoch != self.epoch
            || block.view != view
            || block.proposer != leader
            || header.key.signer != leader
            || header.key.kind != HeaderKind::HsProposal
            || header.key.round != view
            || header.key.epoch != self.epoch
            || header.digest != bh
            || !header.verify(&self.ring)
            || block.parent != justify.block
            || !self.verify_qc(justify)
        {
            return;
        }
        let Some(parent) = self.blocks.get(&justify.block) else {
            self.request_block(justify.block, from, step);
            self.defer(from, msg);
            return;
        };
        if block.height != parent.height + 1 {
            return;
        }
        let block = block.clone();
        let justify = justify.clone();
        self.store_block(block.clone());
        self.justify_of.insert(bh, justify.clone());
        self.update_high_qc(&justify);
        if self.mode == Mode::Chained {
            self.chained_update(bh, from, step);
        }

        let safe = self.extends(bh, self.locked_qc.block) || justify.view > self.locked_qc.view;
        let endorsed = !block.cmd.is_switch_barrier() || barrier_ok.is_none_or(|f| f(&block.cmd));
        let fresh = !self.voted.contains(&(view, Phase::Prepare));
        if view > self.cur_view {
            self.enter_view(view, now);
        }
        if safe && endorsed && fresh {
            self.voted.insert((view, Phase::Prepare));
            let vote = sign_vote(&self.key, self.epoch, view, Phase::Prepare, bh);
            let to = match self.mode {
                Mode::Basic => leader,
                Mode::Chained => self.leader(view + 1),
            };
            step.send(to, HsMsg::Vote(vote));
        }
        if self.mode == Mode::Chained {
            // Pipelined view change: the next view starts right after voting.
            self.record_outcome(true);
            self.consecutive_timeouts = 0;
            self.enter_view(view + 1, now);
        }
    }

    /// Chained commit logic for a newly received block `b_star`:
    /// `b'' = justify(b*)`, `b' = justify(b'')`, `b = justify(b')`.
    fn chained_update(&mut self, b_star: Digest, from: NodeId, step: &mut Step<HsMsg>) {
        let Some(qc2) = self.justify_of.get(&b_star).cloned() else {
            return;
        };
        let Some(b2) = self.blocks.get(&qc2.block).cloned() else {
            return;
        };
        let Some(qc1) = self.justify_of.get(&qc2.block).cloned() else {
            return;
        };
        if qc1.view > self.locked_qc.view {
            self.locked_qc = qc1.clone();
        }
        let Some(b1) = self.blocks.get(&qc1.block).cloned() else {
            return;
        };
        let Some(qc0) = self.justify_of.get(&qc1.block).cloned() else {
            return;
        };
        let Some(b0) = self.blocks.get(&qc0.block).cloned() else {
            return;
        };
        let direct = b2.parent == qc1.block && b1.parent == qc0.block;
        let consecutive = b0.view > 0 && b2.view == b1.view + 1 && b1.view == b0.view + 1;
        if direct && consecutive {
            self.commit_through(qc0.block, from, step);
        }
    }

    /// Leader side: tally votes; at `N - f` distinct voters form a QC and
    /// broadcast the next-phase message (or, chained, the next proposal).
    pub fn handle_vote(
        &mut self,
        now: Tick,
        _from: NodeId,
        vote: SignedHeader,
        src: ProposalSource<'_>,
        step: &mut Step<HsMsg>,
    ) {
        let Some(phase) = Phase::from_slot(vote.key.slot) else {
            return;
        };
        let view = vote.key.round;
        let collector = match self.mode {
            Mode::Basic => self.leader(view),
            Mode::Chained => self.leader(view + 1),
        };
        if collector != self.id
            || vote.key.kind != HeaderKind::HsVote
            || vote.key.epoch != self.epoch
            || !vote.verify(&self.ring)
            || self.formed.contains(&(view, phase))
        {
            return;
        }
        let tally = self.votes.entry((view, phase, vote.digest)).or_default();
        tally.entry(vote.key.signer).or_insert(vote);
        if tally.len() < self.quorum {
            return;
        }
        let qc = QuorumCertificate {
            phase,
            block: vote.digest,
            view,
            votes: tally.values().copied().collect(),
        };
        self.formed.insert((view, phase));
        self.votes.retain(|(v, _, _), _| {
            *v > view || (*v == view && !self.formed.contains(&(*v, phase)))
        });
        match self.mode {
            Mode::Basic => {
                if view < self.cur_view {
                    return;
                }
                let Some(block) = self.blocks.get(&qc.block).cloned() else {
                    return;
                };
                let stage = match phase {
                    Phase::Prepare => Stage::PreCommit,
                    Phase::PreCommit => Stage::Commit,
                    Phase::Commit => Stage::Decide,
                };
                step.broadcast(HsMsg::Phase {
                    stage,
                    view,
                    qc,
                    block,
                });
            }
            Mode::Chained => {
                self.update_high_qc(&qc);
                self.try_propose(now, view + 1, src, step);
            }
        }
    }

    /// Replica side of the basic-mode pre-commit, commit and decide steps.
    pub fn handle_phase_msg(
        &mut self,
        now: Tick,
        from: NodeId,
        msg: HsMsg,
        step: &mut Step<HsMsg>,
    ) {
        let HsMsg::Phase {
            stage,
            view,
            ref qc,
            ref block,
        } = msg
        else {
            return;
        };
        if self.mode != Mode::Basic || from != self.leader(view) && stage != Stage::Decide {
            return;
        }
        let expected = match stage {
            Stage::PreCommit => Phase::Prepare,
            Stage::Commit => Phase::PreCommit,
            Stage::Decide => Phase::Commit,
        };
        if qc.phase != expected
            || qc.view != view
            || block.epoch != self.epoch
            || block.hash() != qc.block
            || !self.verify_qc(qc)
        {
            return;
        }
        let qc = qc.clone();
        let bh = self.store_block(block.clone());
        match stage {
            Stage::PreCommit | Stage::Commit => {
                if view < self.cur_view {
                    return;
                }
                if view > self.cur_view {
                    self.enter_view(view, now);
                }
                if stage == Stage::PreCommit {
                    self.update_high_qc(&qc);
                } else if qc.view > self.locked_qc.view {
                    self.locked_qc = qc.clone();
                }
                let phase = if stage == Stage::PreCommit {
                    Phase::PreCommit
                } else {
                    Phase::Commit
                };
                if self.voted.insert((view, phase)) {
                    let vote = sign_vote(&self.key, self.epoch, view, phase, bh);
                    step.send(self.leader(view), HsMsg::Vote(vote));
                }
            }
            Stage::Decide => {
                if !self.commit_through(bh, from, step) {
                    self.defer(from, msg);
                    return;
                }
                if self
                    .last_decide
                    .as_ref()
                    .and_then(|d| d.view())
                    .is_none_or(|v| v < view)
                {
                    self.last_decide = Some(msg.clone());
                }
                if view >= self.cur_view {
                    self.record_outcome(true);
                    self.consecutive_timeouts = 0;
                    self.enter_view(view + 1, now);
                    let next = view + 1;
                    let nv = self.new_view_msg(next);
                    step.send(self.leader(next), nv);
                }
            }
        }
    }

    /// Chained-mode entry point for a single input; equivalent to
    /// [`HotStuffNode::on_message`] with the pipelined rules active.
    pub fn chained_step(
        &mut self,
        now: Tick,
        from: NodeId,
        msg: HsMsg,
        src: ProposalSource<'_>,
    ) -> Step<HsMsg> {
        debug_assert_eq!(self.mode, Mode::Chained);
        self.on_message(now, from, msg, src, None)
    }

    /// Highest QC whose block chain back to the committed tip is fully
    /// known, with that chain.
    pub fn certified_chain(&self) -> (QuorumCertificate, Vec<Block>) {
        match self.uncommitted_chain(self.high_qc.block) {
            Ok(chain) => (self.high_qc.clone(), chain),
            Err(_) => (QuorumCertificate::genesis(self.genesis), Vec::new()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Dest, Mempool};

    fn replica(id: u32, n: usize, f: usize, mode: Mode) -> HotStuffNode {
        let ring = KeyRing::new(5, n as u32);
        HotStuffNode::new(
            NodeId(id),
            n,
            f,
            0,
            mode,
            0,
            crate::ledger::GENESIS_HASH,
            PacemakerConfig::default(),
            ring.signing_key(NodeId(id)),
            ring,
            0,
        )
    }

    fn vote(n: usize, voter: u32, view: u64, phase: Phase, block: Digest) -> SignedHeader {
        let ring = KeyRing::new(5, n as u32);
        sign_vote(&ring.signing_key(NodeId(voter)), 0, view, phase, block)
    }

    fn qc_from(
        n: usize,
        voters: &[u32],
        view: u64,
        phase: Phase,
        block: Digest,
    ) -> QuorumCertificate {
        QuorumCertificate {
            phase,
            block,
            view,
            votes: voters
                .iter()
                .map(|&v| vote(n, v, view, phase, block))
                .collect(),
        }
    }

    #[test]
    fn quorum_brute_force_n7_f2() {
        let ring = KeyRing::new(5, 7);
        let b = Digest(77);
        for mask in 0u32..(1 << 7) {
            let voters: Vec<u32> = (0..7).filter(|i| mask & (1 << i) != 0).collect();
            let qc = qc_from(7, &voters, 3, Phase::Prepare, b);
            assert_eq!(
                qc.verify(&ring, 0, 5, Digest(0)),
                voters.len() >= 5,
                "{voters:?}"
            );
        }
    }

    #[test]
    fn duplicate_voter_does_not_count() {
        let ring = KeyRing::new(5, 4);
        let b = Digest(9);
        let mut qc = qc_from(4, &[0, 1], 2, Phase::Prepare, b);
        qc.votes.push(qc.votes[0]);
        assert!(!qc.verify(&ring, 0, 3, Digest(0)));
    }

    #[test]
    fn leader_forms_qc_at_n_minus_f() {
        let mut leader = replica(2, 4, 1, Mode::Basic); // leader of view 2
        let pool = Mempool::new();
        let b = Block {
            epoch: 0,
            height: 1,
            parent: leader.genesis_hash(),
            cmd: Command::noop(1),
            proposer: NodeId(2),
            view: 2,
        };
        let bh = leader.store_block(b);
        leader.cur_view = 2;
        let mut step = Step::default();
        leader.handle_vote(
            0,
            NodeId(0),
            vote(4, 0, 2, Phase::Prepare, bh),
            ProposalSource::new(&pool),
            &mut step,
        );
        leader.handle_vote(
            0,
            NodeId(0),
            vote(4, 0, 2, Phase::Prepare, bh),
            ProposalSource::new(&pool),
            &mut step,
        );
        leader.handle_vote(
            0,
            NodeId(1),
            vote(4, 1, 2, Phase::Prepare, bh),
            ProposalSource::new(&pool),
            &mut step,
        );
        assert!(step.out.is_empty(), "two distinct voters are not a quorum");
        leader.handle_vote(
            0,
            NodeId(2),
            vote(4, 2, 2, Phase::Prepare, bh),
            ProposalSource::new(&pool),
            &mut step,
        );
        assert_eq!(step.out.len(), 1);
        assert!(matches!(
            step.out[0],
            (
                Dest::All,
                HsMsg::Phase {
                    stage: Stage::PreCommit,
                    ..
                }
            )
        ));
    }

    #[test]
    fn new_view_quorum_gates_proposal() {
        let mut leader = replica(1, 4, 1, Mode::Basic); // leader of view 1
        let pool = Mempool::new();
        let g = QuorumCertificate::genesis(leader.genesis_hash());
        let mut step = Step::default();
        leader.on_new_view(
            0,
            NodeId(0),
            1,
            g.clone(),
            0,
            ProposalSource::new(&pool),
            &mut step,
        );
        leader.on_new_view(
            0,
            NodeId(1),
            1,
            g.clone(),
            0,
            ProposalSource::new(&pool),
            &mut step,
        );
        assert!(step.out.is_empty());
        leader.on_new_view(0, NodeId(2), 1, g, 0, ProposalSource::new(&pool), &mut step);
        assert_eq!(step.envelope_count(4), 3);
        assert!(matches!(step.out[0].1, HsMsg::Proposal { view: 1, .. }));
    }

    /// Builds a certified chain of blocks at views 3, 5, 4 off genesis and
    /// checks the leader extends the highest-view QC.
    #[test]
    fn proposal_extends_highest_qc() {
        let n = 4;
        let mut leader = replica(2, n, 1, Mode::Basic); // leader of view 6
        let pool = Mempool::new();
        let mut qcs = Vec::new();
        for v in [3u64, 5, 4] {
            let b = Block {
                epoch: 0,
                height: 1,
                parent: leader.genesis_hash(),
                cmd: Command::noop(v),
                proposer: leader.leader(v),
                view: v,
            };
            let h = leader.store_block(b);
            qcs.push(qc_from(n, &[0, 1, 3], v, Phase::Prepare, h));
        }
        leader.cur_view = 6;
        let mut step = Step::default();
        for (i, qc) in qcs.iter().enumerate() {
            leader.on_new_view(
                0,
                NodeId(i as u32),
                6,
                qc.clone(),
                0,
                ProposalSource::new(&pool),
                &mut step,
            );
        }
        let HsMsg::Proposal { justify, block, .. } = &step.out[0].1 else {
            panic!()
        };
        assert_eq!(justify.view, 5);
        assert_eq!(block.parent, qcs[1].block);
    }

    #[test]
    fn lock_blocks_conflicting_low_view_proposal() {
        let n = 4;
        let mut r = replica(0, n, 1, Mode::Basic);
        let g = r.genesis_hash();
        let mk = |v: u64, seq: u64| Block {
            epoch: 0,
            height: 1,
            parent: g,
            cmd: Command::noop(seq),
            proposer: NodeId(((v) % 4) as u32),
            view: v,
        };
        let locked_block = mk(3, 1);
        let lh = r.store_block(locked_block);
        r.locked_qc = qc_from(n, &[1, 2, 3], 3, Phase::PreCommit, lh);
        r.cur_view = 5;
        // Conflicting block at view 5 justified only by the genesis QC.
        let b = mk(5, 2);
        let ring = KeyRing::new(5, 4);
        let header = sign_proposal(&ring.signing_key(NodeId(1)), 0, 5, b.hash());
        let msg = HsMsg::Proposal {
            view: 5,
            block: b,
            justify: QuorumCertificate::genesis(g),
            header,
        };
        let pool = Mempool::new();
        let step = r.on_message(0, NodeId(1), msg, ProposalSource::new(&pool), None);
        assert!(step.out.is_empty(), "locked replica must not vote");
    }

    #[test]
    fn decide_appends_block_command() {
        let n = 4;
        let mut r = replica(3, n, 1, Mode::Basic);
        let b = Block {
            epoch: 0,
            height: 1,
            parent: r.genesis_hash(),
            cmd: Command::new(7, 1, b"x".to_vec()),
            proposer: NodeId(1),
            view: 1,
        };
        let qc = qc_from(n, &[0, 1, 2], 1, Phase::Commit, b.hash());
        let pool = Mempool::new();
        let msg = HsMsg::Phase {
            stage: Stage::Decide,
            view: 1,
            qc,
            block: b,
        };
        let step = r.on_message(0, NodeId(1), msg, ProposalSource::new(&pool), None);
        assert_eq!(step.committed.len(), 1);
        assert_eq!(step.committed[0].height, 1);
        assert_eq!(step.committed[0].cmd.client, 7);
        assert_eq!(r.cur_view, 2);
        // new-view goes to the view-2 leader
        assert!(matches!(
            step.out[0],
            (Dest::To(NodeId(2)), HsMsg::NewView { view: 2, .. })
        ));
    }

    #[test]
    fn timeout_rotates_leader_and_backs_off() {
        let mut r = replica(0, 4, 1, Mode::Basic);
        r.cur_view = 2;
        let pool = Mempool::new();
        let step = r.pacemaker_timeout(400, ProposalSource::new(&pool));
        assert_eq!(r.cur_view, 3);
        assert!(matches!(
            step.out[0],
            (Dest::To(NodeId(3)), HsMsg::NewView { view: 3, .. })
        ));
        assert_eq!(r.view_deadline(), 400 + 800);
        for _ in 0..6 {
            let t = r.view_deadline();
            r.pacemaker_timeout(t, ProposalSource::new(&pool));
        }
        let t = r.view_deadline();
        r.pacemaker_timeout(t, ProposalSource::new(&pool));
        assert_eq!(r.view_deadline() - t, 400 * 8);
    }

    #[test]
    fn epoch_leader_follows_checkpoint_height() {
        let ring = KeyRing::new(5, 4);
        let r = HotStuffNode::new(
            NodeId(0),
            4,
            1,
            3,
            Mode::Basic,
            10,
            Digest(1),
            PacemakerConfig::default(),
            ring.signing_key(NodeId(0)),
            ring,
            0,
        );
        assert_eq!(r.leader(1), NodeId(2));
        assert_eq!(r.leader(2), NodeId(3));
    }

    /// Lossless FIFO network; each message carries the hop depth of the
    /// causal chain that produced it.
    fn run_network(
        n: usize,
        mode: Mode,
        max_msgs: usize,
    ) -> (Vec<HotStuffNode>, Vec<Vec<(u64, usize)>>) {
        let mut nodes: Vec<_> = (0..n as u32)
            .map(|i| replica(i, n, (n - 1) / 3, mode))
            .collect();
        let pool = Mempool::new();
        let mut queue: VecDeque<(usize, NodeId, NodeId, HsMsg)> = VecDeque::new();
        let mut commits: Vec<Vec<(u64, usize)>> = vec![Vec::new(); n];
        let push = |q: &mut VecDeque<_>, depth: usize, from: NodeId, step: Step<HsMsg>| {
            for (d, m) in step.out {
                match d {
                    Dest::To(to) => q.push_back((depth + 1, from, to, m)),
                    Dest::All => {
                        for to in 0..n as u32 {
                            if to != from.0 {
                                q.push_back((depth + 1, from, NodeId(to), m.clone()));
                            }
                        }
                    }
                }
            }
        };
        for (i, node) in nodes.iter_mut().enumerate() {
            let step = node.start(0, ProposalSource::new(&pool));
            for e in &step.committed {
                commits[i].push((e.height, 0));
            }
            push(&mut queue, 0, NodeId(i as u32), step);
        }
        let mut handled = 0;
        while let Some((depth, from, to, msg)) = queue.pop_front() {
            handled += 1;
            if handled > max_msgs {
                break;
            }
            let step = nodes[to.index()].on_message(1, from, msg, ProposalSource::new(&pool), None);
            for e in &step.committed {
                commits[to.index()].push((e.height, depth));
            }
            push(&mut queue, depth, to, step);
        }
        (nodes, commits)
    }

    #[test]
    fn basic_first_commit_after_eight_hops() {
        let (_, commits) = run_network(4, Mode::Basic, 200);
        // The view-1 leader handles its own decide without a network hop.
        for (i, c) in commits.iter().enumerate() {
            let hops = if i == 1 { 7 } else { 8 };
            assert_eq!(c.first(), Some(&(1, hops)), "node {i}");
        }
    }

    #[test]
    fn chained_commits_every_two_hops_once_pipelined() {
        let (nodes, commits) = run_network(4, Mode::Chained, 400);
        // The proposer of the view that completes the chain commits one hop
        // before everyone else.
        let mut earliest: BTreeMap<u64, usize> = BTreeMap::new();
        for c in &commits {
            for &(h, d) in c {
                let e = earliest.entry(h).or_insert(d);
                *e = (*e).min(d);
                assert!(d <= 8 + 2 * (h as usize - 1), "height {h} at hop {d}");
            }
        }
        assert!(earliest.len() >= 10);
        for (&h, &d) in &earliest {
            assert_eq!(d, 7 + 2 * (h as usize - 1), "height {h}");
        }
        assert!(nodes.iter().all(|r| !r.safety_fault));
    }

    #[test]
    fn replicas_agree_on_committed_blocks() {
        for mode in [Mode::Basic, Mode::Chained] {
            let (nodes, commits) = run_network(7, mode, 3000);
            let h = commits.iter().map(|c| c.len()).min().unwrap();
            assert!(h >= 3, "{mode:?} committed only {h}");
            let tips: BTreeSet<_> = nodes.iter().map(|r| r.committed_height()).collect();
            assert!(tips.len() <= 2);
        }
    }
}
