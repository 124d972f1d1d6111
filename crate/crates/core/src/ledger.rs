//! Protocol-neutral replicated state: commands, the committed ledger with its
//! rolling hash chain, and checkpoints.

use crate::digest::{fnv1a, Digest, Encoder};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Index of a node in `[0, N)`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// The consensus protocol a cluster (or an entry) runs under.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Raft,
    HotstuffBasic,
    HotstuffChained,
}

impl Protocol {
    pub fn is_bft(self) -> bool {
        !matches!(self, Protocol::Raft)
    }

    pub fn tag(self) -> u8 {
        match self {
            Protocol::Raft => 0,
            Protocol::HotstuffBasic => 1,
            Protocol::HotstuffChained => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Protocol::Raft),
            1 => Some(Protocol::HotstuffBasic),
            2 => Some(Protocol::HotstuffChained),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Raft => "raft",
            Protocol::HotstuffBasic => "hotstuff-basic",
            Protocol::HotstuffChained => "hotstuff-chained",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raft" => Ok(Protocol::Raft),
            "hotstuff" | "hotstuff-basic" => Ok(Protocol::HotstuffBasic),
            "hotstuff-chained" | "chained" => Ok(Protocol::HotstuffChained),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

/// Reserved client id for leader-generated filler commands.
pub const NOOP_CLIENT: u32 = u32::MAX;
/// Reserved client id for protocol-switch barrier commands.
pub const SWITCH_CLIENT: u32 = u32::MAX - 1;

/// An opaque client command; `(client, seq)` identifies it.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Command {
    pub client: u32,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Command {
    pub fn new(client: u32, seq: u64, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            client,
            seq,
            payload: payload.into(),
        }
    }

    pub fn noop(seq: u64) -> Self {
        Self::new(NOOP_CLIENT, seq, Vec::new())
    }

    pub fn id(&self) -> (u32, u64) {
        (self.client, self.seq)
    }

    pub fn is_noop(&self) -> bool {
        self.client == NOOP_CLIENT
    }

    pub fn is_switch_barrier(&self) -> bool {
        self.client == SWITCH_CLIENT
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.client).u64(self.seq).bytes(&self.payload);
    }

    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::tagged("cmd");
        self.encode(&mut enc);
        enc.finish()
    }
}

/// One committed slot of the replicated ledger.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub height: u64,
    pub cmd: Command,
    pub origin_protocol: Protocol,
    /// Raft term or HotStuff view under which the entry was ordered.
    pub origin_round: u64,
}

impl LedgerEntry {
    /// Canonical layout: height u64, protocol u8, round u64, client u32,
    /// seq u64, payload (u32 length + bytes).
    pub fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .u8(self.origin_protocol.tag())
            .u64(self.origin_round);
        self.cmd.encode(enc);
    }
}

/// Hash of the empty ledger: FNV-1a of the ASCII string `dcast/genesis`.
pub const GENESIS_HASH: Digest = Digest(fnv1a(b"dcast/genesis"));

/// `hash(h) = FNV1a(hash(h-1) as u64 LE || encode(entry(h)))`.
pub fn chain_hash(prev: Digest, entry: &LedgerEntry) -> Digest {
    let mut enc = Encoder::new();
    enc.digest(prev);
    entry.encode(&mut enc);
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("expected height {expected}, got {got}")]
    HeightMismatch { expected: u64, got: u64 },
    #[error("height {height} beyond ledger length {len}")]
    BeyondEnd { height: u64, len: u64 },
}

/// Append-only committed ledger with a rolling hash per height.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct CommittedLedger {
    entries: Vec<LedgerEntry>,
    hashes: Vec<Digest>,
}

impl CommittedLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, height: u64) -> Option<&LedgerEntry> {
        if height == 0 {
            return None;
        }
        self.entries.get(height as usize - 1)
    }

    /// Entries with heights in `(after, ..]`.
    pub fn entries_after(&self, after: u64) -> &[LedgerEntry] {
        let start = (after as usize).min(self.entries.len());
        &self.entries[start..]
    }

    /// Rolling hash at `height`; height 0 is [`GENESIS_HASH`].
    pub fn hash_at(&self, height: u64) -> Option<Digest> {
        if height == 0 {
            Some(GENESIS_HASH)
        } else {
            self.hashes.get(height as usize - 1).copied()
        }
    }

    pub fn tip_hash(&self) -> Digest {
        self.hashes.last().copied().unwrap_or(GENESIS_HASH)
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<Digest, LedgerError> {
        let expected = self.len() + 1;
        if entry.height != expected {
            return Err(LedgerError::HeightMismatch {
                expected,
                got: entry.height,
            });
        }
        let hash = chain_hash(self.tip_hash(), &entry);
        self.entries.push(entry);
        self.hashes.push(hash);
        Ok(hash)
    }

    /// True if `self` is a prefix of `other` (or equal).
    pub fn is_prefix_of(&self, other: &CommittedLedger) -> bool {
        self.len() <= other.len() && other.hash_at(self.len()) == Some(self.tip_hash())
    }

    /// True if one of the two ledgers is a prefix of the other.
    pub fn prefix_consistent(&self, other: &CommittedLedger) -> bool {
        let h = self.len().min(other.len());
        self.hash_at(h) == other.hash_at(h)
    }

    /// Recomputes the whole chain from genesis and compares with the
    /// stored hashes.
    pub fn verify_chain(&self) -> bool {
        let mut prev = GENESIS_HASH;
        for (entry, stored) in self.entries.iter().zip(&self.hashes) {
            prev = chain_hash(prev, entry);
            if prev != *stored {
                return false;
            }
        }
        true
    }

    pub fn checkpoint(&self, height: u64, protocol: Protocol) -> Result<Checkpoint, LedgerError> {
        make_checkpoint(self, height, protocol)
    }

    /// Test hook: overwrite the payload of an entry without fixing the
    /// stored hashes, leaving the ledger tampered.
    #[doc(hidden)]
    pub fn tamper_payload(&mut self, height: u64, payload: Vec<u8>) {
        if let Some(e) = self.entries.get_mut(height as usize - 1) {
            e.cmd.payload = payload;
        }
    }

    /// Rebuilds the hash chain from the current entries.
    #[doc(hidden)]
    pub fn rehash(&mut self) {
        let mut prev = GENESIS_HASH;
        for (entry, slot) in self.entries.iter().zip(self.hashes.iter_mut()) {
            prev = chain_hash(prev, entry);
            *slot = prev;
        }
    }
}

/// `(height, ledger hash)` snapshot anchoring state across a protocol switch.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub height: u64,
    pub ledger_hash: Digest,
    pub protocol_at_checkpoint: Protocol,
}

impl Checkpoint {
    pub fn genesis(protocol: Protocol) -> Self {
        Self {
            height: 0,
            ledger_hash: GENESIS_HASH,
            protocol_at_checkpoint: protocol,
        }
    }
}

pub fn make_checkpoint(
    ledger: &CommittedLedger,
    height: u64,
    protocol: Protocol,
) -> Result<Checkpoint, LedgerError> {
    let ledger_hash = ledger.hash_at(height).ok_or(LedgerError::BeyondEnd {
        height,
        len: ledger.len(),
    })?;
    Ok(Checkpoint {
        height,
        ledger_hash,
        protocol_at_checkpoint: protocol,
    })
}

/// Recomputes the chain from the ledger's entries (not its cached hashes)
/// and compares against the checkpoint.
pub fn verify_checkpoint(cp: &Checkpoint, ledger: &CommittedLedger) -> bool {
    if cp.height > ledger.len() {
        return false;
    }
    let recomputed = ledger.entries()[..cp.height as usize]
        .iter()
        .fold(GENESIS_HASH, chain_hash);
    recomputed == cp.ledger_hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(h: u64, byte: u8) -> LedgerEntry {
        LedgerEntry {
            height: h,
            cmd: Command::new(1, h, vec![byte; 4]),
            origin_protocol: Protocol::Raft,
            origin_round: 1,
        }
    }

    fn ledger(n: u64) -> CommittedLedger {
        let mut l = CommittedLedger::new();
        for h in 1..=n {
            l.append(entry(h, h as u8)).unwrap();
        }
        l
    }

    #[test]
    fn append_to_empty() {
        let mut l = CommittedLedger::new();
        l.append(entry(1, 0)).unwrap();
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn append_rejects_gap_and_duplicate() {
        let mut l = ledger(3);
        assert_eq!(
            l.append(entry(5, 0)),
            Err(LedgerError::HeightMismatch {
                expected: 4,
                got: 5
            })
        );
        assert!(l.append(entry(3, 0)).is_err());
    }

    #[test]
    fn identical_appends_identical_hashes() {
        let a = ledger(6);
        let b = ledger(6);
        // independent recomputation of the chain
        let mut prev = GENESIS_HASH;
        for e in a.entries() {
            let mut enc = Encoder::new();
            enc.u64(prev.0);
            enc.u64(e.height).u8(0).u64(e.origin_round);
            enc.u32(e.cmd.client).u64(e.cmd.seq).bytes(&e.cmd.payload);
            prev = Digest(fnv1a(enc.as_bytes()));
        }
        assert_eq!(a.tip_hash(), prev);
        assert_eq!(a.tip_hash(), b.tip_hash());
    }

    #[test]
    fn genesis_checkpoint() {
        let cp = make_checkpoint(&CommittedLedger::new(), 0, Protocol::Raft).unwrap();
        assert_eq!(cp.height, 0);
        assert_eq!(cp.ledger_hash, GENESIS_HASH);
        assert!(make_checkpoint(&ledger(2), 3, Protocol::Raft).is_err());
    }

    #[test]
    fn checkpoints_agree_across_nodes() {
        let a = ledger(10).checkpoint(10, Protocol::Raft).unwrap();
        let b = ledger(10).checkpoint(10, Protocol::Raft).unwrap();
        assert_eq!(a, b);
        assert!(verify_checkpoint(&a, &ledger(12)));
    }

    #[test]
    fn replay_reproduces_checkpoint() {
        let full = ledger(15);
        let cp = full.checkpoint(9, Protocol::HotstuffBasic).unwrap();
        let mut replay = CommittedLedger::new();
        for e in &full.entries()[..9] {
            replay.append(e.clone()).unwrap();
        }
        assert_eq!(replay.tip_hash(), cp.ledger_hash);
    }

    #[test]
    fn tampered_byte_breaks_verification() {
        let l = ledger(5);
        let cp = l.checkpoint(5, Protocol::Raft).unwrap();
        let mut t = l.clone();
        t.tamper_payload(3, vec![0xff; 4]);
        assert!(verify_checkpoint(&cp, &l));
        assert!(!verify_checkpoint(&cp, &t));
        assert!(!t.verify_chain());
        let mut missing = cp;
        missing.height = 9;
        assert!(!verify_checkpoint(&missing, &l));
    }

    #[test]
    fn prefix_relations() {
        let short = ledger(3);
        let long = ledger(7);
        assert!(short.is_prefix_of(&long));
        assert!(!long.is_prefix_of(&short));
        let mut other = ledger(2);
        other.append(entry(3, 99)).unwrap();
        assert!(!other.prefix_consistent(&long));
    }
}
