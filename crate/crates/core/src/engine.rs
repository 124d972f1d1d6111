//! Plumbing shared by the protocol state machines.

use crate::ledger::{Command, LedgerEntry, NodeId};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    To(NodeId),
    /// Every peer except the sender.
    All,
}

/// Output of one state-machine step.
#[derive(Debug, Clone)]
pub struct Step<M> {
    pub out: Vec<(Dest, M)>,
    pub committed: Vec<LedgerEntry>,
}

impl<M> Default for Step<M> {
    fn default() -> Self {
        Self {
            out: Vec::new(),
            committed: Vec::new(),
        }
    }
}

impl<M> Step<M> {
    pub fn send(&mut self, to: NodeId, msg: M) {
        self.out.push((Dest::To(to), msg));
    }

    pub fn broadcast(&mut self, msg: M) {
        self.out.push((Dest::All, msg));
    }

    pub fn merge(&mut self, other: Step<M>) {
        self.out.extend(other.out);
        self.committed.extend(other.committed);
    }

    /// Number of envelopes this step produces in a cluster of `n`.
    pub fn envelope_count(&self, n: usize) -> usize {
        self.out
            .iter()
            .map(|(d, _)| match d {
                Dest::To(_) => 1,
                Dest::All => n - 1,
            })
            .sum()
    }
}

/// Expands broadcasts into one entry per peer of `me`.
pub fn expand<M: Clone>(out: Vec<(Dest, M)>, me: NodeId, n: usize) -> Vec<(NodeId, M)> {
    let mut v = Vec::with_capacity(out.len());
    for (d, m) in out {
        match d {
            Dest::To(to) => v.push((to, m)),
            Dest::All => {
                for p in 0..n as u32 {
                    if p != me.0 {
                        v.push((NodeId(p), m.clone()));
                    }
                }
            }
        }
    }
    v
}

/// Client commands a node has heard about but not yet seen committed.
#[derive(Debug, Clone, Default)]
pub struct Mempool {
    pending: BTreeMap<(u32, u64), Command>,
    committed: BTreeSet<(u32, u64)>,
}

impl Mempool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit(&mut self, cmd: Command) {
        if !self.committed.contains(&cmd.id()) {
            self.pending.insert(cmd.id(), cmd);
        }
    }

    pub fn mark_committed(&mut self, cmd: &Command) {
        self.pending.remove(&cmd.id());
        if !cmd.is_noop() {
            self.committed.insert(cmd.id());
        }
    }

    pub fn is_committed(&self, cmd: &Command) -> bool {
        self.committed.contains(&cmd.id())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Pending commands in `(client, seq)` order.
    pub fn iter(&self) -> impl Iterator<Item = &Command> {
        self.pending.values()
    }

    /// Up to `max` pending commands for which `skip` is false.
    pub fn select(&self, max: usize, mut skip: impl FnMut(&Command) -> bool) -> Vec<Command> {
        self.pending
            .values()
            .filter(|c| !skip(c))
            .take(max)
            .cloned()
            .collect()
    }
}

/// What a leader may put into its next proposal.
#[derive(Debug, Clone, Copy)]
pub struct ProposalSource<'a> {
    pub mempool: &'a Mempool,
    /// Switch barrier the controller wants ordered, if any.
    pub barrier: Option<&'a Command>,
}

impl<'a> ProposalSource<'a> {
    pub fn new(mempool: &'a Mempool) -> Self {
        Self {
            mempool,
            barrier: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn committed_commands_are_not_resubmitted() {
        let mut m = Mempool::new();
        let c = Command::new(1, 1, b"x".to_vec());
        m.submit(c.clone());
        assert_eq!(m.len(), 1);
        m.mark_committed(&c);
        m.submit(c.clone());
        assert!(m.is_empty());
        assert!(m.is_committed(&c));
    }

    #[test]
    fn envelope_count_expands_broadcasts() {
        let mut s: Step<u8> = Step::default();
        s.broadcast(1);
        s.send(NodeId(2), 2);
        assert_eq!(s.envelope_count(5), 5);
    }
}
