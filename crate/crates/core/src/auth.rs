//! Simulated message authentication.
//!
//! A tag is a keyed FNV-1a digest over the signed bytes. Each node holds
//! only its own [`SigningKey`]; anyone can check a tag through the
//! cluster-wide [`KeyRing`]. Byzantine code paths never obtain another
//! node's signing key, so honest tags cannot be forged.

use crate::digest::{Digest, Encoder};
use crate::ledger::NodeId;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct AuthTag {
    pub signer: NodeId,
    pub mac: Digest,
}

fn node_secret(run_secret: u64, signer: NodeId) -> u64 {
    let mut enc = Encoder::tagged("key");
    enc.u64(run_secret).u32(signer.0);
    enc.finish().0
}

fn mac(secret: u64, bytes: &[u8]) -> Digest {
    let mut enc = Encoder::tagged("mac");
    enc.u64(secret).bytes(bytes);
    enc.finish()
}

#[derive(Clone, Debug)]
pub struct SigningKey {
    signer: NodeId,
    secret: u64,
}

impl SigningKey {
    pub fn signer(&self) -> NodeId {
        self.signer
    }

    pub fn sign(&self, bytes: &[u8]) -> AuthTag {
        AuthTag {
            signer: self.signer,
            mac: mac(self.secret, bytes),
        }
    }

    pub fn sign_digest(&self, d: Digest) -> AuthTag {
        self.sign(&d.0.to_le_bytes())
    }
}

/// Verification side of the simulated signature scheme.
#[derive(Clone, Copy, Debug)]
pub struct KeyRing {
    run_secret: u64,
    n: u32,
}

impl KeyRing {
    pub fn new(run_secret: u64, n: u32) -> Self {
        Self { run_secret, n }
    }

    pub fn size(&self) -> u32 {
        self.n
    }

    /// Hands out the signing key for one node. Called once per node at
    /// cluster construction.
    pub fn signing_key(&self, signer: NodeId) -> SigningKey {
        SigningKey {
            signer,
            secret: node_secret(self.run_secret, signer),
        }
    }

    pub fn verify(&self, tag: &AuthTag, bytes: &[u8]) -> bool {
        tag.signer.0 < self.n && mac(node_secret(self.run_secret, tag.signer), bytes) == tag.mac
    }

    pub fn verify_digest(&self, tag: &AuthTag, d: Digest) -> bool {
        self.verify(tag, &d.0.to_le_bytes())
    }
}

/// What a signed header attests to; honest nodes sign at most one digest
/// per `(kind, epoch, round, slot)`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum HeaderKind {
    /// Raft entry at `(term, index)`.
    RaftEntry,
    /// Raft candidacy announcement for a term.
    RaftCandidacy,
    /// Raft granted vote for a term.
    RaftVote,
    /// HotStuff proposal in a view.
    HsProposal,
    /// HotStuff vote in a view; slot carries the phase.
    HsVote,
}

impl HeaderKind {
    fn tag(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct HeaderKey {
    pub signer: NodeId,
    pub kind: HeaderKind,
    pub epoch: u64,
    pub round: u64,
    pub slot: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SignedHeader {
    pub key: HeaderKey,
    pub digest: Digest,
    pub tag: AuthTag,
}

impl SignedHeader {
    fn signing_digest(key: &HeaderKey, digest: Digest) -> Digest {
        let mut enc = Encoder::tagged("hdr");
        enc.u32(key.signer.0)
            .u8(key.kind.tag())
            .u64(key.epoch)
            .u64(key.round)
            .u64(key.slot)
            .digest(digest);
        enc.finish()
    }

    pub fn sign(
        key: &SigningKey,
        kind: HeaderKind,
        epoch: u64,
        round: u64,
        slot: u64,
        digest: Digest,
    ) -> Self {
        let hk = HeaderKey {
            signer: key.signer(),
            kind,
            epoch,
            round,
            slot,
        };
        let tag = key.sign_digest(Self::signing_digest(&hk, digest));
        Self {
            key: hk,
            digest,
            tag,
        }
    }

    pub fn verify(&self, ring: &KeyRing) -> bool {
        self.tag.signer == self.key.signer
            && ring.verify_digest(&self.tag, Self::signing_digest(&self.key, self.digest))
    }
}

/// Two verifying headers from one signer for the same slot with different
/// contents.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct EquivocationProof {
    pub first: SignedHeader,
    pub second: SignedHeader,
}

impl EquivocationProof {
    pub fn offender(&self) -> NodeId {
        self.first.key.signer
    }

    pub fn verify(&self, ring: &KeyRing) -> bool {
        self.first.key == self.second.key
            && self.first.digest != self.second.digest
            && self.first.verify(ring)
            && self.second.verify(ring)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_and_verify() {
        let ring = KeyRing::new(7, 4);
        let k = ring.signing_key(NodeId(2));
        let tag = k.sign(b"hello");
        assert!(ring.verify(&tag, b"hello"));
        assert!(!ring.verify(&tag, b"hellp"));
        let wrong = AuthTag {
            signer: NodeId(1),
            ..tag
        };
        assert!(!ring.verify(&wrong, b"hello"));
    }

    #[test]
    fn signer_outside_cluster_rejected() {
        let ring = KeyRing::new(7, 4);
        let outsider = KeyRing::new(7, 8).signing_key(NodeId(5));
        assert!(!ring.verify(&outsider.sign(b"x"), b"x"));
    }

    #[test]
    fn equivocation_proof_checks() {
        let ring = KeyRing::new(1, 4);
        let k = ring.signing_key(NodeId(3));
        let a = SignedHeader::sign(&k, HeaderKind::HsVote, 0, 7, 1, Digest(10));
        let b = SignedHeader::sign(&k, HeaderKind::HsVote, 0, 7, 1, Digest(11));
        let c = SignedHeader::sign(&k, HeaderKind::HsVote, 0, 8, 1, Digest(11));
        assert!(EquivocationProof {
            first: a,
            second: b
        }
        .verify(&ring));
        assert!(!EquivocationProof {
            first: a,
            second: a
        }
        .verify(&ring));
        assert!(!EquivocationProof {
            first: a,
            second: c
        }
        .verify(&ring));
        // a forged header claiming node 1 but tagged by node 3
        let mut forged = b;
        forged.key.signer = NodeId(1);
        let mut forged_a = a;
        forged_a.key.signer = NodeId(1);
        assert!(!EquivocationProof {
            first: forged_a,
            second: forged
        }
        .verify(&ring));
    }

    proptest! {
        #[test]
        fn mutated_bytes_or_signer_never_verify(
            secret in any::<u64>(),
            signer in 0u32..8,
            other in 0u32..8,
            bytes in proptest::collection::vec(any::<u8>(), 1..64),
            flip in any::<prop::sample::Index>(),
        ) {
            let ring = KeyRing::new(secret, 8);
            let tag = ring.signing_key(NodeId(signer)).sign(&bytes);
            prop_assert!(ring.verify(&tag, &bytes));
            let mut mutated = bytes.clone();
            let i = flip.index(mutated.len());
            mutated[i] ^= 0x01;
            prop_assert!(!ring.verify(&tag, &mutated));
            if other != signer {
                let relabeled = AuthTag { signer: NodeId(other), ..tag };
                prop_assert!(!ring.verify(&relabeled, &bytes));
            }
        }
    }
}
