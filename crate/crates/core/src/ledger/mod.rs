//! Permissioned ledger: validator set, transactions, blocks, and light-client
//! inclusion proofs.
//!
//! A block is final once a quorum of validators has precommitted its header
//! hash. A device holding only the [`ValidatorSet`] can check an
//! [`InclusionProof`] with [`light_verify`].

mod node;
mod state;

pub use node::{Behavior, BlockCandidate, NodeConfig, NodeEvent, Outbound, PolCertificate, ValidatorNode, Vote};
pub use state::{ApplyOutcome, GenesisConfig, LedgerState, RejectReason, RequestEntry};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{digest_of, hash_of, merkle_root, verify_merkle, Digest, Encode, Encoder, MerkleProof};
use crate::crypto::{self, PublicKey, Signature, SigningKeyPair};
use crate::enrollment::EnrollPayload;
use crate::ids::{AttributeId, DeviceId, TeeSchemeTag, ValidatorId};
use crate::protocol::{AttestationRequest, CommonVerificationResult};
use crate::tee::{NativeAttestationReport, ReportLayout};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("round {round} gathered {signatures} of {quorum} required signatures")]
    NoQuorum { round: u64, signatures: usize, quorum: usize },
    #[error("no validator acknowledged the submission")]
    AllNodesUnreachable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorSet {
    pub validators: Vec<PublicKey>,
    pub quorum: usize,
}

impl ValidatorSet {
    pub fn new(validators: Vec<PublicKey>) -> Self {
        let quorum = Self::quorum_for(validators.len());
        Self { validators, quorum }
    }

    /// floor(2N/3) + 1.
    pub fn quorum_for(n: usize) -> usize {
        2 * n / 3 + 1
    }

    pub fn len(&self) -> usize {
        self.validators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validators.is_empty()
    }

    pub fn key(&self, id: ValidatorId) -> Option<&PublicKey> {
        self.validators.get(id.0 as usize)
    }

    pub fn proposer_for(&self, round: u64) -> ValidatorId {
        ValidatorId((round % self.validators.len() as u64) as u32)
    }

    /// Counts distinct validators with a valid signature over `message`.
    pub fn count_valid(&self, message: &[u8], signatures: &[(ValidatorId, Signature)]) -> usize {
        let mut seen = std::collections::BTreeSet::new();
        signatures
            .iter()
            .filter(|(id, sig)| {
                self.key(*id)
                    .is_some_and(|pk| !seen.contains(id) && crypto::verify(pk, message, sig))
                    && seen.insert(*id)
            })
            .count()
    }
}

impl Encode for ValidatorSet {
    fn encode_into(&self, out: &mut Encoder) {
        out.list(&self.validators).u64(self.quorum as u64);
    }
}

/// Registry and scheme administration, signed by the configured admin key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GovernanceOp {
    RegisterAttribute { scheme: TeeSchemeTag, label: String },
    DeclareEquivalence { a: AttributeId, b: AttributeId },
    InstallScheme { tag: TeeSchemeTag, layout: ReportLayout, vocabulary: Vec<String> },
    AddVendor { name: String, root: PublicKey },
}

impl Encode for GovernanceOp {
    fn encode_into(&self, out: &mut Encoder) {
        match self {
            GovernanceOp::RegisterAttribute { scheme, label } => {
                out.u8(0).field(scheme).str(label);
            }
            GovernanceOp::DeclareEquivalence { a, b } => {
                out.u8(1).field(a).field(b);
            }
            GovernanceOp::InstallScheme { tag, layout, vocabulary } => {
                out.u8(2).field(tag).field(layout).list(vocabulary);
            }
            GovernanceOp::AddVendor { name, root } => {
                out.u8(3).str(name).field(root);
            }
        }
    }
}

/// Plain value-free transaction used as the baseline workload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub nonce: u64,
    pub memo: Vec<u8>,
}

impl Encode for Transfer {
    fn encode_into(&self, out: &mut Encoder) {
        out.u64(self.nonce).bytes(&self.memo);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum TxPayload {
    Enroll(EnrollPayload),
    Governance(GovernanceOp),
    AttRequest(AttestationRequest),
    AttReport(NativeAttestationReport),
    AttResult(CommonVerificationResult),
    Transfer(Transfer),
}

impl TxPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            TxPayload::Enroll(_) => "enroll",
            TxPayload::Governance(_) => "governance",
            TxPayload::AttRequest(_) => "att_request",
            TxPayload::AttReport(_) => "att_report",
            TxPayload::AttResult(_) => "att_result",
            TxPayload::Transfer(_) => "transfer",
        }
    }
}

impl Encode for TxPayload {
    fn encode_into(&self, out: &mut Encoder) {
        match self {
            TxPayload::Enroll(p) => out.u8(0).field(p),
            TxPayload::Governance(p) => out.u8(1).field(p),
            TxPayload::AttRequest(p) => out.u8(2).field(p),
            TxPayload::AttReport(p) => out.u8(3).field(p),
            TxPayload::AttResult(p) => out.u8(4).field(p),
            TxPayload::Transfer(p) => out.u8(5).field(p),
        };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "by", content = "id", rename_all = "snake_case")]
pub enum Submitter {
    Device(DeviceId),
    Validator(ValidatorId),
    Admin,
    /// Results emitted by transaction execution; authenticated by
    /// re-execution rather than by a signature.
    System,
}

impl Encode for Submitter {
    fn encode_into(&self, out: &mut Encoder) {
        match self {
            Submitter::Device(d) => out.u8(0).field(d),
            Submitter::Validator(v) => out.u8(1).field(v),
            Submitter::Admin => out.u8(2),
            Submitter::System => out.u8(3),
        };
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub payload: TxPayload,
    pub submitter: Submitter,
    pub signature: Signature,
}

impl Transaction {
    fn signing_bytes(payload: &TxPayload, submitter: &Submitter) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str("dhtee/tx").field(payload).field(submitter);
        e.finish().into_vec()
    }

    pub fn signed(payload: TxPayload, submitter: Submitter, keys: &SigningKeyPair) -> Self {
        let signature = keys.sign(Self::signing_bytes(&payload, &submitter));
        Self {
            payload,
            submitter,
            signature,
        }
    }

    pub fn system(payload: TxPayload) -> Self {
        Self {
            payload,
            submitter: Submitter::System,
            signature: Signature::EMPTY,
        }
    }

    pub fn verify_signature(&self, key: &PublicKey) -> bool {
        crypto::verify(
            key,
            Self::signing_bytes(&self.payload, &self.submitter),
            &self.signature,
        )
    }

    pub fn digest(&self) -> Digest {
        digest_of(self)
    }
}

impl Encode for Transaction {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.payload)
            .field(&self.submitter)
            .field(&self.signature);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub parent: Digest,
    pub tx_root: Digest,
    pub state_root: Digest,
    pub proposer: ValidatorId,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        digest_of(self)
    }
}

impl Encode for BlockHeader {
    fn encode_into(&self, out: &mut Encoder) {
        out.str("dhtee/header")
            .u64(self.height)
            .field(&self.parent)
            .field(&self.tx_root)
            .field(&self.state_root)
            .field(&self.proposer);
    }
}

/// Precommit signatures over `(height, round, header hash)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitCertificate {
    pub round: u64,
    pub signatures: Vec<(ValidatorId, Signature)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteKind {
    Prevote,
    Precommit,
}

/// Bytes a validator signs when voting.
pub fn vote_message(kind: VoteKind, height: u64, round: u64, block: &Digest) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str(match kind {
        VoteKind::Prevote => "dhtee/prevote",
        VoteKind::Precommit => "dhtee/precommit",
    })
    .u64(height)
    .u64(round)
    .field(block);
    e.finish().into_vec()
}

pub fn tx_root(transactions: &[Transaction]) -> Digest {
    let leaves: Vec<Digest> = transactions.iter().map(Transaction::digest).collect();
    merkle_root(&leaves).unwrap_or(Digest::ZERO)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
    pub commit: CommitCertificate,
}

impl Block {
    pub fn hash(&self) -> Digest {
        self.header.hash()
    }

    pub fn is_finalized(&self, validators: &ValidatorSet) -> bool {
        let msg = vote_message(VoteKind::Precommit, self.header.height, self.commit.round, &self.hash());
        validators.count_valid(&msg, &self.commit.signatures) >= validators.quorum
    }

    /// Inclusion proof for the transaction at `index`.
    pub fn prove(&self, index: usize) -> Option<InclusionProof> {
        let leaves: Vec<Digest> = self.transactions.iter().map(Transaction::digest).collect();
        let merkle = crate::codec::merkle_prove(&leaves, index).ok()?;
        Some(InclusionProof {
            header: self.header.clone(),
            commit: self.commit.clone(),
            merkle,
            transaction: self.transactions[index].clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub header: BlockHeader,
    pub commit: CommitCertificate,
    pub merkle: MerkleProof,
    pub transaction: Transaction,
}

/// Quorum of distinct valid precommits on the header, and the transaction
/// bound into the header's transaction root.
pub fn light_verify(proof: &InclusionProof, validators: &ValidatorSet) -> bool {
    if validators.is_empty() {
        return false;
    }
    let header_hash = proof.header.hash();
    let msg = vote_message(VoteKind::Precommit, proof.header.height, proof.commit.round, &header_hash);
    if validators.count_valid(&msg, &proof.commit.signatures) < validators.quorum {
        return false;
    }
    proof.merkle.root == proof.header.tx_root
        && verify_merkle(&proof.merkle, &proof.transaction.digest())
}

/// Hash of a message for trace lines.
pub(crate) fn json_digest<T: Serialize>(value: &T) -> Digest {
    hash_of(serde_json::to_vec(value).expect("trace values serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn keys(n: u8) -> Vec<SigningKeyPair> {
        (0..n).map(|i| keygen([i + 100; 32])).collect()
    }

    fn transfer(nonce: u64, k: &SigningKeyPair) -> Transaction {
        Transaction::signed(
            TxPayload::Transfer(Transfer { nonce, memo: vec![] }),
            Submitter::Device(DeviceId(1)),
            k,
        )
    }

    fn finalized_block(signers: &[SigningKeyPair], n_tx: u64, round: u64) -> Block {
        let dev = keygen([1; 32]);
        let transactions: Vec<_> = (0..n_tx).map(|i| transfer(i, &dev)).collect();
        let header = BlockHeader {
            height: 1,
            parent: Digest::ZERO,
            tx_root: tx_root(&transactions),
            state_root: hash_of(b"s"),
            proposer: ValidatorId(0),
        };
        let msg = vote_message(VoteKind::Precommit, 1, round, &header.hash());
        let signatures = signers
            .iter()
            .enumerate()
            .map(|(i, k)| (ValidatorId(i as u32), k.sign(&msg)))
            .collect();
        Block {
            header,
            transactions,
            commit: CommitCertificate { round, signatures },
        }
    }

    #[test]
    fn quorum_formula() {
        assert_eq!(ValidatorSet::quorum_for(1), 1);
        assert_eq!(ValidatorSet::quorum_for(3), 3);
        assert_eq!(ValidatorSet::quorum_for(4), 3);
        assert_eq!(ValidatorSet::quorum_for(7), 5);
        assert_eq!(ValidatorSet::quorum_for(10), 7);
    }

    #[test]
    fn light_verify_accepts_honest_and_rejects_stripped() {
        let ks = keys(4);
        let set = ValidatorSet::new(ks.iter().map(|k| k.public()).collect());
        let block = finalized_block(&ks[..3], 5, 2);
        for i in 0..5 {
            assert!(light_verify(&block.prove(i).unwrap(), &set));
        }
        let mut stripped = block.prove(0).unwrap();
        stripped.commit.signatures.pop();
        assert!(!light_verify(&stripped, &set));

        // Duplicated signer does not count twice.
        let mut dup = stripped.clone();
        dup.commit.signatures.push(dup.commit.signatures[0]);
        assert!(!light_verify(&dup, &set));

        // Wrong round in the certificate.
        let mut wrong_round = block.prove(0).unwrap();
        wrong_round.commit.round += 1;
        assert!(!light_verify(&wrong_round, &set));

        // A transaction that is not in the tree.
        let mut foreign = block.prove(1).unwrap();
        foreign.transaction = transfer(99, &keygen([1; 32]));
        assert!(!light_verify(&foreign, &set));

        assert!(!light_verify(&block.prove(0).unwrap(), &ValidatorSet::new(vec![])));
    }

    #[test]
    fn signatures_from_outsiders_do_not_count() {
        let ks = keys(4);
        let outsiders = keys(8)[4..].to_vec();
        let set = ValidatorSet::new(ks.iter().map(|k| k.public()).collect());
        let block = finalized_block(&outsiders, 1, 0);
        assert!(!light_verify(&block.prove(0).unwrap(), &set));
    }

    #[test]
    fn tx_signature_binds_submitter() {
        let k = keygen([4; 32]);
        let mut tx = transfer(1, &k);
        assert!(tx.verify_signature(&k.public()));
        tx.submitter = Submitter::Device(DeviceId(2));
        assert!(!tx.verify_signature(&k.public()));
    }
}
