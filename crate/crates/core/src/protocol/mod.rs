//! Attestation sub-protocols: request, native report generation, on-chain
//! verification and conversion to a scheme-neutral result, and the
//! requester-side verification that ends in a secure channel.

mod client;

pub use client::{AttestTask, ChannelEvent, ClientConfig, DeviceClient, ProtocolMode, SessionStatus, SubmissionMode};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{digest_of, hash_of, Digest, Encode, Encoder};
use crate::crypto::{self, PublicKey, SessionKey, SharePublic, Signature, SigningKeyPair};
use crate::ids::{AttributeId, DeviceId};
use crate::ledger::LedgerState;
use crate::registry::{RegistryError, RequirementList};
use crate::tee::{NativeAttestationReport, TeeError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("device is not enrolled")]
    NotEnrolled,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Tee(#[from] TeeError),
    #[error("no verifiable result before the deadline")]
    Timeout,
    #[error("every response failed light verification")]
    VerificationFailed,
    #[error("request names device {0} as target")]
    WrongTarget(DeviceId),
}

/// A signed request to attest another device's environment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationRequest {
    pub lst: RequirementList,
    pub requester_id: DeviceId,
    pub ka_public_requester: SharePublic,
    pub nonce: [u8; 16],
    pub signature: Signature,
}

impl AttestationRequest {
    fn signing_bytes(
        lst: &RequirementList,
        requester_id: DeviceId,
        ka_public_requester: &SharePublic,
        nonce: &[u8; 16],
    ) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str("dhtee/request")
            .field(lst)
            .field(&requester_id)
            .field(ka_public_requester)
            .field(nonce);
        e.finish().into_vec()
    }

    pub fn new(
        lst: RequirementList,
        requester_id: DeviceId,
        ka_public_requester: SharePublic,
        nonce: [u8; 16],
        keys: &SigningKeyPair,
    ) -> Self {
        let signature = keys.sign(Self::signing_bytes(&lst, requester_id, &ka_public_requester, &nonce));
        Self {
            lst,
            requester_id,
            ka_public_requester,
            nonce,
            signature,
        }
    }

    pub fn verify_signature(&self, key: &PublicKey) -> bool {
        crypto::verify(
            key,
            Self::signing_bytes(&self.lst, self.requester_id, &self.ka_public_requester, &self.nonce),
            &self.signature,
        )
    }

    /// Ledger-wide key of the request.
    pub fn digest(&self) -> Digest {
        digest_of(self)
    }
}

impl Encode for AttestationRequest {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.lst)
            .field(&self.requester_id)
            .field(&self.ka_public_requester)
            .field(&self.nonce)
            .field(&self.signature);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Unsatisfied,
    InvalidReport,
}

/// The scheme-neutral verdict every device understands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonVerificationResult {
    pub request_hash: Digest,
    pub prover_id: DeviceId,
    pub verdict: Verdict,
    pub witness_map: Vec<(AttributeId, AttributeId)>,
    pub missing: Vec<AttributeId>,
    pub ka_public_prover: Option<SharePublic>,
    pub prover_measurement: Option<Digest>,
}

impl Encode for (AttributeId, AttributeId) {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.0).field(&self.1);
    }
}

impl Encode for CommonVerificationResult {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.request_hash)
            .field(&self.prover_id)
            .u8(self.verdict as u8)
            .list(&self.witness_map)
            .list(&self.missing)
            .option(&self.ka_public_prover)
            .option(&self.prover_measurement);
    }
}

impl CommonVerificationResult {
    fn invalid(request_hash: Digest, prover_id: DeviceId) -> Self {
        Self {
            request_hash,
            prover_id,
            verdict: Verdict::InvalidReport,
            witness_map: Vec::new(),
            missing: Vec::new(),
            ka_public_prover: None,
            prover_measurement: None,
        }
    }
}

/// Validator-side verification of a native report against the request it
/// answers. Runs identically on every validator inside transaction
/// execution; failures are encoded in the verdict.
pub fn att_con_vrfy(
    state: &LedgerState,
    prover: DeviceId,
    report: &NativeAttestationReport,
) -> CommonVerificationResult {
    let request_hash = report.request_hash;
    let Some(record) = state.device(prover) else {
        return CommonVerificationResult::invalid(request_hash, prover);
    };
    let Some(entry) = state.request(&request_hash) else {
        return CommonVerificationResult::invalid(request_hash, prover);
    };
    let signature_ok = state
        .schemes()
        .native_verify(&record.scheme, report, &record.attestation_public_key)
        .unwrap_or(false);
    if !signature_ok || report.requester_id != entry.request.requester_id {
        return CommonVerificationResult::invalid(request_hash, prover);
    }
    let Ok(sat) = state.registry().satisfies(&entry.request.lst, &report.attributes) else {
        return CommonVerificationResult::invalid(request_hash, prover);
    };
    if sat.satisfied {
        CommonVerificationResult {
            request_hash,
            prover_id: prover,
            verdict: Verdict::Satisfied,
            witness_map: sat.witnesses.into_iter().collect(),
            missing: Vec::new(),
            ka_public_prover: Some(report.ka_public),
            prover_measurement: Some(report.measurement),
        }
    } else {
        CommonVerificationResult {
            request_hash,
            prover_id: prover,
            verdict: Verdict::Unsatisfied,
            witness_map: sat.witnesses.into_iter().collect(),
            missing: sat.missing,
            ka_public_prover: None,
            prover_measurement: Some(report.measurement),
        }
    }
}

/// Order-independent binding of the request(s) behind a channel.
pub fn channel_transcript(requests: &[Digest]) -> Digest {
    let mut sorted = requests.to_vec();
    sorted.sort();
    let mut e = Encoder::new();
    e.str("dhtee/channel").list(&sorted);
    hash_of(e.finish())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecureChannel {
    pub peer: DeviceId,
    pub session: SessionKey,
    pub established_at: u64,
    /// Requests whose verified results authorized this channel.
    pub requests: Vec<Digest>,
    send_counter: u64,
    recv_seen: BTreeSet<u64>,
}

impl SecureChannel {
    pub fn new(peer: DeviceId, session: SessionKey, established_at: u64, requests: Vec<Digest>) -> Self {
        Self {
            peer,
            session,
            established_at,
            requests,
            send_counter: 0,
            recv_seen: BTreeSet::new(),
        }
    }

    fn nonce(sender: DeviceId, counter: u64) -> [u8; 12] {
        let mut n = [0u8; 12];
        n[..4].copy_from_slice(&sender.0.to_be_bytes());
        n[4..].copy_from_slice(&counter.to_be_bytes());
        n
    }

    /// Seals with a per-sender counter nonce.
    pub fn seal(&mut self, me: DeviceId, plaintext: &[u8]) -> (u64, Vec<u8>) {
        let counter = self.send_counter;
        self.send_counter += 1;
        (counter, crypto::seal(&self.session, &Self::nonce(me, counter), plaintext))
    }

    pub fn open(&mut self, counter: u64, ciphertext: &[u8]) -> Result<Vec<u8>, crypto::CryptoError> {
        if self.recv_seen.contains(&counter) {
            return Err(crypto::CryptoError::AuthenticationFailure);
        }
        let plain = crypto::open(&self.session, &Self::nonce(self.peer, counter), ciphertext)?;
        self.recv_seen.insert(counter);
        Ok(plain)
    }
}
