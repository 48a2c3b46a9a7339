//! The client every device runs: enrollment, request issue, report
//! generation, result polling with light verification, and channel setup.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::Digest;
use crate::crypto::{self, ka_generate, KeyAgreementShare, SeededRng};
use crate::enrollment::{enroll_direct, WitnessStatement};
use crate::ids::{AttributeId, DeviceId, ValidatorId};
use crate::ledger::{light_verify, InclusionProof, NodeEvent, Outbound, Submitter, Transaction, TxPayload, ValidatorSet};
use crate::registry::RequirementList;
use crate::simnet::{ActorId, Message};
use crate::tee::TeePlatform;

use super::{channel_transcript, AttestationRequest, CommonVerificationResult, ProtocolError, SecureChannel, Verdict};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolMode {
    #[default]
    Mutual,
    OneWay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubmissionMode {
    #[default]
    Multicast,
    /// One node at a time, moving on when no ack arrives within a round.
    Sequential,
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub id: DeviceId,
    pub mode: ProtocolMode,
    pub submission: SubmissionMode,
    pub poll_interval_rounds: u64,
    pub timeout_rounds: u64,
    /// Requirements this device places on a peer when it attests back.
    pub reverse_requirements: Vec<AttributeId>,
    pub code_identity: Vec<u8>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "error", rename_all = "snake_case")]
pub enum SessionStatus {
    Pending,
    Satisfied,
    Unsatisfied,
    InvalidReport,
    Failed(String),
}

impl SessionStatus {
    fn from_verdict(v: Verdict) -> Self {
        match v {
            Verdict::Satisfied => SessionStatus::Satisfied,
            Verdict::Unsatisfied => SessionStatus::Unsatisfied,
            Verdict::InvalidReport => SessionStatus::InvalidReport,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChannelEvent {
    Enrolled { at: u64 },
    EnrollmentFailed { reason: String },
    RequestIssued { request: Digest, target: Option<DeviceId>, at: u64 },
    ReportSubmitted { request: Digest, at: u64 },
    Refused { request: Digest, reason: String },
    Verified { request: Digest, verdict: Verdict, at: u64 },
    ProofRejected { key: Digest },
    Failed { request: Digest, reason: String },
    Unreachable { tx: Digest },
    Established { peer: DeviceId, fingerprint: Digest, at: u64 },
    MessageOpened { peer: DeviceId, len: usize },
    MessageRejected { peer: DeviceId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Requester,
    Prover,
}

struct Attempt {
    role: Role,
    request: AttestationRequest,
    ka: KeyAgreementShare,
    started_round: u64,
    last_poll: Option<u64>,
    status: SessionStatus,
    result: Option<CommonVerificationResult>,
    rejected: usize,
}

struct PendingSubmit {
    tx: Transaction,
    next_node: usize,
    sent_round: u64,
}

enum Enrollment {
    NotStarted,
    Collecting { started_round: u64, statements: Vec<WitnessStatement> },
    Submitted { tx: Digest, last_poll: Option<u64> },
    Enrolled,
    Failed,
}

/// A planned outgoing attestation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestTask {
    pub lst: RequirementList,
    pub start_round: u64,
}

pub struct DeviceClient {
    config: ClientConfig,
    platform: TeePlatform,
    validators: ValidatorSet,
    rng: SeededRng,
    round: u64,
    enrollment: Enrollment,
    tasks: Vec<AttestTask>,
    attempts: BTreeMap<Digest, Attempt>,
    pending_submits: BTreeMap<Digest, PendingSubmit>,
    channels: BTreeMap<DeviceId, SecureChannel>,
    inbox: Vec<(DeviceId, u64, Vec<u8>)>,
    accepted_proofs: Vec<InclusionProof>,
    events: Vec<ChannelEvent>,
}

impl DeviceClient {
    /// `validators` arrives over the same trusted channel as enrollment.
    pub fn new(config: ClientConfig, platform: TeePlatform, validators: ValidatorSet) -> Self {
        let rng = SeededRng::for_actor(config.seed, &format!("device/{}", config.id.0));
        Self {
            config,
            platform,
            validators,
            rng,
            round: 0,
            enrollment: Enrollment::NotStarted,
            tasks: Vec::new(),
            attempts: BTreeMap::new(),
            pending_submits: BTreeMap::new(),
            channels: BTreeMap::new(),
            inbox: Vec::new(),
            accepted_proofs: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> DeviceId {
        self.config.id
    }

    pub fn platform(&self) -> &TeePlatform {
        &self.platform
    }

    pub fn is_enrolled(&self) -> bool {
        matches!(self.enrollment, Enrollment::Enrolled)
    }

    pub fn channels(&self) -> &BTreeMap<DeviceId, SecureChannel> {
        &self.channels
    }

    pub fn channel_mut(&mut self, peer: DeviceId) -> Option<&mut SecureChannel> {
        self.channels.get_mut(&peer)
    }

    /// Every proof this client accepted after light verification.
    pub fn accepted_proofs(&self) -> &[InclusionProof] {
        &self.accepted_proofs
    }

    pub fn events(&self) -> &[ChannelEvent] {
        &self.events
    }

    /// Status of every request this device issued or answered.
    pub fn sessions(&self) -> Vec<(Digest, bool, SessionStatus)> {
        self.attempts
            .iter()
            .map(|(h, a)| (*h, a.role == Role::Requester, a.status.clone()))
            .collect()
    }

    pub fn add_task(&mut self, task: AttestTask) {
        self.tasks.push(task);
    }

    /// Starts vendor enrollment with a prepared transaction.
    pub fn enroll_with(&mut self, tx: Transaction, out: &mut Vec<Outbound>) {
        let digest = tx.digest();
        self.submit(tx, out);
        self.enrollment = Enrollment::Submitted {
            tx: digest,
            last_poll: None,
        };
    }

    /// Starts direct enrollment: every validator reads the key over its
    /// physical channel and returns a signed statement.
    pub fn enroll_direct(&mut self, out: &mut Vec<Outbound>) {
        for i in 0..self.validators.len() as u32 {
            out.push(Outbound {
                to: ActorId::Validator(ValidatorId(i)),
                msg: Message::WitnessRequest {
                    device: self.config.id,
                    scheme: self.platform.scheme().clone(),
                    public_key: self.platform.public_key(),
                },
            });
        }
        self.enrollment = Enrollment::Collecting {
            started_round: self.round,
            statements: Vec::new(),
        };
    }

    pub fn handle(&mut self, now: u64, event: NodeEvent) -> Vec<Outbound> {
        let mut out = Vec::new();
        match event {
            NodeEvent::RoundStart(round) => {
                self.round = round;
                self.on_wake(now, &mut out);
            }
            NodeEvent::Deliver { from, msg } => self.on_message(now, from, msg, &mut out),
        }
        out
    }

    fn node(&self, k: usize) -> ActorId {
        let n = self.validators.len();
        ActorId::Validator(ValidatorId(((self.config.id.0 as usize + k) % n) as u32))
    }

    fn submit(&mut self, tx: Transaction, out: &mut Vec<Outbound>) {
        match self.config.submission {
            SubmissionMode::Multicast => {
                for k in 0..self.validators.len() {
                    out.push(Outbound {
                        to: self.node(k),
                        msg: Message::Submit {
                            tx: tx.clone(),
                            relay: false,
                        },
                    });
                }
            }
            SubmissionMode::Sequential => {
                out.push(Outbound {
                    to: self.node(0),
                    msg: Message::Submit {
                        tx: tx.clone(),
                        relay: true,
                    },
                });
                self.pending_submits.insert(
                    tx.digest(),
                    PendingSubmit {
                        tx,
                        next_node: 1,
                        sent_round: self.round,
                    },
                );
            }
        }
    }

    fn sign_tx(&self, payload: TxPayload) -> Transaction {
        Transaction::signed(payload, Submitter::Device(self.config.id), self.platform.keys())
    }

    fn on_wake(&mut self, now: u64, out: &mut Vec<Outbound>) {
        let round = self.round;
        let n = self.validators.len();

        // Sequential fallback: no ack within a round moves to the next node.
        let mut unreachable = Vec::new();
        for (d, p) in self.pending_submits.iter_mut() {
            if round > p.sent_round {
                if p.next_node >= n {
                    unreachable.push(*d);
                    continue;
                }
                let to = ActorId::Validator(ValidatorId(((self.config.id.0 as usize + p.next_node) % n) as u32));
                out.push(Outbound {
                    to,
                    msg: Message::Submit {
                        tx: p.tx.clone(),
                        relay: true,
                    },
                });
                p.next_node += 1;
                p.sent_round = round;
            }
        }
        for d in unreachable {
            self.pending_submits.remove(&d);
            self.events.push(ChannelEvent::Unreachable { tx: d });
        }

        match &mut self.enrollment {
            Enrollment::Collecting { started_round, statements } => {
                if statements.len() >= n || round > *started_round + 1 {
                    let statements = std::mem::take(statements);
                    match enroll_direct(
                        self.config.id,
                        self.platform.scheme(),
                        self.platform.keys(),
                        &statements,
                        &self.validators,
                    ) {
                        Ok(tx) => self.enroll_with(tx, out),
                        Err(e) => {
                            self.events.push(ChannelEvent::EnrollmentFailed { reason: e.to_string() });
                            self.enrollment = Enrollment::Failed;
                        }
                    }
                }
            }
            Enrollment::Submitted { tx, last_poll } => {
                if last_poll.is_none_or(|p| round >= p + self.config.poll_interval_rounds) {
                    *last_poll = Some(round);
                    let digest = *tx;
                    for k in 0..n {
                        out.push(Outbound {
                            to: self.node(k),
                            msg: Message::QueryTx { digest },
                        });
                    }
                }
            }
            _ => {}
        }
        if !self.is_enrolled() {
            return;
        }

        // One in-flight request per named peer; later tasks wait their turn.
        let mut busy: BTreeSet<DeviceId> = self
            .attempts
            .values()
            .filter(|a| a.role == Role::Requester && a.status == SessionStatus::Pending)
            .filter_map(|a| a.request.lst.target_device)
            .collect();
        let mut rest = Vec::new();
        for task in std::mem::take(&mut self.tasks) {
            let ready = task.start_round <= round && task.lst.target_device.is_none_or(|t| busy.insert(t));
            if ready {
                self.issue(now, task.lst, out);
            } else {
                rest.push(task);
            }
        }
        self.tasks = rest;

        let mut polls = Vec::new();
        for (hash, a) in self.attempts.iter_mut() {
            if a.status != SessionStatus::Pending {
                continue;
            }
            if round > a.started_round + self.config.timeout_rounds {
                let err = if a.rejected > 0 {
                    ProtocolError::VerificationFailed
                } else {
                    ProtocolError::Timeout
                };
                a.status = SessionStatus::Failed(err.to_string());
                self.events.push(ChannelEvent::Failed {
                    request: *hash,
                    reason: err.to_string(),
                });
                continue;
            }
            if a.last_poll.is_none_or(|p| round >= p + self.config.poll_interval_rounds) {
                a.last_poll = Some(round);
                polls.push(*hash);
            }
        }
        for request_hash in polls {
            for k in 0..n {
                out.push(Outbound {
                    to: self.node(k),
                    msg: Message::QueryResult { request_hash },
                });
            }
        }
    }

    /// Signs and submits a request; the requester's share rides inside it.
    fn issue(&mut self, now: u64, lst: RequirementList, out: &mut Vec<Outbound>) -> Digest {
        let ka = ka_generate(self.rng.seed32());
        let nonce = self.rng.bytes::<16>();
        let target = lst.target_device;
        let request = AttestationRequest::new(lst, self.config.id, ka.public_share(), nonce, self.platform.keys());
        let hash = request.digest();
        self.submit(self.sign_tx(TxPayload::AttRequest(request.clone())), out);
        self.attempts.insert(
            hash,
            Attempt {
                role: Role::Requester,
                request,
                ka,
                started_round: self.round,
                last_poll: Some(self.round),
                status: SessionStatus::Pending,
                result: None,
                rejected: 0,
            },
        );
        self.events.push(ChannelEvent::RequestIssued { request: hash, target, at: now });
        hash
    }

    fn on_message(&mut self, now: u64, from: ActorId, msg: Message, out: &mut Vec<Outbound>) {
        match msg {
            Message::SubmitAck { tx } => {
                self.pending_submits.remove(&tx);
            }
            Message::Witness(statement) => {
                if let Enrollment::Collecting { statements, .. } = &mut self.enrollment {
                    if from == ActorId::Validator(statement.validator) {
                        statements.push(statement);
                    }
                }
            }
            Message::QueryResponse { key, proof: Some(proof) } => self.on_proof(now, key, proof, out),
            Message::Forward { request, proof } => self.on_forward(now, request, proof, out),
            Message::ChannelData { counter, ciphertext } => {
                if let ActorId::Device(peer) = from {
                    self.inbox.push((peer, counter, ciphertext));
                    self.drain_inbox();
                }
            }
            _ => {}
        }
    }

    fn accept(&mut self, proof: &InclusionProof) -> bool {
        if light_verify(proof, &self.validators) {
            self.accepted_proofs.push(proof.clone());
            true
        } else {
            false
        }
    }

    fn on_proof(&mut self, now: u64, key: Digest, proof: InclusionProof, out: &mut Vec<Outbound>) {
        if let Enrollment::Submitted { tx, .. } = self.enrollment {
            if key == tx {
                if proof.transaction.digest() == tx && self.accept(&proof) {
                    self.enrollment = Enrollment::Enrolled;
                    self.events.push(ChannelEvent::Enrolled { at: now });
                } else {
                    self.events.push(ChannelEvent::ProofRejected { key });
                }
                return;
            }
        }
        let Some(a) = self.attempts.get(&key) else { return };
        if a.status != SessionStatus::Pending {
            return;
        }
        let result = match &proof.transaction.payload {
            TxPayload::AttResult(r) if r.request_hash == key && proof.transaction.submitter == Submitter::System => {
                r.clone()
            }
            _ => {
                self.reject(key);
                return;
            }
        };
        if !self.accept(&proof) {
            self.reject(key);
            return;
        }
        let me = self.config.id;
        let a = self.attempts.get_mut(&key).expect("checked above");
        let consistent = match a.role {
            Role::Requester => a.request.lst.target_device.is_none_or(|t| t == result.prover_id),
            Role::Prover => {
                result.prover_id == me
                    && (result.verdict != Verdict::Satisfied
                        || result.ka_public_prover == Some(a.ka.public_share()))
            }
        };
        a.status = if consistent {
            SessionStatus::from_verdict(result.verdict)
        } else {
            SessionStatus::Failed(ProtocolError::VerificationFailed.to_string())
        };
        self.events.push(ChannelEvent::Verified {
            request: key,
            verdict: result.verdict,
            at: now,
        });
        let attest_back = a.role == Role::Prover && a.status == SessionStatus::Satisfied;
        let requester = a.request.requester_id;
        a.result = Some(result);

        if attest_back && self.config.mode == ProtocolMode::Mutual {
            let already = self.channels.contains_key(&requester)
                || self.attempts.values().any(|x| {
                    x.role == Role::Requester
                        && x.request.lst.target_device == Some(requester)
                        && !matches!(x.status, SessionStatus::Failed(_))
                });
            if !already {
                let lst = RequirementList {
                    required: self.config.reverse_requirements.clone(),
                    target_device: Some(requester),
                };
                self.issue(now, lst, out);
            }
        }
        self.try_channels(now, out);
    }

    fn reject(&mut self, key: Digest) {
        if let Some(a) = self.attempts.get_mut(&key) {
            a.rejected += 1;
        }
        self.events.push(ChannelEvent::ProofRejected { key });
    }

    fn on_forward(&mut self, now: u64, request: AttestationRequest, proof: InclusionProof, out: &mut Vec<Outbound>) {
        let hash = request.digest();
        if !self.is_enrolled() || self.attempts.contains_key(&hash) {
            return;
        }
        let genuine = matches!(&proof.transaction.payload, TxPayload::AttRequest(r) if *r == request);
        if !genuine || !self.accept(&proof) {
            self.events.push(ChannelEvent::ProofRejected { key: hash });
            return;
        }
        if let Some(t) = request.lst.target_device {
            if t != self.config.id {
                self.events.push(ChannelEvent::Refused {
                    request: hash,
                    reason: ProtocolError::WrongTarget(t).to_string(),
                });
                return;
            }
        }
        let ka = ka_generate(self.rng.seed32());
        let report = self
            .platform
            .create_environment(self.config.id, &self.config.code_identity)
            .and_then(|h| self.platform.generate_native_report(&h, &request, &ka));
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                self.events.push(ChannelEvent::Refused {
                    request: hash,
                    reason: e.to_string(),
                });
                return;
            }
        };
        self.submit(self.sign_tx(TxPayload::AttReport(report)), out);
        self.attempts.insert(
            hash,
            Attempt {
                role: Role::Prover,
                request,
                ka,
                started_round: self.round,
                last_poll: Some(self.round),
                status: SessionStatus::Pending,
                result: None,
                rejected: 0,
            },
        );
        self.events.push(ChannelEvent::ReportSubmitted { request: hash, at: now });
    }

    /// Forms channels whose preconditions now hold. In mutual mode a channel
    /// needs a satisfied verdict in each direction; in one-way mode one
    /// satisfied verdict suffices and the requester's share comes from the
    /// request itself.
    fn try_channels(&mut self, now: u64, out: &mut Vec<Outbound>) {
        let satisfied = |a: &Attempt| a.status == SessionStatus::Satisfied && a.result.is_some();
        let mut formed = Vec::new();
        match self.config.mode {
            ProtocolMode::OneWay => {
                for (h, a) in self.attempts.iter().filter(|(_, a)| satisfied(a)) {
                    let r = a.result.as_ref().expect("satisfied");
                    let (peer, theirs) = match a.role {
                        Role::Requester => (r.prover_id, r.ka_public_prover),
                        Role::Prover => (a.request.requester_id, Some(a.request.ka_public_requester)),
                    };
                    if let Some(theirs) = theirs {
                        formed.push((peer, vec![*h], crypto::ka_shared(&a.ka, &theirs)));
                    }
                }
            }
            ProtocolMode::Mutual => {
                for (oh, o) in self.attempts.iter().filter(|(_, a)| a.role == Role::Requester && satisfied(a)) {
                    let r = o.result.as_ref().expect("satisfied");
                    let peer = r.prover_id;
                    let Some(theirs) = r.ka_public_prover else { continue };
                    let answered = self.attempts.iter().find(|(_, i)| {
                        i.role == Role::Prover && i.request.requester_id == peer && satisfied(i)
                    });
                    if let Some((ih, i)) = answered {
                        formed.push((peer, vec![*oh, *ih], crypto::ka_shared(&i.ka, &theirs)));
                    }
                }
            }
        }
        for (peer, requests, shared) in formed {
            if self.channels.contains_key(&peer) {
                continue;
            }
            match shared {
                Ok(secret) => {
                    let session = crypto::derive_session(&secret, &channel_transcript(&requests));
                    self.events.push(ChannelEvent::Established {
                        peer,
                        fingerprint: session.fingerprint(),
                        at: now,
                    });
                    let mut channel = SecureChannel::new(peer, session, now, requests);
                    let hello = format!("hello {} from {}", peer, self.config.id);
                    let (counter, ciphertext) = channel.seal(self.config.id, hello.as_bytes());
                    out.push(Outbound {
                        to: ActorId::Device(peer),
                        msg: Message::ChannelData { counter, ciphertext },
                    });
                    self.channels.insert(peer, channel);
                }
                Err(e) => {
                    for r in requests {
                        if let Some(a) = self.attempts.get_mut(&r) {
                            a.status = SessionStatus::Failed(e.to_string());
                        }
                    }
                }
            }
        }
        self.drain_inbox();
    }

    fn drain_inbox(&mut self) {
        let inbox = std::mem::take(&mut self.inbox);
        for (peer, counter, ciphertext) in inbox {
            match self.channels.get_mut(&peer) {
                Some(ch) => match ch.open(counter, &ciphertext) {
                    Ok(plain) => self.events.push(ChannelEvent::MessageOpened { peer, len: plain.len() }),
                    Err(_) => self.events.push(ChannelEvent::MessageRejected { peer }),
                },
                None => self.inbox.push((peer, counter, ciphertext)),
            }
        }
    }
}
