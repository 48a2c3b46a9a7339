//! Deterministic discrete-event simulation. Events run in (tick, sequence)
//! order; every random choice comes from a seeded stream, so a config and
//! seed fully determine the trace.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Digest;
use crate::crypto::{PublicKey, SeededRng};
use crate::enrollment::WitnessStatement;
use crate::ids::{DeviceId, TeeSchemeTag, ValidatorId};
use crate::ledger::{
    json_digest, Behavior, Block, BlockCandidate, InclusionProof, LedgerError, NodeEvent, Outbound, Transaction,
    TxPayload, ValidatorNode, Vote,
};
use crate::protocol::{AttestationRequest, DeviceClient};
use crate::scheduler::{Scheduler, SchedulerMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "actor", content = "id", rename_all = "snake_case")]
pub enum ActorId {
    Validator(ValidatorId),
    Device(DeviceId),
    Scheduler,
    /// Load generator used by performance runs.
    Workload,
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Validator(v) => write!(f, "{v}"),
            ActorId::Device(d) => write!(f, "{d}"),
            ActorId::Scheduler => f.write_str("scheduler"),
            ActorId::Workload => f.write_str("workload"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Submit { tx: Transaction, relay: bool },
    SubmitAck { tx: Digest },
    Gossip { tx: Transaction },
    QueryTx { digest: Digest },
    QueryResult { request_hash: Digest },
    QueryResponse { key: Digest, proof: Option<InclusionProof> },
    Proposal(BlockCandidate),
    Vote(Vote),
    Decided(Block),
    SyncRequest { height: u64 },
    Forward { request: AttestationRequest, proof: InclusionProof },
    WitnessRequest { device: DeviceId, scheme: TeeSchemeTag, public_key: PublicKey },
    Witness(WitnessStatement),
    ChannelData { counter: u64, ciphertext: Vec<u8> },
}

impl Message {
    pub const KINDS: [&'static str; 14] = [
        "submit",
        "submit_ack",
        "gossip",
        "query_tx",
        "query_result",
        "query_response",
        "proposal",
        "vote",
        "decided",
        "sync_request",
        "forward",
        "witness_request",
        "witness",
        "channel_data",
    ];

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Submit { .. } => "submit",
            Message::SubmitAck { .. } => "submit_ack",
            Message::Gossip { .. } => "gossip",
            Message::QueryTx { .. } => "query_tx",
            Message::QueryResult { .. } => "query_result",
            Message::QueryResponse { .. } => "query_response",
            Message::Proposal(_) => "proposal",
            Message::Vote(_) => "vote",
            Message::Decided(_) => "decided",
            Message::SyncRequest { .. } => "sync_request",
            Message::Forward { .. } => "forward",
            Message::WitnessRequest { .. } => "witness_request",
            Message::Witness(_) => "witness",
            Message::ChannelData { .. } => "channel_data",
        }
    }

    /// Device-to-validator key reads during direct enrollment travel over a
    /// physical link the network adversary cannot reach.
    pub fn is_physical(&self) -> bool {
        matches!(self, Message::WitnessRequest { .. } | Message::Witness(_))
    }
}

/// Flips one bit in the most security-relevant field of a message.
fn tamper(msg: &mut Message) {
    fn tx(t: &mut Transaction) {
        match &mut t.payload {
            TxPayload::AttRequest(r) => r.ka_public_requester.0[0] ^= 1,
            TxPayload::AttReport(r) => r.ka_public.0[0] ^= 1,
            TxPayload::AttResult(r) => match &mut r.ka_public_prover {
                Some(k) => k.0[0] ^= 1,
                None => r.request_hash.0[0] ^= 1,
            },
            _ => t.signature.0[0] ^= 1,
        }
    }
    match msg {
        Message::Submit { tx: t, .. } | Message::Gossip { tx: t } => tx(t),
        Message::QueryResponse { proof: Some(p), .. } => tx(&mut p.transaction),
        Message::QueryResponse { key, proof: None } => key.0[0] ^= 1,
        Message::Forward { request, .. } => request.ka_public_requester.0[0] ^= 1,
        Message::Proposal(c) => c.block.header.state_root.0[0] ^= 1,
        Message::Vote(v) => v.signature.0[0] ^= 1,
        Message::Decided(b) => b.header.tx_root.0[0] ^= 1,
        Message::ChannelData { ciphertext, .. } => {
            if let Some(b) = ciphertext.first_mut() {
                *b ^= 1
            }
        }
        Message::SubmitAck { tx } => tx.0[0] ^= 1,
        Message::QueryTx { digest } => digest.0[0] ^= 1,
        Message::QueryResult { request_hash } => request_hash.0[0] ^= 1,
        Message::SyncRequest { height } => *height += 1,
        Message::WitnessRequest { .. } | Message::Witness(_) => {}
    }
}

/// Applies to messages whose kind is listed (all kinds when empty).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkRule {
    #[serde(default)]
    pub kinds: Vec<String>,
    pub probability: f64,
}

impl LinkRule {
    fn matches(&self, msg: &Message) -> bool {
        !msg.is_physical() && (self.kinds.is_empty() || self.kinds.iter().any(|k| k == msg.kind()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub validator: u32,
    pub behavior: Behavior,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub faulty: Vec<FaultSpec>,
    #[serde(default)]
    pub scheduler: SchedulerMode,
    #[serde(default)]
    pub tamper: Vec<LinkRule>,
    #[serde(default)]
    pub drop: Vec<LinkRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub round_ticks: u64,
    pub message_delay: u64,
    /// Offset inside a round at which devices wake.
    pub device_wake_offset: u64,
    pub drop: Vec<LinkRule>,
    pub tamper: Vec<LinkRule>,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            round_ticks: 5,
            message_delay: 1,
            device_wake_offset: 3,
            drop: Vec::new(),
            tamper: Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("no actor {0}")]
    UnknownActor(ActorId),
}

#[derive(Clone, Debug)]
enum Payload {
    Wake(u64),
    Deliver { from: ActorId, msg: Message },
}

#[derive(Clone, Debug)]
struct Event {
    target: ActorId,
    payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: u64,
    pub seq: u64,
    pub to: String,
    pub kind: String,
    pub digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScenarioTrace {
    pub lines: Vec<TraceLine>,
}

impl ScenarioTrace {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for line in &self.lines {
            s.push_str(&serde_json::to_string(line).expect("trace lines serialize"));
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> Digest {
        crate::codec::hash_of(self.to_jsonl())
    }

    /// The first `n` lines.
    pub fn prefix(&self, n: usize) -> ScenarioTrace {
        ScenarioTrace {
            lines: self.lines[..n.min(self.lines.len())].to_vec(),
        }
    }
}

/// Submission and finalization ticks per unit of work.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricSamples {
    pub submitted: BTreeMap<Digest, u64>,
    pub finalized: BTreeMap<Digest, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub samples: usize,
    pub mean_latency: f64,
    pub p95_latency: f64,
    /// Units finalized per round inside the window.
    pub throughput: f64,
}

/// Latency is finalization minus submission tick for every finalized unit;
/// throughput counts finalizations in `[start, end)` per round.
pub fn collect_metrics(samples: &MetricSamples, start: u64, end: u64, round_ticks: u64) -> Metrics {
    let mut latencies: Vec<u64> = samples
        .submitted
        .iter()
        .filter_map(|(k, s)| samples.finalized.get(k).map(|f| f - s))
        .collect();
    latencies.sort_unstable();
    let n = latencies.len();
    let mean = if n == 0 {
        0.0
    } else {
        latencies.iter().sum::<u64>() as f64 / n as f64
    };
    let p95 = if n == 0 {
        0.0
    } else {
        let rank = (0.95 * n as f64).ceil() as usize;
        latencies[rank.max(1) - 1] as f64
    };
    let in_window = samples
        .submitted
        .keys()
        .filter_map(|k| samples.finalized.get(k))
        .filter(|t| (start..end).contains(*t))
        .count();
    let rounds = (end.saturating_sub(start)) as f64 / round_ticks as f64;
    Metrics {
        samples: n,
        mean_latency: mean,
        p95_latency: p95,
        throughput: if rounds > 0.0 { in_window as f64 / rounds } else { 0.0 },
    }
}

pub struct Simulation {
    config: SimConfig,
    now: u64,
    seq: u64,
    round: u64,
    queue: BTreeMap<(u64, u64), Event>,
    network_rng: SeededRng,
    validators: Vec<ValidatorNode>,
    devices: BTreeMap<DeviceId, DeviceClient>,
    scheduler: Scheduler,
    trace: ScenarioTrace,
    record_trace: bool,
    submissions: BTreeMap<Digest, u64>,
    dropped: u64,
    tampered: u64,
}

impl Simulation {
    pub fn new(config: SimConfig, validators: Vec<ValidatorNode>, scheduler: Scheduler) -> Self {
        let network_rng = SeededRng::for_actor(config.seed, "network");
        Self {
            config,
            now: 0,
            seq: 0,
            round: 0,
            queue: BTreeMap::new(),
            network_rng,
            validators,
            devices: BTreeMap::new(),
            scheduler,
            trace: ScenarioTrace::default(),
            record_trace: true,
            submissions: BTreeMap::new(),
            dropped: 0,
            tampered: 0,
        }
    }

    pub fn set_record_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// The next round to be started.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn add_device(&mut self, client: DeviceClient) {
        self.devices.insert(client.id(), client);
    }

    pub fn validators(&self) -> &[ValidatorNode] {
        &self.validators
    }

    pub fn devices(&self) -> &BTreeMap<DeviceId, DeviceClient> {
        &self.devices
    }

    pub fn device_mut(&mut self, id: DeviceId) -> Option<&mut DeviceClient> {
        self.devices.get_mut(&id)
    }

    pub fn scheduler_mut(&mut self) -> &mut Scheduler {
        &mut self.scheduler
    }

    pub fn trace(&self) -> &ScenarioTrace {
        &self.trace
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn tampered(&self) -> u64 {
        self.tampered
    }

    /// Ticks at which the workload submitted each transaction.
    pub fn submissions(&self) -> &BTreeMap<Digest, u64> {
        &self.submissions
    }

    /// Lowest-id validator configured honest; its chain is the reference.
    pub fn reference(&self) -> &ValidatorNode {
        self.validators
            .iter()
            .find(|v| v.behavior() == Behavior::Honest)
            .unwrap_or(&self.validators[0])
    }

    pub fn inject_fault(&mut self, actor: ActorId, behavior: Behavior) -> Result<(), SimError> {
        match actor {
            ActorId::Validator(v) => match self.validators.get_mut(v.0 as usize) {
                Some(node) => {
                    node.set_behavior(behavior);
                    Ok(())
                }
                None => Err(SimError::UnknownActor(actor)),
            },
            _ => Err(SimError::UnknownActor(actor)),
        }
    }

    fn push(&mut self, time: u64, event: Event) {
        self.queue.insert((time, self.seq), event);
        self.seq += 1;
    }

    /// Routes outbound messages through the adversary's drop and tamper rules.
    pub fn send(&mut self, from: ActorId, outbound: Vec<Outbound>) {
        for Outbound { to, mut msg } in outbound {
            if !msg.is_physical() {
                let drop_p: Vec<f64> = self.config.drop.iter().filter(|r| r.matches(&msg)).map(|r| r.probability).collect();
                if drop_p.into_iter().any(|p| self.network_rng.chance(p)) {
                    self.dropped += 1;
                    continue;
                }
                let tamper_p: Vec<f64> =
                    self.config.tamper.iter().filter(|r| r.matches(&msg)).map(|r| r.probability).collect();
                if tamper_p.into_iter().any(|p| self.network_rng.chance(p)) {
                    tamper(&mut msg);
                    self.tampered += 1;
                }
            }
            let at = self.now + self.config.message_delay;
            self.push(
                at,
                Event {
                    target: to,
                    payload: Payload::Deliver { from, msg },
                },
            );
        }
    }

    /// Workload submission of `tx` to every validator.
    pub fn submit_from_workload(&mut self, tx: Transaction) {
        self.submissions.entry(tx.digest()).or_insert(self.now);
        let out = (0..self.validators.len() as u32)
            .map(|i| Outbound {
                to: ActorId::Validator(ValidatorId(i)),
                msg: Message::Submit {
                    tx: tx.clone(),
                    relay: false,
                },
            })
            .collect();
        self.send(ActorId::Workload, out);
    }

    /// Runs a device action outside the event loop (for example starting
    /// enrollment) and routes what it sends.
    pub fn with_device<F>(&mut self, id: DeviceId, f: F) -> Result<(), SimError>
    where
        F: FnOnce(&mut DeviceClient, &mut Vec<Outbound>),
    {
        let mut out = Vec::new();
        let client = self
            .devices
            .get_mut(&id)
            .ok_or(SimError::UnknownActor(ActorId::Device(id)))?;
        f(client, &mut out);
        self.send(ActorId::Device(id), out);
        Ok(())
    }

    /// Starts the next round and processes every event up to its end.
    pub fn step_round(&mut self) {
        let round = self.round;
        let start = round * self.config.round_ticks;
        self.now = self.now.max(start);
        let registry = self.reference().state().registry().clone();
        self.scheduler.set_registry(registry);
        for i in 0..self.validators.len() as u32 {
            self.push(
                start,
                Event {
                    target: ActorId::Validator(ValidatorId(i)),
                    payload: Payload::Wake(round),
                },
            );
        }
        let ids: Vec<DeviceId> = self.devices.keys().copied().collect();
        for d in ids {
            self.push(
                start + self.config.device_wake_offset,
                Event {
                    target: ActorId::Device(d),
                    payload: Payload::Wake(round),
                },
            );
        }
        self.round += 1;
        self.run_until(self.round * self.config.round_ticks);
    }

    pub fn run_rounds(&mut self, n: u64) {
        for _ in 0..n {
            self.step_round();
        }
    }

    /// Processes every event scheduled before `end`.
    pub fn run_until(&mut self, end: u64) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 >= end {
                break;
            }
            let ((time, seq), event) = entry.remove_entry();
            self.now = time;
            self.dispatch(time, seq, event);
        }
        self.now = self.now.max(end);
    }

    fn dispatch(&mut self, time: u64, seq: u64, event: Event) {
        if self.record_trace {
            let (kind, digest) = match &event.payload {
                Payload::Wake(r) => ("wake".to_string(), json_digest(r)),
                Payload::Deliver { from, msg } => (msg.kind().to_string(), json_digest(&(from, msg))),
            };
            self.trace.lines.push(TraceLine {
                t: time,
                seq,
                to: event.target.to_string(),
                kind,
                digest: digest.to_hex(),
            });
        }
        let target = event.target;
        let node_event = match event.payload {
            Payload::Wake(r) => NodeEvent::RoundStart(r),
            Payload::Deliver { from, msg } => NodeEvent::Deliver { from, msg },
        };
        let out = match target {
            ActorId::Validator(v) => match self.validators.get_mut(v.0 as usize) {
                Some(node) => node.handle(time, node_event),
                None => Vec::new(),
            },
            ActorId::Device(d) => match self.devices.get_mut(&d) {
                Some(client) => client.handle(time, node_event),
                None => Vec::new(),
            },
            ActorId::Scheduler => match node_event {
                NodeEvent::Deliver { msg, .. } => self.scheduler.handle(msg),
                NodeEvent::RoundStart(_) => Vec::new(),
            },
            ActorId::Workload => Vec::new(),
        };
        self.send(target, out);
    }

    /// Runs the next round and reports the block the reference validator
    /// finalized in it.
    pub fn propose_and_commit(&mut self) -> Result<Block, LedgerError> {
        let before = self.reference().height();
        let round = self.round;
        self.step_round();
        let node = self.reference();
        if node.height() > before {
            Ok(node.chain()[before as usize].clone())
        } else {
            let quorum = crate::ledger::ValidatorSet::quorum_for(self.validators.len());
            let signatures = self
                .validators
                .iter()
                .filter(|v| v.behavior() != Behavior::Silent)
                .count();
            Err(LedgerError::NoQuorum {
                round,
                signatures,
                quorum,
            })
        }
    }

    /// Finalization tick on the reference chain for every transaction
    /// digest and for every request whose result was finalized.
    pub fn finalization_samples(&self) -> (BTreeMap<Digest, u64>, BTreeMap<Digest, u64>) {
        let node = self.reference();
        let mut txs = BTreeMap::new();
        let mut results = BTreeMap::new();
        for (block, tick) in node.chain().iter().zip(node.commit_ticks()) {
            for tx in &block.transactions {
                txs.insert(tx.digest(), *tick);
                if let TxPayload::AttResult(r) = &tx.payload {
                    results.insert(r.request_hash, *tick);
                }
            }
        }
        (txs, results)
    }
}
