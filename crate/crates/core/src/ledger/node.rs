//! Validator actor. Each PoA round has a designated proposer; inside a round
//! validators prevote and then precommit, locking on a block once they see a
//! quorum of prevotes for it. A block is final with a quorum of precommits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::{merkle_prove, Digest};
use crate::crypto::{PublicKey, SeededRng, Signature, SigningKeyPair, SharePublic};
use crate::ids::{DeviceId, ValidatorId};
use crate::protocol::{CommonVerificationResult, Verdict};
use crate::simnet::{ActorId, Message};

use super::{
    tx_root, vote_message, ApplyOutcome, Block, BlockHeader, CommitCertificate, InclusionProof, LedgerState,
    RejectReason, Submitter, Transaction, TxPayload, ValidatorSet, VoteKind,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Sends nothing at all.
    Silent,
    /// Proposes blocks carrying fabricated results and answers queries with
    /// forged proofs.
    ForgeResults,
    /// Proposes conflicting blocks to different validators and votes for
    /// everything it sees.
    Equivocate,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: ValidatorId,
    pub keys: SigningKeyPair,
    pub validators: ValidatorSet,
    /// User transactions per block; emitted results ride outside the limit.
    pub capacity: usize,
    pub behavior: Behavior,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub kind: VoteKind,
    pub height: u64,
    pub round: u64,
    pub block: Digest,
    pub validator: ValidatorId,
    pub signature: Signature,
}

impl Vote {
    fn sign(kind: VoteKind, height: u64, round: u64, block: Digest, id: ValidatorId, keys: &SigningKeyPair) -> Self {
        Self {
            kind,
            height,
            round,
            block,
            validator: id,
            signature: keys.sign(vote_message(kind, height, round, &block)),
        }
    }
}

/// Prevotes from an earlier round justifying a re-proposal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolCertificate {
    pub round: u64,
    pub signatures: Vec<(ValidatorId, Signature)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCandidate {
    pub round: u64,
    pub block: Block,
    pub pol: Option<PolCertificate>,
}

#[derive(Clone, Debug)]
pub enum NodeEvent {
    RoundStart(u64),
    Deliver { from: ActorId, msg: Message },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub to: ActorId,
    pub msg: Message,
}

type VoteBook = BTreeMap<(VoteKind, u64), BTreeMap<Digest, BTreeMap<ValidatorId, Signature>>>;

pub struct ValidatorNode {
    id: ValidatorId,
    keys: SigningKeyPair,
    set: ValidatorSet,
    capacity: usize,
    behavior: Behavior,
    rng: SeededRng,

    state: LedgerState,
    genesis_hash: Digest,
    chain: Vec<Block>,
    commit_ticks: Vec<u64>,
    tx_index: BTreeMap<Digest, (usize, usize)>,
    result_index: BTreeMap<Digest, (usize, usize)>,
    mempool: BTreeMap<Digest, (u64, Transaction)>,
    rejected: Vec<(Digest, RejectReason)>,

    round: u64,
    locked: Option<(u64, Digest)>,
    valid: Option<(u64, Digest)>,
    candidates: BTreeMap<Digest, Block>,
    executed: BTreeMap<Digest, Option<LedgerState>>,
    votes: VoteBook,
    prevoted: BTreeSet<u64>,
    precommitted: BTreeSet<u64>,
    sync_asked: BTreeSet<(ValidatorId, u64)>,
    forge_counter: u64,
}

impl ValidatorNode {
    pub fn new(config: NodeConfig, genesis: LedgerState) -> Self {
        let genesis_hash = genesis.state_root();
        let label = format!("validator/{}", config.id.0);
        Self {
            id: config.id,
            keys: config.keys,
            set: config.validators,
            capacity: config.capacity,
            behavior: config.behavior,
            rng: SeededRng::for_actor(config.seed, &label),
            state: genesis,
            genesis_hash,
            chain: Vec::new(),
            commit_ticks: Vec::new(),
            tx_index: BTreeMap::new(),
            result_index: BTreeMap::new(),
            mempool: BTreeMap::new(),
            rejected: Vec::new(),
            round: 0,
            locked: None,
            valid: None,
            candidates: BTreeMap::new(),
            executed: BTreeMap::new(),
            votes: BTreeMap::new(),
            prevoted: BTreeSet::new(),
            precommitted: BTreeSet::new(),
            sync_asked: BTreeSet::new(),
            forge_counter: 0,
        }
    }

    pub fn id(&self) -> ValidatorId {
        self.id
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn set_behavior(&mut self, behavior: Behavior) {
        self.behavior = behavior;
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    /// Tick at which each height was committed locally.
    pub fn commit_ticks(&self) -> &[u64] {
        &self.commit_ticks
    }

    pub fn height(&self) -> u64 {
        self.chain.len() as u64
    }

    pub fn genesis_hash(&self) -> Digest {
        self.genesis_hash
    }

    pub fn mempool_contains(&self, digest: &Digest) -> bool {
        self.mempool.contains_key(digest)
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn rejected(&self) -> &[(Digest, RejectReason)] {
        &self.rejected
    }

    /// Finalized transaction lookup, with an inclusion proof.
    pub fn query_tx(&self, digest: &Digest) -> Option<InclusionProof> {
        let (h, i) = self.tx_index.get(digest)?;
        self.chain[*h].prove(*i)
    }

    /// The finalized result for a request, with its inclusion proof.
    pub fn query_result(&self, request_hash: &Digest) -> Option<(CommonVerificationResult, InclusionProof)> {
        let (h, i) = self.result_index.get(request_hash)?;
        let proof = self.chain[*h].prove(*i)?;
        match &proof.transaction.payload {
            TxPayload::AttResult(r) => Some((r.clone(), proof)),
            _ => None,
        }
    }

    fn next_height(&self) -> u64 {
        self.chain.len() as u64 + 1
    }

    fn last_hash(&self) -> Digest {
        self.chain.last().map(Block::hash).unwrap_or(self.genesis_hash)
    }

    fn broadcast(&self, msg: Message, out: &mut Vec<Outbound>) {
        for i in 0..self.set.len() as u32 {
            if i != self.id.0 {
                out.push(Outbound {
                    to: ActorId::Validator(ValidatorId(i)),
                    msg: msg.clone(),
                });
            }
        }
    }

    pub fn handle(&mut self, now: u64, event: NodeEvent) -> Vec<Outbound> {
        let mut out = Vec::new();
        if self.behavior == Behavior::Silent {
            return out;
        }
        match event {
            NodeEvent::RoundStart(round) => self.on_round_start(now, round, &mut out),
            NodeEvent::Deliver { from, msg } => self.on_message(now, from, msg, &mut out),
        }
        out
    }

    fn on_message(&mut self, now: u64, from: ActorId, msg: Message, out: &mut Vec<Outbound>) {
        match msg {
            Message::Submit { tx, relay } => {
                if let ActorId::Device(d) = from {
                    out.push(Outbound {
                        to: from,
                        msg: Message::SubmitAck { tx: tx.digest() },
                    });
                    let _ = d;
                }
                if self.admit(now, tx.clone()) && relay {
                    self.broadcast(Message::Gossip { tx }, out);
                }
            }
            Message::Gossip { tx } => {
                self.admit(now, tx);
            }
            Message::QueryTx { digest } => {
                let proof = match self.behavior {
                    Behavior::ForgeResults => {
                        let forged = self.forged_tx_for(&digest);
                        Some(self.forge_proof(forged))
                    }
                    _ => self.query_tx(&digest),
                };
                out.push(Outbound {
                    to: from,
                    msg: Message::QueryResponse { key: digest, proof },
                });
            }
            Message::QueryResult { request_hash } => {
                let proof = match self.behavior {
                    Behavior::ForgeResults => Some(self.forge_result_proof(&request_hash)),
                    _ => self.query_result(&request_hash).map(|(_, p)| p),
                };
                out.push(Outbound {
                    to: from,
                    msg: Message::QueryResponse {
                        key: request_hash,
                        proof,
                    },
                });
            }
            Message::Proposal(candidate) => {
                if let ActorId::Validator(sender) = from {
                    self.on_proposal(sender, candidate, now, out);
                }
            }
            Message::Vote(vote) => self.on_vote(from, vote, now, out),
            Message::Decided(block) => {
                if let ActorId::Validator(sender) = from {
                    self.on_decided(sender, block, now, out);
                }
            }
            Message::SyncRequest { height } => {
                if from == ActorId::Validator(self.id) {
                    return;
                }
                let start = height.max(1) as usize - 1;
                for block in self.chain.iter().skip(start).take(8) {
                    out.push(Outbound {
                        to: from,
                        msg: Message::Decided(block.clone()),
                    });
                }
            }
            Message::WitnessRequest { device, scheme, public_key } => {
                let key = match self.behavior {
                    Behavior::Honest | Behavior::Silent => public_key,
                    // A compromised witness vouches for a key it chose.
                    _ => PublicKey(self.rng.bytes()),
                };
                let statement =
                    crate::enrollment::WitnessStatement::sign(self.id, &self.keys, device, &scheme, key);
                out.push(Outbound {
                    to: from,
                    msg: Message::Witness(statement),
                });
            }
            _ => {}
        }
    }

    /// Mempool admission: authorization against the current state and
    /// dedup by digest.
    fn admit(&mut self, now: u64, tx: Transaction) -> bool {
        let digest = tx.digest();
        if self.mempool.contains_key(&digest) || self.state.contains_tx(&digest) {
            return false;
        }
        if let Err(reason) = self.state.check_authorization(&tx) {
            self.rejected.push((digest, reason));
            return false;
        }
        self.mempool.insert(digest, (now, tx));
        true
    }

    fn on_round_start(&mut self, now: u64, round: u64, out: &mut Vec<Outbound>) {
        self.round = round;
        if self.set.proposer_for(round) != self.id {
            return;
        }
        match self.behavior {
            Behavior::Honest => {
                let candidate = match self.valid {
                    Some((vr, hash)) if self.candidates.contains_key(&hash) => BlockCandidate {
                        round,
                        block: self.candidates[&hash].clone(),
                        pol: Some(PolCertificate {
                            round: vr,
                            signatures: self.signatures(VoteKind::Prevote, vr, &hash),
                        }),
                    },
                    _ => BlockCandidate {
                        round,
                        block: self.build(true, self.id),
                        pol: None,
                    },
                };
                self.broadcast(Message::Proposal(candidate.clone()), out);
                self.on_proposal(self.id, candidate, now, out);
            }
            Behavior::ForgeResults => {
                let mut block = self.build(true, self.id);
                let target = Digest(self.rng.bytes());
                let forged = self.forged_result(target, DeviceId(0));
                block.transactions.push(Transaction::system(TxPayload::AttResult(forged)));
                block.header.tx_root = tx_root(&block.transactions);
                let candidate = BlockCandidate { round, block, pol: None };
                self.broadcast(Message::Proposal(candidate.clone()), out);
                self.candidates.insert(candidate.block.hash(), candidate.block.clone());
                self.cast(VoteKind::Prevote, round, candidate.block.hash(), out);
            }
            Behavior::Equivocate => {
                let a = self.build(true, self.id);
                // Same parent, different content: claim another builder.
                let other = ValidatorId((self.id.0 + 1) % self.set.len() as u32);
                let b = self.build(false, other);
                let peers: Vec<u32> = (0..self.set.len() as u32).filter(|i| *i != self.id.0).collect();
                let half = peers.len() / 2;
                for (k, i) in peers.iter().enumerate() {
                    let block = if k < half { a.clone() } else { b.clone() };
                    out.push(Outbound {
                        to: ActorId::Validator(ValidatorId(*i)),
                        msg: Message::Proposal(BlockCandidate { round, block, pol: None }),
                    });
                }
                for block in [a, b] {
                    let hash = block.hash();
                    self.candidates.insert(hash, block);
                    self.cast(VoteKind::Prevote, round, hash, out);
                    self.cast(VoteKind::Precommit, round, hash, out);
                }
            }
            Behavior::Silent => {}
        }
    }

    /// Assembles a block: all pending results plus the oldest user
    /// transactions up to capacity, executed in digest order. Transactions
    /// that fail are dropped from the mempool and recorded.
    fn build(&mut self, with_users: bool, proposer: ValidatorId) -> Block {
        let mut picked: Vec<Transaction> = self
            .state
            .pending_results()
            .map(|r| Transaction::system(TxPayload::AttResult(r.clone())))
            .collect();
        if with_users {
            let mut users: Vec<(u64, Digest)> = self
                .mempool
                .iter()
                .filter(|(d, _)| !self.state.contains_tx(d))
                .map(|(d, (t, _))| (*t, *d))
                .collect();
            users.sort();
            picked.extend(users.iter().take(self.capacity).map(|(_, d)| self.mempool[d].1.clone()));
        }
        picked.sort_by_key(Transaction::digest);
        picked.dedup_by_key(|t| t.digest());

        let mut state = self.state.clone();
        let mut accepted = Vec::with_capacity(picked.len());
        for tx in picked {
            match state.apply(&tx) {
                ApplyOutcome::Accepted { .. } => accepted.push(tx),
                ApplyOutcome::Rejected(reason) => {
                    let d = tx.digest();
                    self.mempool.remove(&d);
                    self.rejected.push((d, reason));
                }
            }
        }
        let header = BlockHeader {
            height: self.next_height(),
            parent: self.last_hash(),
            tx_root: tx_root(&accepted),
            state_root: state.state_root(),
            proposer,
        };
        let block = Block {
            header,
            transactions: accepted,
            commit: CommitCertificate::default(),
        };
        self.executed.insert(block.hash(), Some(state));
        block
    }

    /// Re-executes a candidate against the local state. Cached per hash.
    fn validate(&mut self, block: &Block) -> bool {
        let hash = block.hash();
        if let Some(r) = self.executed.get(&hash) {
            return r.is_some();
        }
        let result = self.execute(block);
        let ok = result.is_some();
        self.executed.insert(hash, result);
        ok
    }

    fn execute(&self, block: &Block) -> Option<LedgerState> {
        let h = &block.header;
        if h.height != self.next_height()
            || h.parent != self.last_hash()
            || self.set.key(h.proposer).is_none()
            || h.tx_root != tx_root(&block.transactions)
        {
            return None;
        }
        let digests: Vec<Digest> = block.transactions.iter().map(Transaction::digest).collect();
        if digests.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        let users = block
            .transactions
            .iter()
            .filter(|t| t.submitter != Submitter::System)
            .count();
        if users > self.capacity {
            return None;
        }
        let mut state = self.state.clone();
        for tx in &block.transactions {
            if !state.apply(tx).is_accepted() {
                return None;
            }
        }
        (state.state_root() == h.state_root).then_some(state)
    }

    fn signatures(&self, kind: VoteKind, round: u64, hash: &Digest) -> Vec<(ValidatorId, Signature)> {
        self.votes
            .get(&(kind, round))
            .and_then(|m| m.get(hash))
            .map(|m| m.iter().map(|(id, s)| (*id, *s)).collect())
            .unwrap_or_default()
    }

    fn has_voted(&self, kind: VoteKind, round: u64, hash: &Digest) -> bool {
        self.votes
            .get(&(kind, round))
            .and_then(|m| m.get(hash))
            .is_some_and(|m| m.contains_key(&self.id))
    }

    fn cast(&mut self, kind: VoteKind, round: u64, hash: Digest, out: &mut Vec<Outbound>) {
        let vote = Vote::sign(kind, self.next_height(), round, hash, self.id, &self.keys);
        match kind {
            VoteKind::Prevote => self.prevoted.insert(round),
            VoteKind::Precommit => self.precommitted.insert(round),
        };
        self.broadcast(Message::Vote(vote.clone()), out);
        self.record(vote);
    }

    fn record(&mut self, vote: Vote) {
        self.votes
            .entry((vote.kind, vote.round))
            .or_default()
            .entry(vote.block)
            .or_default()
            .entry(vote.validator)
            .or_insert(vote.signature);
    }

    fn on_proposal(&mut self, sender: ValidatorId, c: BlockCandidate, now: u64, out: &mut Vec<Outbound>) {
        if sender != self.set.proposer_for(c.round) {
            return;
        }
        let height = c.block.header.height;
        if height > self.next_height() {
            self.request_sync(sender, out);
            return;
        }
        if height != self.next_height() || !self.validate(&c.block) {
            return;
        }
        let hash = c.block.hash();
        self.candidates.insert(hash, c.block.clone());

        let pol_round = match &c.pol {
            Some(pol) => {
                let msg = vote_message(VoteKind::Prevote, height, pol.round, &hash);
                if pol.round >= c.round || self.set.count_valid(&msg, &pol.signatures) < self.set.quorum {
                    return;
                }
                for (id, sig) in &pol.signatures {
                    self.record(Vote {
                        kind: VoteKind::Prevote,
                        height,
                        round: pol.round,
                        block: hash,
                        validator: *id,
                        signature: *sig,
                    });
                }
                Some(pol.round)
            }
            None => None,
        };

        if self.behavior == Behavior::Equivocate {
            if !self.has_voted(VoteKind::Prevote, c.round, &hash) {
                self.cast(VoteKind::Prevote, c.round, hash, out);
            }
            if !self.has_voted(VoteKind::Precommit, c.round, &hash) {
                self.cast(VoteKind::Precommit, c.round, hash, out);
            }
            self.progress(now, out);
            return;
        }

        if c.round == self.round && !self.prevoted.contains(&c.round) {
            let unlocked = match (self.locked, pol_round) {
                (None, _) => true,
                (Some((_, lb)), _) if lb == hash => true,
                (Some((lr, _)), Some(vr)) => lr <= vr,
                (Some(_), None) => false,
            };
            if unlocked {
                self.cast(VoteKind::Prevote, c.round, hash, out);
            }
        }
        self.progress(now, out);
    }

    fn on_vote(&mut self, from: ActorId, vote: Vote, now: u64, out: &mut Vec<Outbound>) {
        if from != ActorId::Validator(vote.validator) {
            return;
        }
        let Some(key) = self.set.key(vote.validator) else { return };
        let msg = vote_message(vote.kind, vote.height, vote.round, &vote.block);
        if !crate::crypto::verify(key, &msg, &vote.signature) {
            return;
        }
        let next = self.next_height();
        if vote.height < next {
            // Late precommit for a block we already hold: widen its certificate.
            if vote.kind == VoteKind::Precommit {
                let block = &mut self.chain[vote.height as usize - 1];
                if block.hash() == vote.block
                    && block.commit.round == vote.round
                    && !block.commit.signatures.iter().any(|(id, _)| *id == vote.validator)
                {
                    block.commit.signatures.push((vote.validator, vote.signature));
                    block.commit.signatures.sort_by_key(|(id, _)| *id);
                }
            }
            return;
        }
        if vote.height > next {
            self.request_sync(vote.validator, out);
            return;
        }
        if self.behavior == Behavior::Equivocate
            && vote.kind == VoteKind::Prevote
            && self.candidates.contains_key(&vote.block)
            && !self.has_voted(VoteKind::Precommit, vote.round, &vote.block)
        {
            self.cast(VoteKind::Precommit, vote.round, vote.block, out);
        }
        self.record(vote);
        self.progress(now, out);
    }

    /// Applies the locking and commit rules to the votes gathered so far.
    fn progress(&mut self, now: u64, out: &mut Vec<Outbound>) {
        let quorum = self.set.quorum;
        let r = self.round;
        if let Some(by_block) = self.votes.get(&(VoteKind::Prevote, r)) {
            let polka = by_block
                .iter()
                .find(|(h, sigs)| sigs.len() >= quorum && self.candidates.contains_key(*h))
                .map(|(h, _)| *h);
            if let Some(hash) = polka {
                if self.valid.is_none_or(|(vr, _)| vr < r) {
                    self.valid = Some((r, hash));
                }
                if self.behavior != Behavior::Equivocate && !self.precommitted.contains(&r) {
                    self.locked = Some((r, hash));
                    self.cast(VoteKind::Precommit, r, hash, out);
                }
            }
        }

        let decided = self
            .votes
            .iter()
            .filter(|((kind, _), _)| *kind == VoteKind::Precommit)
            .flat_map(|((_, round), m)| m.iter().map(move |(h, sigs)| (*round, *h, sigs)))
            .find(|(_, _, sigs)| sigs.len() >= quorum)
            .map(|(round, h, sigs)| (round, h, sigs.keys().copied().collect::<Vec<_>>()));
        if let Some((round, hash, signers)) = decided {
            match self.candidates.get(&hash).cloned() {
                Some(mut block) => {
                    block.commit = CommitCertificate {
                        round,
                        signatures: self.signatures(VoteKind::Precommit, round, &hash),
                    };
                    self.commit(now, block, out);
                }
                None => {
                    for v in signers {
                        self.request_sync(v, out);
                    }
                }
            }
        }
    }

    fn request_sync(&mut self, peer: ValidatorId, out: &mut Vec<Outbound>) {
        if peer == self.id || !self.sync_asked.insert((peer, self.next_height())) {
            return;
        }
        out.push(Outbound {
            to: ActorId::Validator(peer),
            msg: Message::SyncRequest {
                height: self.next_height(),
            },
        });
    }

    fn on_decided(&mut self, sender: ValidatorId, block: Block, now: u64, out: &mut Vec<Outbound>) {
        let next = self.next_height();
        if block.header.height > next {
            self.request_sync(sender, out);
            return;
        }
        if block.header.height < next || !block.is_finalized(&self.set) || !self.validate(&block) {
            return;
        }
        self.candidates.insert(block.hash(), block.clone());
        self.commit(now, block, out);
    }

    fn commit(&mut self, now: u64, block: Block, out: &mut Vec<Outbound>) {
        let hash = block.hash();
        let Some(Some(state)) = self.executed.remove(&hash) else {
            return;
        };
        let mut block = block;
        block.commit.signatures.sort_by_key(|(id, _)| *id);
        let h = self.chain.len();
        for (i, tx) in block.transactions.iter().enumerate() {
            let d = tx.digest();
            self.mempool.remove(&d);
            self.tx_index.insert(d, (h, i));
            if let TxPayload::AttResult(r) = &tx.payload {
                self.result_index.insert(r.request_hash, (h, i));
            }
        }
        self.state = state;
        self.chain.push(block.clone());
        self.commit_ticks.push(now);

        self.locked = None;
        self.valid = None;
        self.candidates.clear();
        self.executed.clear();
        self.votes.clear();
        self.prevoted.clear();
        self.precommitted.clear();
        self.sync_asked.clear();

        if self.behavior != Behavior::ForgeResults {
            self.forward_requests(&block, out);
        }
        self.broadcast(Message::Decided(block), out);
    }

    /// Hands each newly finalized request to its named target, or to the
    /// scheduler when no target is named.
    fn forward_requests(&self, block: &Block, out: &mut Vec<Outbound>) {
        for (i, tx) in block.transactions.iter().enumerate() {
            if let TxPayload::AttRequest(request) = &tx.payload {
                let Some(proof) = block.prove(i) else { continue };
                let to = match request.lst.target_device {
                    Some(d) => ActorId::Device(d),
                    None => ActorId::Scheduler,
                };
                out.push(Outbound {
                    to,
                    msg: Message::Forward {
                        request: request.clone(),
                        proof,
                    },
                });
            }
        }
    }

    fn forged_result(&mut self, request_hash: Digest, prover: DeviceId) -> CommonVerificationResult {
        CommonVerificationResult {
            request_hash,
            prover_id: prover,
            verdict: Verdict::Satisfied,
            witness_map: Vec::new(),
            missing: Vec::new(),
            ka_public_prover: Some(SharePublic(self.rng.bytes())),
            prover_measurement: Some(Digest(self.rng.bytes())),
        }
    }

    fn forged_tx_for(&mut self, _digest: &Digest) -> Transaction {
        let target = Digest(self.rng.bytes());
        let r = self.forged_result(target, DeviceId(0));
        Transaction::system(TxPayload::AttResult(r))
    }

    fn forge_result_proof(&mut self, request_hash: &Digest) -> InclusionProof {
        let prover = self
            .state
            .request(request_hash)
            .and_then(|e| e.answered_by.or(e.request.lst.target_device))
            .unwrap_or(DeviceId(0));
        let forged = self.forged_result(*request_hash, prover);
        self.forge_proof(Transaction::system(TxPayload::AttResult(forged)))
    }

    /// Rotates through ways of dressing up a transaction that is not on the
    /// finalized chain.
    fn forge_proof(&mut self, tx: Transaction) -> InclusionProof {
        let strategy = self.forge_counter % 5;
        self.forge_counter += 1;
        let leaves = vec![tx.digest()];
        let fake_header = BlockHeader {
            height: self.next_height(),
            parent: self.last_hash(),
            tx_root: tx_root(std::slice::from_ref(&tx)),
            state_root: Digest(self.rng.bytes()),
            proposer: self.id,
        };
        let own_precommit = |round: u64, header: &BlockHeader, keys: &SigningKeyPair| {
            keys.sign(vote_message(VoteKind::Precommit, header.height, round, &header.hash()))
        };
        let merkle = merkle_prove(&leaves, 0).expect("one leaf");
        match strategy {
            // The forger's own signature, repeated up to quorum.
            0 => {
                let sig = own_precommit(self.round, &fake_header, &self.keys);
                InclusionProof {
                    commit: CommitCertificate {
                        round: self.round,
                        signatures: vec![(self.id, sig); self.set.quorum],
                    },
                    header: fake_header,
                    merkle,
                    transaction: tx,
                }
            }
            // Random bytes claiming to be everyone's signatures.
            1 => {
                let signatures = (0..self.set.len() as u32)
                    .map(|i| (ValidatorId(i), Signature(self.rng.bytes())))
                    .collect();
                InclusionProof {
                    commit: CommitCertificate {
                        round: self.round,
                        signatures,
                    },
                    header: fake_header,
                    merkle,
                    transaction: tx,
                }
            }
            // A genuine finalized header with a transaction outside its tree.
            2 if !self.chain.is_empty() => {
                let block = self.chain.iter().rev().find(|b| !b.transactions.is_empty());
                match block.and_then(|b| b.prove(0)) {
                    Some(mut p) => {
                        p.transaction = tx;
                        p
                    }
                    None => self.forge_proof_unfinalized(fake_header, merkle, tx),
                }
            }
            // A genuine result with its verdict or key swapped.
            3 => {
                let genuine = self.result_index.keys().next().copied();
                match genuine.and_then(|h| self.query_result(&h)) {
                    Some((mut r, mut p)) => {
                        r.verdict = Verdict::Satisfied;
                        r.ka_public_prover = Some(SharePublic(self.rng.bytes()));
                        p.transaction.payload = TxPayload::AttResult(r);
                        p
                    }
                    None => self.forge_proof_unfinalized(fake_header, merkle, tx),
                }
            }
            _ => self.forge_proof_unfinalized(fake_header, merkle, tx),
        }
    }

    /// Prevote signatures presented as a commit certificate.
    fn forge_proof_unfinalized(
        &mut self,
        header: BlockHeader,
        merkle: crate::codec::MerkleProof,
        tx: Transaction,
    ) -> InclusionProof {
        let sig = self
            .keys
            .sign(vote_message(VoteKind::Prevote, header.height, self.round, &header.hash()));
        InclusionProof {
            commit: CommitCertificate {
                round: self.round,
                signatures: vec![(self.id, sig)],
            },
            header,
            merkle,
            transaction: tx,
        }
    }
}
