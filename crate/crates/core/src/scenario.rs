//! Scenario configuration, the runner behind `run`, `perf` and `extend`,
//! and the assertions checked after a run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode, Digest};
use crate::crypto::{ka_generate, keygen, PublicKey, SeededRng, SigningKeyPair};
use crate::enrollment::{enroll_via_vendor, EnrollmentPath};
use crate::ids::{AttributeId, DeviceId, TeeSchemeTag, ValidatorId};
use crate::ledger::{
    Behavior, GenesisConfig, GovernanceOp, LedgerState, NodeConfig, Submitter, Transaction, Transfer, TxPayload,
    ValidatorNode, ValidatorSet,
};
use crate::protocol::{
    AttestTask, AttestationRequest, ClientConfig, DeviceClient, ProtocolMode, SubmissionMode,
};
use crate::registry::RequirementList;
use crate::scheduler::{CapabilityAdvertisement, Scheduler};
use crate::simnet::{collect_metrics, Message, AdversaryConfig, MetricSamples, Metrics, ScenarioTrace, SimConfig, Simulation};
use crate::tee::{self, ReportField, ReportLayout, TeeError, TeePlatform, VendorMock};

pub const CSV_HEADER: &str = "rate,mode,mean_latency,p95_latency,throughput";

const CODE_IDENTITY: &[u8] = b"dhtee-client-1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Config { line: usize, column: usize, message: String },
    #[error(transparent)]
    Tee(#[from] TeeError),
}

impl ScenarioError {
    fn at(source: Option<&str>, needle: &str, message: String) -> Self {
        let line = source
            .and_then(|s| s.lines().position(|l| l.contains(needle)))
            .map_or(1, |i| i + 1);
        ScenarioError::Config {
            line,
            column: 1,
            message,
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Config {
        line: e.line().max(1),
        column: e.column().max(1),
        message: e.to_string(),
    })
}

fn default_validators() -> usize {
    4
}
fn default_capacity() -> usize {
    8
}
fn default_rounds() -> u64 {
    40
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub round_ticks: u64,
    pub message_delay: u64,
    pub device_wake_offset: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            round_ticks: 5,
            message_delay: 1,
            device_wake_offset: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    pub submission: SubmissionMode,
    pub poll_interval_rounds: u64,
    pub timeout_rounds: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::Mutual,
            submission: SubmissionMode::Multicast,
            poll_interval_rounds: 1,
            timeout_rounds: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VendorFixture {
    pub name: String,
    /// Serve a root → platform → device chain instead of signing directly.
    #[serde(default)]
    pub chain: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeFixture {
    pub tag: String,
    pub domain: String,
    pub field_order: Vec<ReportField>,
    pub vocabulary: Vec<String>,
    pub vendor: VendorFixture,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFixture {
    /// Extra attributes as `scheme:label`.
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub equivalences: Vec<[String; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub id: u32,
    pub scheme: String,
    pub enrollment: EnrollmentPath,
    /// Labels from the device's own scheme vocabulary.
    pub attributes: Vec<String>,
    /// `scheme:label` requirements used when attesting a peer back.
    #[serde(default)]
    pub reverse_requirements: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestationConfig {
    pub requester: u32,
    /// Omit to let the scheduler choose.
    #[serde(default)]
    pub target: Option<u32>,
    pub requirements: Vec<String>,
    #[serde(default)]
    pub start_round: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default)]
    pub channels: Vec<[u32; 2]>,
    #[serde(default)]
    pub no_channels: Vec<[u32; 2]>,
    #[serde(default)]
    pub enrolled: Vec<u32>,
    #[serde(default)]
    pub not_enrolled: Vec<u32>,
    #[serde(default)]
    pub min_height: u64,
    #[serde(default = "default_true")]
    pub safety: bool,
}

impl Default for Expectations {
    fn default() -> Self {
        Self {
            channels: Vec::new(),
            no_channels: Vec::new(),
            enrolled: Vec::new(),
            not_enrolled: Vec::new(),
            min_height: 0,
            safety: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_validators")]
    pub validators: usize,
    #[serde(default = "default_capacity")]
    pub block_capacity: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub schemes: Vec<SchemeFixture>,
    #[serde(default)]
    pub registry: RegistryFixture,
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub attestations: Vec<AttestationConfig>,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default)]
    pub expect: Expectations,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let config: Self = parse(text)?;
        config.validate(Some(text))?;
        Ok(config)
    }

    pub fn validate(&self, source: Option<&str>) -> Result<(), ScenarioError> {
        let err = |needle: &str, msg: String| ScenarioError::at(source, needle, msg);
        if self.validators == 0 {
            return Err(err("\"validators\"", "validators must be at least 1".into()));
        }
        if self.block_capacity == 0 {
            return Err(err("\"block_capacity\"", "block_capacity must be at least 1".into()));
        }
        if self.timing.round_ticks < 3 * self.timing.message_delay.max(1) + 1
            || self.timing.device_wake_offset >= self.timing.round_ticks
        {
            return Err(err(
                "\"timing\"",
                "round_ticks must exceed three message delays and the device wake offset".into(),
            ));
        }
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id) {
                return Err(err(&format!("\"id\": {}", d.id), format!("duplicate device id {}", d.id)));
            }
        }
        for f in &self.adversary.faulty {
            if f.validator as usize >= self.validators {
                return Err(err(
                    "\"faulty\"",
                    format!("faulty validator {} is outside the set of {}", f.validator, self.validators),
                ));
            }
        }
        for a in &self.attestations {
            for id in std::iter::once(a.requester).chain(a.target) {
                if !ids.contains(&id) {
                    return Err(err("\"attestations\"", format!("attestation names unknown device {id}")));
                }
            }
        }
        for r in self.adversary.drop.iter().chain(&self.adversary.tamper) {
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(err("\"probability\"", format!("probability {} outside [0, 1]", r.probability)));
            }
            if let Some(k) = r.kinds.iter().find(|k| !Message::KINDS.contains(&k.as_str())) {
                return Err(err(k, format!("unknown message kind {k:?}")));
            }
        }
        Ok(())
    }
}

/// Splits `scheme:label`.
fn attr_ref(s: &str) -> Option<(TeeSchemeTag, &str)> {
    s.split_once(':').map(|(a, b)| (TeeSchemeTag::new(a), b))
}

fn resolve(state: &LedgerState, s: &str, source: Option<&str>) -> Result<AttributeId, ScenarioError> {
    let (scheme, label) = attr_ref(s)
        .ok_or_else(|| ScenarioError::at(source, s, format!("attribute reference {s:?} is not scheme:label")))?;
    state
        .registry()
        .id_of(&scheme, label)
        .map_err(|e| ScenarioError::at(source, s, e.to_string()))
}

/// Everything a simulation is built from, kept so runs can be extended.
pub struct World {
    pub sim: Simulation,
    pub admin: SigningKeyPair,
    pub vendors: BTreeMap<String, VendorMock>,
    pub scheme_vendor: BTreeMap<TeeSchemeTag, String>,
    pub layouts: BTreeMap<TeeSchemeTag, ReportLayout>,
    pub device_keys: BTreeMap<DeviceId, PublicKey>,
    pub direct: BTreeSet<DeviceId>,
    pub validator_set: ValidatorSet,
    /// Ledger state every validator started from.
    pub genesis: LedgerState,
    pub seed: u64,
    pub protocol: ProtocolConfig,
}

struct Genesis {
    config: GenesisConfig,
    state: LedgerState,
    validator_keys: Vec<SigningKeyPair>,
    admin: SigningKeyPair,
    vendors: BTreeMap<String, VendorMock>,
    scheme_vendor: BTreeMap<TeeSchemeTag, String>,
    layouts: BTreeMap<TeeSchemeTag, ReportLayout>,
}

fn vendor_for(seed: u64, name: &str, chain: bool) -> VendorMock {
    let mut rng = SeededRng::for_actor(seed, &format!("vendor/{name}"));
    let root = rng.seed32();
    VendorMock::new(name, root, chain.then(|| rng.seed32()))
}

fn build_genesis(
    seed: u64,
    validators: usize,
    extra: &[SchemeFixture],
    registry: &RegistryFixture,
    source: Option<&str>,
) -> Result<Genesis, ScenarioError> {
    let validator_keys: Vec<SigningKeyPair> = (0..validators)
        .map(|i| keygen(SeededRng::for_actor(seed, &format!("validator-key/{i}")).seed32()))
        .collect();
    let set = ValidatorSet::new(validator_keys.iter().map(SigningKeyPair::public).collect());
    let admin = keygen(SeededRng::for_actor(seed, "admin").seed32());

    let mut schemes: Vec<(TeeSchemeTag, ReportLayout, Vec<String>, VendorFixture)> = vec![
        (
            TeeSchemeTag::new(tee::SGX_LIKE),
            tee::sgx_like_layout(),
            tee::sgx_like_vocabulary(),
            VendorFixture {
                name: "intel-like".into(),
                chain: false,
            },
        ),
        (
            TeeSchemeTag::new(tee::SEV_LIKE),
            tee::sev_like_layout(),
            tee::sev_like_vocabulary(),
            VendorFixture {
                name: "amd-like".into(),
                chain: true,
            },
        ),
    ];
    for s in extra {
        let layout = ReportLayout::new(s.domain.clone(), s.field_order.clone())
            .map_err(|e| ScenarioError::at(source, &s.tag, e.to_string()))?;
        schemes.push((TeeSchemeTag::new(&s.tag), layout, s.vocabulary.clone(), s.vendor.clone()));
    }

    let mut vendors = BTreeMap::new();
    let mut scheme_vendor = BTreeMap::new();
    let mut layouts = BTreeMap::new();
    for (tag, layout, _, v) in &schemes {
        vendors
            .entry(v.name.clone())
            .or_insert_with(|| vendor_for(seed, &v.name, v.chain));
        scheme_vendor.insert(tag.clone(), v.name.clone());
        layouts.insert(tag.clone(), layout.clone());
    }
    let config = GenesisConfig {
        validators: set,
        admin: admin.public(),
        vendors: vendors.iter().map(|(n, v)| (n.clone(), v.root_public())).collect(),
    };
    let mut state = LedgerState::genesis(&config);
    let gov = |op| Transaction::signed(TxPayload::Governance(op), Submitter::Admin, &admin);
    let apply = |state: &mut LedgerState, tx: Transaction, what: &str| {
        if let crate::ledger::ApplyOutcome::Rejected(r) = state.apply(&tx) {
            return Err(ScenarioError::at(source, what, format!("genesis rejected {what}: {r:?}")));
        }
        Ok(())
    };
    for (tag, layout, vocabulary, _) in schemes {
        let what = tag.as_str().to_string();
        apply(
            &mut state,
            gov(GovernanceOp::InstallScheme {
                tag,
                layout,
                vocabulary,
            }),
            &what,
        )?;
    }
    for a in &registry.attributes {
        let (scheme, label) =
            attr_ref(a).ok_or_else(|| ScenarioError::at(source, a, format!("{a:?} is not scheme:label")))?;
        apply(
            &mut state,
            gov(GovernanceOp::RegisterAttribute {
                scheme,
                label: label.to_string(),
            }),
            a,
        )?;
    }
    for [x, y] in &registry.equivalences {
        let a = resolve(&state, x, source)?;
        let b = resolve(&state, y, source)?;
        apply(&mut state, gov(GovernanceOp::DeclareEquivalence { a, b }), x)?;
    }
    Ok(Genesis {
        config,
        state,
        validator_keys,
        admin,
        vendors,
        scheme_vendor,
        layouts,
    })
}

impl World {
    fn new(
        seed: u64,
        validators: usize,
        capacity: usize,
        timing: &Timing,
        protocol: &ProtocolConfig,
        genesis: Genesis,
        adversary: &AdversaryConfig,
    ) -> Self {
        let faults: BTreeMap<u32, Behavior> = adversary.faulty.iter().map(|f| (f.validator, f.behavior)).collect();
        let nodes = genesis
            .validator_keys
            .iter()
            .enumerate()
            .map(|(i, keys)| {
                ValidatorNode::new(
                    NodeConfig {
                        id: ValidatorId(i as u32),
                        keys: keys.clone(),
                        validators: genesis.config.validators.clone(),
                        capacity,
                        behavior: faults.get(&(i as u32)).copied().unwrap_or_default(),
                        seed,
                    },
                    genesis.state.clone(),
                )
            })
            .collect();
        let mut sim_config = SimConfig::new(seed);
        sim_config.round_ticks = timing.round_ticks;
        sim_config.message_delay = timing.message_delay;
        sim_config.device_wake_offset = timing.device_wake_offset;
        sim_config.drop = adversary.drop.clone();
        sim_config.tamper = adversary.tamper.clone();
        let scheduler = Scheduler::new(adversary.scheduler.clone(), genesis.state.registry().clone());
        let _ = validators;
        Self {
            sim: Simulation::new(sim_config, nodes, scheduler),
            admin: genesis.admin,
            vendors: genesis.vendors,
            scheme_vendor: genesis.scheme_vendor,
            layouts: genesis.layouts,
            device_keys: BTreeMap::new(),
            direct: BTreeSet::new(),
            validator_set: genesis.config.validators,
            genesis: genesis.state,
            seed,
            protocol: protocol.clone(),
        }
    }

    pub fn from_config(config: &ScenarioConfig, source: Option<&str>) -> Result<Self, ScenarioError> {
        config.validate(source)?;
        let genesis = build_genesis(config.seed, config.validators, &config.schemes, &config.registry, source)?;
        let mut world = Self::new(
            config.seed,
            config.validators,
            config.block_capacity,
            &config.timing,
            &config.protocol,
            genesis,
            &config.adversary,
        );
        for d in &config.devices {
            world.add_device(d, source)?;
        }
        for a in &config.attestations {
            world.add_attestation(a, source)?;
        }
        Ok(world)
    }

    fn state(&self) -> &LedgerState {
        self.sim.reference().state()
    }

    /// Provisions a device, advertises it to the scheduler and starts its
    /// enrollment.
    pub fn add_device(&mut self, d: &DeviceConfig, source: Option<&str>) -> Result<(), ScenarioError> {
        let id = DeviceId(d.id);
        let tag = TeeSchemeTag::new(&d.scheme);
        let layout = self
            .layouts
            .get(&tag)
            .cloned()
            .ok_or_else(|| ScenarioError::at(source, &d.scheme, format!("unknown scheme {}", d.scheme)))?;
        let attributes = d
            .attributes
            .iter()
            .map(|l| {
                resolve(self.state(), &format!("{}:{l}", d.scheme), None).map_err(|e| match e {
                    ScenarioError::Config { message, .. } => ScenarioError::at(source, &format!("\"{l}\""), message),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let reverse = d
            .reverse_requirements
            .iter()
            .map(|r| resolve(self.state(), r, source))
            .collect::<Result<Vec<_>, _>>()?;
        let seed = SeededRng::for_actor(self.seed, &format!("device-key/{}", d.id)).seed32();
        let vendor_name = self.scheme_vendor[&tag].clone();
        let keys = match d.enrollment {
            EnrollmentPath::Vendor => self
                .vendors
                .get_mut(&vendor_name)
                .expect("every scheme has a vendor")
                .provision_device(id, seed),
            EnrollmentPath::Direct => keygen(seed),
        };
        self.device_keys.insert(id, keys.public());
        let platform = TeePlatform::new(id, tag.clone(), layout, keys.clone(), attributes.clone());
        let client = DeviceClient::new(
            ClientConfig {
                id,
                mode: self.protocol.mode,
                submission: self.protocol.submission,
                poll_interval_rounds: self.protocol.poll_interval_rounds.max(1),
                timeout_rounds: self.protocol.timeout_rounds,
                reverse_requirements: reverse,
                code_identity: CODE_IDENTITY.to_vec(),
                seed: self.seed,
            },
            platform,
            crate::enrollment::distribute_validator_set(true, &self.validator_set),
        );
        self.sim.add_device(client);
        self.sim.scheduler_mut().register_capabilities(CapabilityAdvertisement {
            device_id: id,
            scheme: tag.clone(),
            attributes,
        });
        match d.enrollment {
            EnrollmentPath::Vendor => {
                let tx = enroll_via_vendor(id, &tag, &keys, &self.vendors[&vendor_name])
                    .map_err(|e| ScenarioError::at(source, &d.scheme, e.to_string()))?;
                self.sim.with_device(id, |c, out| c.enroll_with(tx, out)).expect("just added");
            }
            EnrollmentPath::Direct => {
                self.direct.insert(id);
                self.sim.with_device(id, |c, out| c.enroll_direct(out)).expect("just added");
            }
        }
        Ok(())
    }

    pub fn add_attestation(&mut self, a: &AttestationConfig, source: Option<&str>) -> Result<(), ScenarioError> {
        let required = a
            .requirements
            .iter()
            .map(|r| resolve(self.state(), r, source))
            .collect::<Result<Vec<_>, _>>()?;
        let task = AttestTask {
            lst: RequirementList {
                required,
                target_device: a.target.map(DeviceId),
            },
            start_round: a.start_round,
        };
        self.sim
            .device_mut(DeviceId(a.requester))
            .ok_or_else(|| ScenarioError::at(source, "\"requester\"", format!("unknown device {}", a.requester)))?
            .add_task(task);
        Ok(())
    }

    /// Sends an admin-signed governance operation to every validator.
    pub fn govern(&mut self, op: GovernanceOp) -> Digest {
        let tx = Transaction::signed(TxPayload::Governance(op), Submitter::Admin, &self.admin);
        let d = tx.digest();
        self.sim.submit_from_workload(tx);
        d
    }

    /// Runs rounds until `done` holds on the reference state, up to `limit`.
    pub fn run_while<F: Fn(&LedgerState) -> bool>(&mut self, limit: u64, done: F) -> bool {
        for _ in 0..limit {
            if done(self.state()) {
                return true;
            }
            self.sim.step_round();
        }
        done(self.state())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Violations of the security properties; all zero in a correct run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Channels with no finalized satisfied verdict behind them.
    pub false_channels: Vec<String>,
    /// Light-verified proofs for transactions no honest chain finalized.
    pub false_accepts: Vec<String>,
    /// Directly enrolled devices whose on-chain key is not their key.
    pub bad_enrollments: Vec<String>,
    /// Heights at which two honest validators committed different blocks.
    pub forks: Vec<u64>,
}

impl SafetyReport {
    pub fn is_clean(&self) -> bool {
        self.false_channels.is_empty()
            && self.false_accepts.is_empty()
            && self.bad_enrollments.is_empty()
            && self.forks.is_empty()
    }
}

pub fn check_safety(world: &World) -> SafetyReport {
    let sim = &world.sim;
    let honest: Vec<&ValidatorNode> = sim
        .validators()
        .iter()
        .filter(|v| v.behavior() == Behavior::Honest)
        .collect();
    let reference = sim.reference();
    let state = reference.state();
    let mut report = SafetyReport::default();

    let longest = honest.iter().map(|v| v.chain().len()).max().unwrap_or(0);
    for h in 0..longest {
        let hashes: BTreeSet<Digest> = honest
            .iter()
            .filter_map(|v| v.chain().get(h).map(|b| b.hash()))
            .collect();
        if hashes.len() > 1 {
            report.forks.push(h as u64 + 1);
        }
    }

    for (id, client) in sim.devices() {
        for (peer, channel) in client.channels() {
            let backed = !channel.requests.is_empty()
                && channel.requests.iter().all(|h| {
                    let Some(result) = state.result(h) else { return false };
                    let Some(entry) = state.request(h) else { return false };
                    let requester = entry.request.requester_id;
                    result.verdict == crate::protocol::Verdict::Satisfied
                        && ((requester == *id && result.prover_id == *peer)
                            || (requester == *peer && result.prover_id == *id))
                });
            let both_ways = world.protocol.mode == ProtocolMode::OneWay || channel.requests.len() == 2;
            if !backed || !both_ways {
                report.false_channels.push(format!("{id}->{peer}"));
            }
        }
        for proof in client.accepted_proofs() {
            let h = proof.header.height as usize;
            let digest = proof.transaction.digest();
            let finalized = honest.iter().any(|v| {
                h >= 1
                    && v.chain().get(h - 1).is_some_and(|b| {
                        b.hash() == proof.header.hash() && b.transactions.iter().any(|t| t.digest() == digest)
                    })
            });
            if !finalized {
                report
                    .false_accepts
                    .push(format!("{id} accepted {} at height {h}", digest.short()));
            }
        }
    }
    for (id, key) in &world.device_keys {
        if let Some(record) = state.device(*id) {
            if record.attestation_public_key != *key {
                report.bad_enrollments.push(format!("{id}"));
            }
        }
    }
    report
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub a: DeviceId,
    pub b: DeviceId,
    pub fingerprint: Digest,
    pub keys_equal: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub trace_digest: Digest,
    pub height: u64,
    pub signatures_per_block: Vec<usize>,
    pub channels: Vec<ChannelSummary>,
    pub enrolled: Vec<DeviceId>,
    pub safety: SafetyReport,
    pub assertions: Vec<Assertion>,
    pub dropped: u64,
    pub tampered: u64,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "scenario {} seed {}: height {}, {} channel(s), trace {}\n",
            self.name,
            self.seed,
            self.height,
            self.channels.len(),
            self.trace_digest.short()
        );
        for a in &self.assertions {
            s.push_str(&format!(
                "  [{}] {}{}\n",
                if a.passed { "PASS" } else { "FAIL" },
                a.name,
                if a.detail.is_empty() {
                    String::new()
                } else {
                    format!(": {}", a.detail)
                }
            ));
        }
        s
    }
}

/// Mutual channels seen from both ends.
pub fn channel_pairs(world: &World) -> Vec<ChannelSummary> {
    let devices = world.sim.devices();
    let mut out = Vec::new();
    for (a, ca) in devices {
        for (b, ch) in ca.channels() {
            if a < b {
                let keys_equal = devices
                    .get(b)
                    .and_then(|cb| cb.channels().get(a))
                    .is_some_and(|other| other.session == ch.session);
                out.push(ChannelSummary {
                    a: *a,
                    b: *b,
                    fingerprint: ch.session.fingerprint(),
                    keys_equal,
                });
            }
        }
    }
    out
}

fn has_channel(world: &World, a: DeviceId, b: DeviceId) -> bool {
    let devices = world.sim.devices();
    devices.get(&a).is_some_and(|c| c.channels().contains_key(&b))
        || devices.get(&b).is_some_and(|c| c.channels().contains_key(&a))
}

pub fn evaluate(world: &World, name: &str, expect: &Expectations) -> ScenarioReport {
    let reference = world.sim.reference();
    let channels = channel_pairs(world);
    let safety = check_safety(world);
    let mut assertions = Vec::new();
    for [a, b] in &expect.channels {
        let (a, b) = (DeviceId(*a), DeviceId(*b));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let found = channels.iter().find(|c| c.a == lo && c.b == hi);
        assertions.push(Assertion::new(
            format!("channel {a}<->{b} with equal session keys"),
            found.is_some_and(|c| c.keys_equal),
            match found {
                Some(c) if c.keys_equal => format!("fingerprint {}", c.fingerprint.short()),
                Some(_) => "session keys differ".into(),
                None => "no channel".into(),
            },
        ));
    }
    for [a, b] in &expect.no_channels {
        let (a, b) = (DeviceId(*a), DeviceId(*b));
        assertions.push(Assertion::new(
            format!("no channel {a}<->{b}"),
            !has_channel(world, a, b),
            "",
        ));
    }
    for d in &expect.enrolled {
        let id = DeviceId(*d);
        let ok = reference.state().device(id).is_some()
            && world.sim.devices().get(&id).is_some_and(DeviceClient::is_enrolled);
        assertions.push(Assertion::new(format!("{id} enrolled"), ok, ""));
    }
    for d in &expect.not_enrolled {
        let id = DeviceId(*d);
        assertions.push(Assertion::new(
            format!("{id} not enrolled"),
            reference.state().device(id).is_none(),
            "",
        ));
    }
    if expect.min_height > 0 {
        assertions.push(Assertion::new(
            format!("height at least {}", expect.min_height),
            reference.height() >= expect.min_height,
            format!("height {}", reference.height()),
        ));
    }
    if expect.safety {
        assertions.push(Assertion::new(
            "no channel without a finalized satisfied verdict",
            safety.false_channels.is_empty(),
            safety.false_channels.join(", "),
        ));
        assertions.push(Assertion::new(
            "light verification accepted only finalized transactions",
            safety.false_accepts.is_empty(),
            safety.false_accepts.join(", "),
        ));
        assertions.push(Assertion::new(
            "no mismatched enrolled key",
            safety.bad_enrollments.is_empty(),
            safety.bad_enrollments.join(", "),
        ));
        assertions.push(Assertion::new(
            "honest validators agree on every height",
            safety.forks.is_empty(),
            format!("{:?}", safety.forks),
        ));
    }
    ScenarioReport {
        name: name.to_string(),
        seed: world.seed,
        trace_digest: world.sim.trace().digest(),
        height: reference.height(),
        signatures_per_block: reference.chain().iter().map(|b| b.commit.signatures.len()).collect(),
        channels,
        enrolled: reference.state().devices().keys().copied().collect(),
        safety,
        assertions,
        dropped: world.sim.dropped(),
        tampered: world.sim.tampered(),
    }
}

pub fn run_world(config: &ScenarioConfig, source: Option<&str>) -> Result<World, ScenarioError> {
    let mut world = World::from_config(config, source)?;
    world.sim.run_rounds(config.rounds);
    Ok(world)
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<(ScenarioReport, ScenarioTrace), ScenarioError> {
    let world = run_world(config, None)?;
    let report = evaluate(&world, &config.name, &config.expect);
    Ok((report, world.sim.trace().clone()))
}

// ---------------------------------------------------------------------------
// Performance sweep

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerfMode {
    Plain,
    Attestation,
}

impl PerfMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PerfMode::Plain => "plain",
            PerfMode::Attestation => "attestation",
        }
    }
}

fn default_rates() -> Vec<u64> {
    vec![1, 2, 4, 8, 16]
}
fn default_perf_rounds() -> u64 {
    20
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_validators")]
    pub validators: usize,
    #[serde(default = "default_capacity")]
    pub block_capacity: usize,
    #[serde(default = "default_rates")]
    pub rates: Vec<u64>,
    /// Rounds during which load is submitted; throughput is measured over
    /// the same span.
    #[serde(default = "default_perf_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub timing: Timing,
}

impl PerfConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let config: Self = parse(text)?;
        if config.rates.is_empty() || config.rates.contains(&0) {
            return Err(ScenarioError::at(Some(text), "\"rates\"", "rates must be non-empty and positive".into()));
        }
        if config.validators == 0 || config.block_capacity == 0 || config.rounds == 0 {
            return Err(ScenarioError::at(
                Some(text),
                "\"validators\"",
                "validators, block_capacity and rounds must be positive".into(),
            ));
        }
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfRow {
    pub rate: u64,
    pub mode: PerfMode,
    pub mean_latency: f64,
    pub p95_latency: f64,
    pub throughput: f64,
}

impl PerfRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3}",
            self.rate,
            self.mode.as_str(),
            self.mean_latency,
            self.p95_latency,
            self.throughput
        )
    }
}

pub fn perf_csv(rows: &[PerfRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// One load run: `rate` units per round for `config.rounds` rounds. Plain
/// units are transfers; attestation units are reports answering requests
/// finalized at genesis, and count as done when their verdict is final.
pub fn perf_run(config: &PerfConfig, rate: u64, mode: PerfMode) -> Metrics {
    let genesis = build_genesis(config.seed, config.validators, &[], &RegistryFixture::default(), None)
        .expect("built-in genesis is valid");
    let mut genesis = genesis;
    let sgx = TeeSchemeTag::new(tee::SGX_LIKE);
    let sev = TeeSchemeTag::new(tee::SEV_LIKE);
    let (prover, requester) = (DeviceId(1), DeviceId(2));
    let prover_keys = genesis
        .vendors
        .get_mut("amd-like")
        .expect("built-in vendor")
        .provision_device(prover, SeededRng::for_actor(config.seed, "device-key/1").seed32());
    let requester_keys = genesis
        .vendors
        .get_mut("intel-like")
        .expect("built-in vendor")
        .provision_device(requester, SeededRng::for_actor(config.seed, "device-key/2").seed32());
    let admin = genesis.admin.clone();
    let state = &mut genesis.state;
    for (id, tag, keys, vendor) in [
        (prover, &sev, &prover_keys, "amd-like"),
        (requester, &sgx, &requester_keys, "intel-like"),
    ] {
        let tx = enroll_via_vendor(id, tag, keys, &genesis.vendors[vendor]).expect("provisioned");
        assert!(state.apply(&tx).is_accepted());
    }
    let sdk = state.registry().id_of(&sgx, "sdk-v2").expect("vocabulary");
    let fw = state.registry().id_of(&sev, "fw-1.4").expect("vocabulary");
    let eq = Transaction::signed(
        TxPayload::Governance(GovernanceOp::DeclareEquivalence { a: sdk, b: fw }),
        Submitter::Admin,
        &admin,
    );
    assert!(state.apply(&eq).is_accepted());

    let total = rate * config.rounds;
    let mut rng = SeededRng::for_actor(config.seed, "workload");
    let mut units: Vec<(Transaction, Digest)> = Vec::with_capacity(total as usize);
    match mode {
        PerfMode::Plain => {
            for nonce in 0..total {
                let tx = Transaction::signed(
                    TxPayload::Transfer(Transfer {
                        nonce,
                        memo: rng.bytes::<8>().to_vec(),
                    }),
                    Submitter::Device(requester),
                    &requester_keys,
                );
                let d = tx.digest();
                units.push((tx, d));
            }
        }
        PerfMode::Attestation => {
            let platform =
                TeePlatform::new(prover, sev.clone(), tee::sev_like_layout(), prover_keys.clone(), vec![fw]);
            let handle = platform.create_environment(prover, CODE_IDENTITY).expect("fresh enclave");
            for _ in 0..total {
                let request = AttestationRequest::new(
                    RequirementList {
                        required: vec![sdk],
                        target_device: Some(prover),
                    },
                    requester,
                    ka_generate(rng.seed32()).public_share(),
                    rng.bytes(),
                    &requester_keys,
                );
                let tx = Transaction::signed(
                    TxPayload::AttRequest(request.clone()),
                    Submitter::Device(requester),
                    &requester_keys,
                );
                assert!(state.apply(&tx).is_accepted());
                let report = platform
                    .generate_native_report(&handle, &request, &ka_generate(rng.seed32()))
                    .expect("initialized");
                let tx = Transaction::signed(TxPayload::AttReport(report), Submitter::Device(prover), &prover_keys);
                units.push((tx, request.digest()));
            }
        }
    }

    let mut world = World::new(
        config.seed,
        config.validators,
        config.block_capacity,
        &config.timing,
        &ProtocolConfig::default(),
        genesis,
        &AdversaryConfig::default(),
    );
    world.sim.set_record_trace(false);
    let start = world.sim.now();
    let mut submitted = BTreeMap::new();
    let mut queue = units.into_iter();
    for _ in 0..config.rounds {
        for (tx, key) in queue.by_ref().take(rate as usize) {
            submitted.insert(key, world.sim.now());
            world.sim.submit_from_workload(tx);
        }
        world.sim.step_round();
    }
    let end = world.sim.now();
    let drain = total / config.block_capacity as u64 + 10;
    for _ in 0..drain {
        let (txs, results) = world.sim.finalization_samples();
        let finalized = match mode {
            PerfMode::Plain => &txs,
            PerfMode::Attestation => &results,
        };
        if submitted.keys().all(|k| finalized.contains_key(k)) {
            break;
        }
        world.sim.step_round();
    }
    let (txs, results) = world.sim.finalization_samples();
    let samples = MetricSamples {
        submitted,
        finalized: match mode {
            PerfMode::Plain => txs,
            PerfMode::Attestation => results,
        },
    };
    collect_metrics(&samples, start, end, config.timing.round_ticks)
}

/// Paired runs per rate on the same seed, plain first.
pub fn perf_sweep(config: &PerfConfig) -> Vec<PerfRow> {
    let mut rows = Vec::new();
    for &rate in &config.rates {
        for mode in [PerfMode::Plain, PerfMode::Attestation] {
            let m = perf_run(config, rate, mode);
            rows.push(PerfRow {
                rate,
                mode,
                mean_latency: m.mean_latency,
                p95_latency: m.p95_latency,
                throughput: m.throughput,
            });
        }
    }
    rows
}

/// Shape checks on a sweep: latency non-decreasing in rate for each mode,
/// and attestation throughput at the highest rate within `min_ratio` of
/// plain.
pub fn perf_assertions(rows: &[PerfRow], min_ratio: f64) -> Vec<Assertion> {
    let mut out = Vec::new();
    for mode in [PerfMode::Plain, PerfMode::Attestation] {
        let mut series: Vec<&PerfRow> = rows.iter().filter(|r| r.mode == mode).collect();
        series.sort_by_key(|r| r.rate);
        let monotone = series.windows(2).all(|w| w[1].mean_latency >= w[0].mean_latency);
        let lat: Vec<String> = series.iter().map(|r| format!("{}:{:.2}", r.rate, r.mean_latency)).collect();
        out.push(Assertion::new(
            format!("{} latency non-decreasing in rate", mode.as_str()),
            monotone,
            lat.join(" "),
        ));
    }
    for mode in [PerfMode::Plain, PerfMode::Attestation] {
        let mut series: Vec<&PerfRow> = rows.iter().filter(|r| r.mode == mode).collect();
        series.sort_by_key(|r| r.rate);
        out.push(Assertion::new(
            format!("{} throughput non-decreasing in rate", mode.as_str()),
            series.windows(2).all(|w| w[1].throughput >= w[0].throughput),
            "",
        ));
    }
    let dominated = rows.iter().filter(|r| r.mode == PerfMode::Attestation).all(|a| {
        rows.iter()
            .any(|p| p.mode == PerfMode::Plain && p.rate == a.rate && p.throughput >= a.throughput)
    });
    out.push(Assertion::new("plain throughput at least attestation throughput at every rate", dominated, ""));
    let top = rows.iter().map(|r| r.rate).max().unwrap_or(0);
    let at = |mode| rows.iter().find(|r| r.rate == top && r.mode == mode).map_or(0.0, |r| r.throughput);
    let (plain, att) = (at(PerfMode::Plain), at(PerfMode::Attestation));
    out.push(Assertion::new(
        format!("attestation saturation throughput at least {:.0}% of plain", min_ratio * 100.0),
        plain > 0.0 && att >= min_ratio * plain,
        format!("rate {top}: attestation {att:.3} vs plain {plain:.3}"),
    ));
    out
}

// ---------------------------------------------------------------------------
// Scheme extension

fn default_extension_rounds() -> u64 {
    40
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionFixture {
    pub scheme: SchemeFixture,
    #[serde(default)]
    pub equivalences: Vec<[String; 2]>,
    pub device: DeviceConfig,
    pub attestations: Vec<AttestationConfig>,
    #[serde(default)]
    pub expect_channels: Vec<[u32; 2]>,
    #[serde(default = "default_extension_rounds")]
    pub rounds: u64,
}

impl ExtensionFixture {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        parse(text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub base_trace_digest: Digest,
    pub prefix_trace_digest: Digest,
    pub changed_records: Vec<String>,
    pub scenario: ScenarioReport,
}

impl ExtensionReport {
    pub fn passed(&self) -> bool {
        self.scenario.passed()
    }
}

/// Canonical bytes of every record a scheme installation must not touch.
fn frozen_records(state: &LedgerState) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for (id, record) in state.devices() {
        out.insert(format!("device {id}"), encode(record).into_vec());
    }
    for a in state.registry().attributes() {
        out.insert(format!("attribute {}", a.id), encode(a).into_vec());
        for b in state.registry().attributes() {
            if a.id < b.id && state.registry().same_class(a.id, b.id).unwrap_or(false) {
                out.insert(format!("equivalence {}~{}", a.id, b.id), Vec::new());
            }
        }
    }
    for tag in state.schemes().tags() {
        let s = state.schemes().get(tag).expect("listed");
        let mut bytes = encode(&s.layout).into_vec();
        bytes.extend(encode(&s.vocabulary).into_vec());
        out.insert(format!("scheme {tag}"), bytes);
    }
    for (h, r) in state.results() {
        out.insert(format!("result {}", h.short()), encode(r).into_vec());
    }
    out
}

/// Runs the base scenario, installs a new scheme through governance, then
/// attests between a device of the new scheme and an existing device.
pub fn run_extension(
    base: &ScenarioConfig,
    fixture: &ExtensionFixture,
) -> Result<(ExtensionReport, ScenarioTrace), ScenarioError> {
    let mut world = run_world(base, None)?;
    let base_trace_digest = world.sim.trace().digest();
    let base_len = world.sim.trace().lines.len();
    let tag = TeeSchemeTag::new(&fixture.scheme.tag);
    if world.state().schemes().contains(&tag) {
        return Err(TeeError::DuplicateScheme(tag).into());
    }
    let layout = ReportLayout::new(fixture.scheme.domain.clone(), fixture.scheme.field_order.clone())?;
    let before = frozen_records(world.state());

    let vendor = vendor_for(world.seed, &fixture.scheme.vendor.name, fixture.scheme.vendor.chain);
    if !world.state().vendors().contains_key(vendor.name()) {
        world.govern(GovernanceOp::AddVendor {
            name: vendor.name().to_string(),
            root: vendor.root_public(),
        });
    }
    world.govern(GovernanceOp::InstallScheme {
        tag: tag.clone(),
        layout: layout.clone(),
        vocabulary: fixture.scheme.vocabulary.clone(),
    });
    let installed = world.run_while(20, |s| s.schemes().contains(&tag) && s.vendors().contains_key(vendor.name()));
    if !installed {
        return Err(ScenarioError::Config {
            line: 1,
            column: 1,
            message: format!("scheme {tag} was not installed within 20 rounds"),
        });
    }
    world.vendors.entry(vendor.name().to_string()).or_insert(vendor.clone());
    world.scheme_vendor.insert(tag.clone(), vendor.name().to_string());
    world.layouts.insert(tag.clone(), layout);

    let mut pairs = Vec::new();
    for [x, y] in &fixture.equivalences {
        let a = resolve(world.state(), x, None)?;
        let b = resolve(world.state(), y, None)?;
        world.govern(GovernanceOp::DeclareEquivalence { a, b });
        pairs.push((a, b));
    }
    world.run_while(20, |s| {
        pairs
            .iter()
            .all(|(a, b)| s.registry().same_class(*a, *b).unwrap_or(false))
    });

    let offset = world.sim.round();
    world.add_device(&fixture.device, None)?;
    for a in &fixture.attestations {
        let mut a = a.clone();
        a.start_round += offset;
        world.add_attestation(&a, None)?;
    }
    world.sim.run_rounds(fixture.rounds);

    let prefix_trace_digest = world.sim.trace().prefix(base_len).digest();
    let after = frozen_records(world.state());
    let changed_records: Vec<String> = before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();

    // The base run's own expectations must still hold after the extension.
    let mut expect = base.expect.clone();
    expect.channels.extend(fixture.expect_channels.iter().copied());
    expect.enrolled.push(fixture.device.id);
    let mut scenario = evaluate(&world, &format!("{}+{}", base.name, fixture.scheme.tag), &expect);
    scenario.assertions.insert(
        0,
        Assertion::new(
            "pre-existing records unchanged by the new scheme",
            changed_records.is_empty(),
            changed_records.join(", "),
        ),
    );
    scenario.assertions.insert(
        1,
        Assertion::new(
            "base run is an unchanged prefix of the extended trace",
            base_trace_digest == prefix_trace_digest,
            base_trace_digest.short(),
        ),
    );
    let report = ExtensionReport {
        base_trace_digest,
        prefix_trace_digest,
        changed_records,
        scenario,
    };
    Ok((report, world.sim.trace().clone()))
}
