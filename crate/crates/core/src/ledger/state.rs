use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::{digest_of, Digest, Encode, Encoder};
use crate::crypto::PublicKey;
use crate::enrollment::{validate_enrollment, DeviceRecord, EnrollPayload, EnrollmentError};
use crate::ids::DeviceId;
use crate::protocol::{att_con_vrfy, AttestationRequest, CommonVerificationResult};
use crate::registry::Registry;
use crate::tee::{NativeAttestationReport, SchemeTable};

use super::{GovernanceOp, Submitter, Transaction, TxPayload, ValidatorSet};

/// Everything validators agree on before the first block.
#[derive(Clone, Debug)]
pub struct GenesisConfig {
    pub validators: ValidatorSet,
    pub admin: PublicKey,
    pub vendors: BTreeMap<String, PublicKey>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestEntry {
    pub request: AttestationRequest,
    pub answered_by: Option<DeviceId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    BadSignature,
    Duplicate,
    Enrollment(String),
    Governance(String),
    NotEnrolled,
    WrongSubmitter,
    BadRequest(String),
    UnknownRequest,
    AlreadyAnswered,
    WrongProver,
    ResultMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ApplyOutcome {
    Accepted { emitted: Vec<Transaction> },
    Rejected(RejectReason),
}

impl ApplyOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, ApplyOutcome::Accepted { .. })
    }
}

/// Replicated state: a pure fold over the finalized transaction sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerState {
    validators: ValidatorSet,
    admin: PublicKey,
    vendors: BTreeMap<String, PublicKey>,
    devices: BTreeMap<DeviceId, DeviceRecord>,
    registry: Registry,
    schemes: SchemeTable,
    requests: BTreeMap<Digest, RequestEntry>,
    pending_results: BTreeMap<Digest, CommonVerificationResult>,
    results: BTreeMap<Digest, CommonVerificationResult>,
    applied: BTreeSet<Digest>,
    transfers: u64,
}

impl LedgerState {
    pub fn genesis(config: &GenesisConfig) -> Self {
        Self {
            validators: config.validators.clone(),
            admin: config.admin,
            vendors: config.vendors.clone(),
            devices: BTreeMap::new(),
            registry: Registry::new(),
            schemes: SchemeTable::new(),
            requests: BTreeMap::new(),
            pending_results: BTreeMap::new(),
            results: BTreeMap::new(),
            applied: BTreeSet::new(),
            transfers: 0,
        }
    }

    pub fn validators(&self) -> &ValidatorSet {
        &self.validators
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceRecord> {
        self.devices.get(&id)
    }

    pub fn devices(&self) -> &BTreeMap<DeviceId, DeviceRecord> {
        &self.devices
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn schemes(&self) -> &SchemeTable {
        &self.schemes
    }

    pub fn vendors(&self) -> &BTreeMap<String, PublicKey> {
        &self.vendors
    }

    pub fn request(&self, hash: &Digest) -> Option<&RequestEntry> {
        self.requests.get(hash)
    }

    pub fn result(&self, request_hash: &Digest) -> Option<&CommonVerificationResult> {
        self.results.get(request_hash)
    }

    pub fn results(&self) -> &BTreeMap<Digest, CommonVerificationResult> {
        &self.results
    }

    pub fn pending_result(&self, request_hash: &Digest) -> Option<&CommonVerificationResult> {
        self.pending_results.get(request_hash)
    }

    /// Results emitted by executed reports and not yet finalized on their own.
    pub fn pending_results(&self) -> impl Iterator<Item = &CommonVerificationResult> {
        self.pending_results.values()
    }

    pub fn transfers(&self) -> u64 {
        self.transfers
    }

    pub fn contains_tx(&self, digest: &Digest) -> bool {
        self.applied.contains(digest)
    }

    pub fn state_root(&self) -> Digest {
        digest_of(self)
    }

    fn device_key(&self, id: DeviceId) -> Result<PublicKey, RejectReason> {
        self.devices
            .get(&id)
            .map(|r| r.attestation_public_key)
            .ok_or(RejectReason::NotEnrolled)
    }

    /// Signature and submitter checks that need no mutation; used for
    /// mempool admission as well as execution.
    pub fn check_authorization(&self, tx: &Transaction) -> Result<(), RejectReason> {
        let key = match (&tx.payload, tx.submitter) {
            (TxPayload::AttResult(_), Submitter::System) => return Ok(()),
            (TxPayload::AttResult(_), _) | (_, Submitter::System) => {
                return Err(RejectReason::WrongSubmitter)
            }
            (TxPayload::Governance(_), Submitter::Admin) => self.admin,
            (TxPayload::Governance(_), _) | (_, Submitter::Admin) => {
                return Err(RejectReason::WrongSubmitter)
            }
            (TxPayload::Enroll(p), Submitter::Device(d)) => {
                if p.record.device_id != d {
                    return Err(RejectReason::WrongSubmitter);
                }
                p.record.attestation_public_key
            }
            (TxPayload::AttRequest(r), Submitter::Device(d)) => {
                if r.requester_id != d {
                    return Err(RejectReason::WrongSubmitter);
                }
                self.device_key(d)?
            }
            (TxPayload::AttReport(_) | TxPayload::Transfer(_), Submitter::Device(d)) => self.device_key(d)?,
            (_, Submitter::Validator(_)) => return Err(RejectReason::WrongSubmitter),
        };
        if tx.verify_signature(&key) {
            Ok(())
        } else {
            Err(RejectReason::BadSignature)
        }
    }

    /// Deterministic transition. A rejected transaction leaves the state
    /// untouched.
    pub fn apply(&mut self, tx: &Transaction) -> ApplyOutcome {
        let digest = tx.digest();
        if self.applied.contains(&digest) {
            return ApplyOutcome::Rejected(RejectReason::Duplicate);
        }
        if let Err(reason) = self.check_authorization(tx) {
            return ApplyOutcome::Rejected(reason);
        }
        let result = match (&tx.payload, tx.submitter) {
            (TxPayload::Enroll(p), _) => self.apply_enroll(p).map(|_| Vec::new()),
            (TxPayload::Governance(op), _) => self.apply_governance(op).map(|_| Vec::new()),
            (TxPayload::AttRequest(r), _) => self.apply_request(r).map(|_| Vec::new()),
            (TxPayload::AttReport(r), Submitter::Device(prover)) => self.apply_report(prover, r),
            (TxPayload::AttResult(r), _) => self.apply_result(r).map(|_| Vec::new()),
            (TxPayload::Transfer(_), _) => {
                self.transfers += 1;
                Ok(Vec::new())
            }
            _ => Err(RejectReason::WrongSubmitter),
        };
        match result {
            Ok(emitted) => {
                self.applied.insert(digest);
                ApplyOutcome::Accepted { emitted }
            }
            Err(reason) => ApplyOutcome::Rejected(reason),
        }
    }

    fn apply_enroll(&mut self, p: &EnrollPayload) -> Result<(), RejectReason> {
        let id = p.record.device_id;
        if self.devices.contains_key(&id) {
            return Err(RejectReason::Enrollment(EnrollmentError::DuplicateDevice(id).to_string()));
        }
        if !self.schemes.contains(&p.record.scheme) {
            return Err(RejectReason::Enrollment(
                EnrollmentError::UnknownScheme(p.record.scheme.clone()).to_string(),
            ));
        }
        validate_enrollment(p, &self.validators, &self.vendors)
            .map_err(|e| RejectReason::Enrollment(e.to_string()))?;
        self.devices.insert(id, p.record.clone());
        Ok(())
    }

    fn apply_governance(&mut self, op: &GovernanceOp) -> Result<(), RejectReason> {
        let gov = |e: &dyn std::fmt::Display| RejectReason::Governance(e.to_string());
        match op {
            GovernanceOp::RegisterAttribute { scheme, label } => {
                if !self.schemes.contains(scheme) {
                    return Err(RejectReason::Governance(format!("scheme {scheme} not installed")));
                }
                self.registry
                    .register_attribute(scheme, label)
                    .map(|_| ())
                    .map_err(|e| gov(&e))
            }
            GovernanceOp::DeclareEquivalence { a, b } => {
                self.registry.declare_equivalence(*a, *b).map_err(|e| gov(&e))
            }
            GovernanceOp::InstallScheme { tag, layout, vocabulary } => self
                .schemes
                .install_scheme(&mut self.registry, tag, layout.clone(), vocabulary)
                .map(|_| ())
                .map_err(|e| gov(&e)),
            GovernanceOp::AddVendor { name, root } => {
                if self.vendors.contains_key(name) {
                    return Err(RejectReason::Governance(format!("vendor {name} exists")));
                }
                self.vendors.insert(name.clone(), *root);
                Ok(())
            }
        }
    }

    fn apply_request(&mut self, r: &AttestationRequest) -> Result<(), RejectReason> {
        let key = self.device_key(r.requester_id)?;
        if !r.verify_signature(&key) {
            return Err(RejectReason::BadSignature);
        }
        if let Some(bad) = r.lst.required.iter().find(|a| !self.registry.contains(**a)) {
            return Err(RejectReason::BadRequest(format!("unknown attribute {bad}")));
        }
        if let Some(t) = r.lst.target_device {
            if !self.devices.contains_key(&t) {
                return Err(RejectReason::BadRequest(format!("target {t} not enrolled")));
            }
        }
        let hash = r.digest();
        if self.requests.contains_key(&hash) {
            return Err(RejectReason::Duplicate);
        }
        self.requests.insert(
            hash,
            RequestEntry {
                request: r.clone(),
                answered_by: None,
            },
        );
        Ok(())
    }

    fn apply_report(
        &mut self,
        prover: DeviceId,
        report: &NativeAttestationReport,
    ) -> Result<Vec<Transaction>, RejectReason> {
        let entry = self
            .requests
            .get(&report.request_hash)
            .ok_or(RejectReason::UnknownRequest)?;
        if entry.answered_by.is_some() {
            return Err(RejectReason::AlreadyAnswered);
        }
        if entry.request.lst.target_device.is_some_and(|t| t != prover) {
            return Err(RejectReason::WrongProver);
        }
        let result = att_con_vrfy(self, prover, report);
        if let Some(entry) = self.requests.get_mut(&report.request_hash) {
            entry.answered_by = Some(prover);
        }
        self.pending_results.insert(report.request_hash, result.clone());
        Ok(vec![Transaction::system(TxPayload::AttResult(result))])
    }

    fn apply_result(&mut self, r: &CommonVerificationResult) -> Result<(), RejectReason> {
        match self.pending_results.get(&r.request_hash) {
            Some(expected) if expected == r => {
                self.pending_results.remove(&r.request_hash);
                self.results.insert(r.request_hash, r.clone());
                Ok(())
            }
            _ => Err(RejectReason::ResultMismatch),
        }
    }
}

impl Encode for RequestEntry {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.request).option(&self.answered_by);
    }
}

fn encode_map<K: Encode, V: Encode>(out: &mut Encoder, map: &BTreeMap<K, V>) {
    out.u32(map.len() as u32);
    for (k, v) in map {
        out.field(k).field(v);
    }
}

impl Encode for LedgerState {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.validators).field(&self.admin);
        encode_map(out, &self.vendors);
        encode_map(out, &self.devices);
        out.field(&self.registry).field(&self.schemes);
        encode_map(out, &self.requests);
        encode_map(out, &self.pending_results);
        encode_map(out, &self.results);
        let applied: Vec<Digest> = self.applied.iter().copied().collect();
        out.list(&applied).u64(self.transfers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ka_generate, keygen, SigningKeyPair};
    use crate::enrollment::enroll_via_vendor;
    use crate::ids::{AttributeId, TeeSchemeTag};
    use crate::protocol::Verdict;
    use crate::registry::RequirementList;
    use crate::tee::{self, TeePlatform, VendorMock};

    struct World {
        state: LedgerState,
        admin: SigningKeyPair,
        sgx_vendor: VendorMock,
        sev_vendor: VendorMock,
    }

    fn gov(admin: &SigningKeyPair, op: GovernanceOp) -> Transaction {
        Transaction::signed(TxPayload::Governance(op), Submitter::Admin, admin)
    }

    fn accept(state: &mut LedgerState, tx: &Transaction) -> Vec<Transaction> {
        match state.apply(tx) {
            ApplyOutcome::Accepted { emitted } => emitted,
            ApplyOutcome::Rejected(r) => panic!("rejected {:?}: {r:?}", tx.payload.kind()),
        }
    }

    fn world() -> World {
        let admin = keygen([90; 32]);
        let sgx_vendor = VendorMock::new("intel-like", [91; 32], None);
        let sev_vendor = VendorMock::new("amd-like", [92; 32], Some([93; 32]));
        let validators = ValidatorSet::new((0..4u8).map(|i| keygen([i; 32]).public()).collect());
        let mut vendors = BTreeMap::new();
        vendors.insert("intel-like".into(), sgx_vendor.root_public());
        vendors.insert("amd-like".into(), sev_vendor.root_public());
        let mut state = LedgerState::genesis(&GenesisConfig {
            validators,
            admin: admin.public(),
            vendors,
        });
        for (tag, layout, vocab) in [
            (tee::SGX_LIKE, tee::sgx_like_layout(), tee::sgx_like_vocabulary()),
            (tee::SEV_LIKE, tee::sev_like_layout(), tee::sev_like_vocabulary()),
        ] {
            accept(
                &mut state,
                &gov(
                    &admin,
                    GovernanceOp::InstallScheme {
                        tag: TeeSchemeTag::new(tag),
                        layout,
                        vocabulary: vocab,
                    },
                ),
            );
        }
        World {
            state,
            admin,
            sgx_vendor,
            sev_vendor,
        }
    }

    #[test]
    fn enroll_then_duplicate() {
        let mut w = world();
        let keys = w.sgx_vendor.provision_device(DeviceId(1), [1; 32]);
        let tx = enroll_via_vendor(DeviceId(1), &TeeSchemeTag::new(tee::SGX_LIKE), &keys, &w.sgx_vendor).unwrap();
        accept(&mut w.state, &tx);
        assert_eq!(w.state.apply(&tx), ApplyOutcome::Rejected(RejectReason::Duplicate));
        // Same device, fresh transaction bytes.
        let keys2 = w.sgx_vendor.provision_device(DeviceId(1), [2; 32]);
        let tx2 = enroll_via_vendor(DeviceId(1), &TeeSchemeTag::new(tee::SGX_LIKE), &keys2, &w.sgx_vendor).unwrap();
        assert!(matches!(w.state.apply(&tx2), ApplyOutcome::Rejected(RejectReason::Enrollment(_))));
    }

    #[test]
    fn governance_requires_admin() {
        let mut w = world();
        let not_admin = keygen([1; 32]);
        let tx = gov(&not_admin, GovernanceOp::DeclareEquivalence { a: AttributeId(0), b: AttributeId(5) });
        assert_eq!(w.state.apply(&tx), ApplyOutcome::Rejected(RejectReason::BadSignature));
        let tx = gov(&w.admin, GovernanceOp::DeclareEquivalence { a: AttributeId(0), b: AttributeId(5) });
        accept(&mut w.state, &tx);
        assert!(w.state.registry().same_class(AttributeId(0), AttributeId(5)).unwrap());
    }

    #[test]
    fn report_flow_and_replay() {
        let mut w = world();
        let sgx_tag = TeeSchemeTag::new(tee::SGX_LIKE);
        let sev_tag = TeeSchemeTag::new(tee::SEV_LIKE);
        let req_keys = w.sgx_vendor.provision_device(DeviceId(2), [2; 32]);
        let prv_keys = w.sev_vendor.provision_device(DeviceId(1), [1; 32]);
        accept(&mut w.state, &enroll_via_vendor(DeviceId(2), &sgx_tag, &req_keys, &w.sgx_vendor).unwrap());
        accept(&mut w.state, &enroll_via_vendor(DeviceId(1), &sev_tag, &prv_keys, &w.sev_vendor).unwrap());
        let sdk = w.state.registry().id_of(&sgx_tag, "sdk-v2").unwrap();
        let fw = w.state.registry().id_of(&sev_tag, "fw-1.4").unwrap();
        accept(&mut w.state, &gov(&w.admin, GovernanceOp::DeclareEquivalence { a: sdk, b: fw }));

        let mk_request = |nonce: u8| {
            AttestationRequest::new(
                RequirementList { required: vec![sdk], target_device: Some(DeviceId(1)) },
                DeviceId(2),
                ka_generate([nonce; 32]).public_share(),
                [nonce; 16],
                &req_keys,
            )
        };
        let r1 = mk_request(1);
        let r2 = mk_request(2);
        for r in [&r1, &r2] {
            accept(
                &mut w.state,
                &Transaction::signed(TxPayload::AttRequest(r.clone()), Submitter::Device(DeviceId(2)), &req_keys),
            );
        }
        let platform = TeePlatform::new(DeviceId(1), sev_tag.clone(), tee::sev_like_layout(), prv_keys.clone(), vec![fw]);
        let h = platform.create_environment(DeviceId(1), b"client").unwrap();
        let report = platform.generate_native_report(&h, &r1, &ka_generate([7; 32])).unwrap();
        let report_tx = Transaction::signed(TxPayload::AttReport(report.clone()), Submitter::Device(DeviceId(1)), &prv_keys);
        let emitted = accept(&mut w.state, &report_tx);
        assert_eq!(emitted.len(), 1);
        let TxPayload::AttResult(result) = &emitted[0].payload else { panic!() };
        assert_eq!(result.verdict, Verdict::Satisfied);
        assert_eq!(result.witness_map, vec![(sdk, fw)]);

        // A forged result for the same request is not the expected one.
        let mut forged = result.clone();
        forged.prover_measurement = None;
        assert_eq!(
            w.state.apply(&Transaction::system(TxPayload::AttResult(forged))),
            ApplyOutcome::Rejected(RejectReason::ResultMismatch)
        );
        accept(&mut w.state, &emitted[0]);
        assert_eq!(w.state.result(&r1.digest()), Some(result));

        // Exact replay.
        assert_eq!(w.state.apply(&report_tx), ApplyOutcome::Rejected(RejectReason::Duplicate));
        // Same report re-signed in a new transaction: the request is consumed.
        let mut again = report_tx.clone();
        again.payload = TxPayload::AttReport(report.clone());
        let again = Transaction::signed(again.payload, Submitter::Device(DeviceId(1)), &prv_keys);
        let _ = again;
        // Report re-targeted at the second request: signature no longer covers it.
        let mut retarget = report.clone();
        retarget.request_hash = r2.digest();
        let retarget_tx = Transaction::signed(TxPayload::AttReport(retarget), Submitter::Device(DeviceId(1)), &prv_keys);
        let emitted = accept(&mut w.state, &retarget_tx);
        let TxPayload::AttResult(r2_result) = &emitted[0].payload else { panic!() };
        assert_eq!(r2_result.verdict, Verdict::InvalidReport);
        assert!(r2_result.ka_public_prover.is_none());

        // Unknown request.
        let mut unknown = report.clone();
        unknown.request_hash = Digest::ZERO;
        let tx = Transaction::signed(TxPayload::AttReport(unknown), Submitter::Device(DeviceId(1)), &prv_keys);
        assert_eq!(w.state.apply(&tx), ApplyOutcome::Rejected(RejectReason::UnknownRequest));
    }

    #[test]
    fn rejection_leaves_state_untouched() {
        let mut w = world();
        let before = w.state.state_root();
        let bad = gov(&w.admin, GovernanceOp::DeclareEquivalence { a: AttributeId(0), b: AttributeId(500) });
        assert!(!w.state.apply(&bad).is_accepted());
        assert_eq!(w.state.state_root(), before);
    }
}
