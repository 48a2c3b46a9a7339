//! TEE scheme adapters.
//!
//! A scheme is described by a [`ReportLayout`]: a domain label and the order
//! in which report fields are serialized before signing. Two schemes with
//! different layouts cannot read or verify each other's reports. The
//! `sgx-like` and `sev-like` mocks below follow the enclave lifecycle of
//! their namesakes (create / initialize / report) without any real
//! isolation; measurement is just the hash of the loaded code identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{hash_of, CanonicalBytes, Digest, Encode, Encoder};
use crate::crypto::{self, KeyAgreementShare, PublicKey, SharePublic, Signature, SigningKeyPair};
use crate::ids::{AttributeId, DeviceId, TeeSchemeTag};
use crate::protocol::AttestationRequest;
use crate::registry::{Registry, RegistryError};

pub const SGX_LIKE: &str = "sgx-like";
pub const SEV_LIKE: &str = "sev-like";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TeeError {
    #[error("device {0} is unknown to this platform")]
    DeviceUnknown(DeviceId),
    #[error("enclave is not initialized")]
    NotInitialized,
    #[error("scheme {0} has no installed verifier")]
    UnsupportedScheme(TeeSchemeTag),
    #[error("scheme {0} is already installed")]
    DuplicateScheme(TeeSchemeTag),
    #[error("invalid report layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportField {
    Attributes,
    Measurement,
    KaPublic,
    RequesterId,
    RequestHash,
}

impl ReportField {
    pub const ALL: [ReportField; 5] = [
        ReportField::Attributes,
        ReportField::Measurement,
        ReportField::KaPublic,
        ReportField::RequesterId,
        ReportField::RequestHash,
    ];

    fn code(self) -> u8 {
        self as u8
    }
}

/// Native report serialization of one scheme.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLayout {
    pub domain: String,
    pub field_order: Vec<ReportField>,
}

impl ReportLayout {
    pub fn new(domain: impl Into<String>, field_order: Vec<ReportField>) -> Result<Self, TeeError> {
        let layout = Self {
            domain: domain.into(),
            field_order,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), TeeError> {
        let mut sorted = self.field_order.clone();
        sorted.sort();
        if sorted != ReportField::ALL {
            return Err(TeeError::InvalidLayout(format!(
                "field order must list each report field exactly once, got {:?}",
                self.field_order
            )));
        }
        if self.domain.is_empty() {
            return Err(TeeError::InvalidLayout("empty domain label".into()));
        }
        Ok(())
    }

    /// Bytes covered by the report signature.
    pub fn body(&self, report: &NativeAttestationReport) -> CanonicalBytes {
        let mut e = Encoder::new();
        e.str(&self.domain).field(&report.scheme);
        for field in &self.field_order {
            match field {
                ReportField::Attributes => e.list(&report.attributes),
                ReportField::Measurement => e.field(&report.measurement),
                ReportField::KaPublic => e.field(&report.ka_public),
                ReportField::RequesterId => e.field(&report.requester_id),
                ReportField::RequestHash => e.field(&report.request_hash),
            };
        }
        e.finish()
    }
}

impl Encode for ReportLayout {
    fn encode_into(&self, out: &mut Encoder) {
        out.str(&self.domain);
        let codes: Vec<u8> = self.field_order.iter().map(|f| f.code()).collect();
        out.list(&codes);
    }
}

/// ECREATE/EINIT/EREPORT-style layout.
pub fn sgx_like_layout() -> ReportLayout {
    ReportLayout {
        domain: "SGX-LIKE/EREPORT".into(),
        field_order: vec![
            ReportField::Measurement,
            ReportField::Attributes,
            ReportField::RequesterId,
            ReportField::RequestHash,
            ReportField::KaPublic,
        ],
    }
}

/// INIT/INIT_EX/report-style layout.
// SEV exposes both an ATTESTATION and an EREPORT command with overlapping
// roles; this mock has a single report operation.
pub fn sev_like_layout() -> ReportLayout {
    ReportLayout {
        domain: "SEV-LIKE/ATTESTATION_REPORT".into(),
        field_order: vec![
            ReportField::RequestHash,
            ReportField::RequesterId,
            ReportField::KaPublic,
            ReportField::Attributes,
            ReportField::Measurement,
        ],
    }
}

pub fn sgx_like_vocabulary() -> Vec<String> {
    ["sdk-v2", "sdk-v1", "cpu-svn-7", "aesni", "dhtee-client-1"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn sev_like_vocabulary() -> Vec<String> {
    ["fw-1.4", "fw-1.2", "snp-policy-3", "aes-gcm", "dhtee-client-1"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// A signed native report: environment attributes, measurement, the
/// prover's key-agreement share, and the requester and request it answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NativeAttestationReport {
    pub scheme: TeeSchemeTag,
    pub attributes: Vec<AttributeId>,
    pub measurement: Digest,
    pub ka_public: SharePublic,
    pub requester_id: DeviceId,
    pub request_hash: Digest,
    pub signature: Signature,
}

impl Encode for NativeAttestationReport {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.scheme)
            .list(&self.attributes)
            .field(&self.measurement)
            .field(&self.ka_public)
            .field(&self.requester_id)
            .field(&self.request_hash)
            .field(&self.signature);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnclaveState {
    Created,
    Initialized,
    TornDown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveHandle {
    pub device: DeviceId,
    pub measurement: Digest,
    pub state: EnclaveState,
}

/// One device's TEE: its scheme layout, attestation key and environment
/// attributes. The attestation key is the single device key pair.
#[derive(Clone, Debug)]
pub struct TeePlatform {
    device: DeviceId,
    scheme: TeeSchemeTag,
    layout: ReportLayout,
    keys: SigningKeyPair,
    attributes: Vec<AttributeId>,
}

impl TeePlatform {
    pub fn new(
        device: DeviceId,
        scheme: TeeSchemeTag,
        layout: ReportLayout,
        keys: SigningKeyPair,
        attributes: Vec<AttributeId>,
    ) -> Self {
        Self {
            device,
            scheme,
            layout,
            keys,
            attributes,
        }
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn scheme(&self) -> &TeeSchemeTag {
        &self.scheme
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn keys(&self) -> &SigningKeyPair {
        &self.keys
    }

    pub fn attributes(&self) -> &[AttributeId] {
        &self.attributes
    }

    /// ECREATE / INIT: the enclave exists but cannot report yet.
    pub fn create_enclave(&self, device: DeviceId, code_identity: &[u8]) -> Result<EnclaveHandle, TeeError> {
        if device != self.device {
            return Err(TeeError::DeviceUnknown(device));
        }
        Ok(EnclaveHandle {
            device,
            measurement: hash_of(code_identity),
            state: EnclaveState::Created,
        })
    }

    /// EINIT / INIT_EX.
    pub fn initialize(&self, handle: &mut EnclaveHandle) -> Result<(), TeeError> {
        match handle.state {
            EnclaveState::Created => {
                handle.state = EnclaveState::Initialized;
                Ok(())
            }
            EnclaveState::Initialized => Ok(()),
            EnclaveState::TornDown => Err(TeeError::NotInitialized),
        }
    }

    pub fn teardown(&self, handle: &mut EnclaveHandle) {
        handle.state = EnclaveState::TornDown;
    }

    pub fn create_environment(&self, device: DeviceId, code_identity: &[u8]) -> Result<EnclaveHandle, TeeError> {
        let mut handle = self.create_enclave(device, code_identity)?;
        self.initialize(&mut handle)?;
        Ok(handle)
    }

    /// EREPORT: a signed native report answering `request`.
    pub fn generate_native_report(
        &self,
        handle: &EnclaveHandle,
        request: &AttestationRequest,
        ka: &KeyAgreementShare,
    ) -> Result<NativeAttestationReport, TeeError> {
        if handle.state != EnclaveState::Initialized {
            return Err(TeeError::NotInitialized);
        }
        if handle.device != self.device {
            return Err(TeeError::DeviceUnknown(handle.device));
        }
        let mut report = NativeAttestationReport {
            scheme: self.scheme.clone(),
            attributes: self.attributes.clone(),
            measurement: handle.measurement,
            ka_public: ka.public_share(),
            requester_id: request.requester_id,
            request_hash: request.digest(),
            signature: Signature::EMPTY,
        };
        report.signature = self.keys.sign(self.layout.body(&report));
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstalledScheme {
    pub layout: ReportLayout,
    pub vocabulary: Vec<AttributeId>,
}

/// Native verifiers installed on a ledger node, one per scheme tag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemeTable {
    schemes: BTreeMap<TeeSchemeTag, InstalledScheme>,
}

impl SchemeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the vocabulary as fresh attributes and installs the
    /// verifier. Nothing already present is modified; on error nothing
    /// changes at all.
    pub fn install_scheme(
        &mut self,
        registry: &mut Registry,
        tag: &TeeSchemeTag,
        layout: ReportLayout,
        vocabulary: &[String],
    ) -> Result<Vec<AttributeId>, TeeError> {
        if self.schemes.contains_key(tag) {
            return Err(TeeError::DuplicateScheme(tag.clone()));
        }
        layout.validate()?;
        if let Some(clash) = self.schemes.values().find(|s| s.layout.domain == layout.domain) {
            return Err(TeeError::InvalidLayout(format!(
                "domain label {} already used",
                clash.layout.domain
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for label in vocabulary {
            if !seen.insert(label) || registry.id_of(tag, label).is_ok() {
                return Err(RegistryError::DuplicateAttribute {
                    scheme: tag.clone(),
                    label: label.clone(),
                }
                .into());
            }
        }
        let ids = vocabulary
            .iter()
            .map(|label| registry.register_attribute(tag, label))
            .collect::<Result<Vec<_>, _>>()?;
        self.schemes.insert(
            tag.clone(),
            InstalledScheme {
                layout,
                vocabulary: ids.clone(),
            },
        );
        Ok(ids)
    }

    pub fn get(&self, tag: &TeeSchemeTag) -> Option<&InstalledScheme> {
        self.schemes.get(tag)
    }

    pub fn contains(&self, tag: &TeeSchemeTag) -> bool {
        self.schemes.contains_key(tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = &TeeSchemeTag> {
        self.schemes.keys()
    }

    /// Signature over the scheme's field order plus well-formedness: the
    /// report carries this scheme's tag and only this scheme's attributes.
    pub fn native_verify(
        &self,
        scheme: &TeeSchemeTag,
        report: &NativeAttestationReport,
        registered_key: &PublicKey,
    ) -> Result<bool, TeeError> {
        let installed = self
            .schemes
            .get(scheme)
            .ok_or_else(|| TeeError::UnsupportedScheme(scheme.clone()))?;
        if &report.scheme != scheme {
            return Ok(false);
        }
        if !report
            .attributes
            .iter()
            .all(|a| installed.vocabulary.binary_search(a).is_ok())
        {
            return Ok(false);
        }
        Ok(crypto::verify(
            registered_key,
            installed.layout.body(report),
            &report.signature,
        ))
    }
}

impl Encode for SchemeTable {
    fn encode_into(&self, out: &mut Encoder) {
        out.u32(self.schemes.len() as u32);
        for (tag, s) in &self.schemes {
            out.field(tag).field(&s.layout).list(&s.vocabulary);
        }
    }
}

/// One link of a vendor certificate chain: `issuer` signs `subject`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateLink {
    pub subject: PublicKey,
    pub signature: Signature,
}

impl Encode for CertificateLink {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.subject).field(&self.signature);
    }
}

fn link_message(vendor: &str, subject: &PublicKey) -> CanonicalBytes {
    let mut e = Encoder::new();
    e.str("dhtee/cert-link").str(vendor).field(subject);
    e.finish()
}

/// The vendor's signature over a device attestation key. When
/// `intermediate` is present the root signed the intermediate key and the
/// intermediate signed the device key (a two-link chain).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VendorEndorsement {
    pub vendor: String,
    pub device_public_key: PublicKey,
    pub device_id: DeviceId,
    pub intermediate: Option<CertificateLink>,
    pub signature: Signature,
}

impl VendorEndorsement {
    fn signed_message(vendor: &str, device_public_key: &PublicKey, device_id: DeviceId) -> CanonicalBytes {
        let mut e = Encoder::new();
        e.str("dhtee/endorsement")
            .str(vendor)
            .field(device_public_key)
            .field(&device_id);
        e.finish()
    }

    /// Walks the chain from `vendor_root`.
    pub fn verify(&self, vendor_root: &PublicKey) -> bool {
        let leaf_signer = match &self.intermediate {
            None => *vendor_root,
            Some(link) => {
                if !crypto::verify(vendor_root, link_message(&self.vendor, &link.subject), &link.signature) {
                    return false;
                }
                link.subject
            }
        };
        crypto::verify(
            &leaf_signer,
            Self::signed_message(&self.vendor, &self.device_public_key, self.device_id),
            &self.signature,
        )
    }
}

impl Encode for VendorEndorsement {
    fn encode_into(&self, out: &mut Encoder) {
        out.str(&self.vendor)
            .field(&self.device_public_key)
            .field(&self.device_id)
            .option(&self.intermediate)
            .field(&self.signature);
    }
}

/// Deterministic in-process stand-in for a TEE vendor's key service.
#[derive(Clone, Debug)]
pub struct VendorMock {
    name: String,
    root: SigningKeyPair,
    // Present for chain-serving vendors (sev-like): the per-platform
    // signing key certified by the root, like a CEK under the ARK/ASK.
    chip: Option<(SigningKeyPair, CertificateLink)>,
    devices: BTreeMap<DeviceId, PublicKey>,
}

impl VendorMock {
    pub fn new(name: impl Into<String>, root_seed: [u8; 32], chain_seed: Option<[u8; 32]>) -> Self {
        let name = name.into();
        let root = crypto::keygen(root_seed);
        let chip = chain_seed.map(|seed| {
            let chip = crypto::keygen(seed);
            let link = CertificateLink {
                subject: chip.public(),
                signature: root.sign(link_message(&name, &chip.public())),
            };
            (chip, link)
        });
        Self {
            name,
            root,
            chip,
            devices: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn root_public(&self) -> PublicKey {
        self.root.public()
    }

    /// The vendor takes part in key generation and keeps the public half.
    pub fn provision_device(&mut self, device: DeviceId, seed: [u8; 32]) -> SigningKeyPair {
        let mut e = Encoder::new();
        e.str("dhtee/vendor-provision").str(&self.name).field(&device).field(&seed);
        let keys = crypto::keygen(hash_of(e.finish()).0);
        self.devices.insert(device, keys.public());
        keys
    }

    pub fn knows(&self, device: DeviceId) -> bool {
        self.devices.contains_key(&device)
    }

    /// The certificate chain from root to the device key.
    pub fn fetch_certificate_chain(&self, device: DeviceId) -> Result<VendorEndorsement, TeeError> {
        let device_public_key = *self.devices.get(&device).ok_or(TeeError::DeviceUnknown(device))?;
        let msg = VendorEndorsement::signed_message(&self.name, &device_public_key, device);
        let (intermediate, signature) = match &self.chip {
            Some((chip, link)) => (Some(link.clone()), chip.sign(&msg)),
            None => (None, self.root.sign(&msg)),
        };
        Ok(VendorEndorsement {
            vendor: self.name.clone(),
            device_public_key,
            device_id: device,
            intermediate,
            signature,
        })
    }

    pub fn endorse(&self, device: DeviceId) -> Result<VendorEndorsement, TeeError> {
        self.fetch_certificate_chain(device)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode;
    use crate::crypto::{ka_generate, keygen};
    use crate::protocol::AttestationRequest;
    use crate::registry::RequirementList;

    struct Fixture {
        registry: Registry,
        table: SchemeTable,
        sgx: TeePlatform,
        sev: TeePlatform,
        request: AttestationRequest,
    }

    fn fixture() -> Fixture {
        let mut registry = Registry::new();
        let mut table = SchemeTable::new();
        let sgx_tag = TeeSchemeTag::new(SGX_LIKE);
        let sev_tag = TeeSchemeTag::new(SEV_LIKE);
        let sgx_ids = table
            .install_scheme(&mut registry, &sgx_tag, sgx_like_layout(), &sgx_like_vocabulary())
            .unwrap();
        let sev_ids = table
            .install_scheme(&mut registry, &sev_tag, sev_like_layout(), &sev_like_vocabulary())
            .unwrap();
        let sgx = TeePlatform::new(DeviceId(1), sgx_tag, sgx_like_layout(), keygen([1; 32]), sgx_ids[..2].to_vec());
        let sev = TeePlatform::new(DeviceId(2), sev_tag, sev_like_layout(), keygen([2; 32]), sev_ids[..2].to_vec());
        let requester = keygen([3; 32]);
        let request = AttestationRequest::new(
            RequirementList::default(),
            DeviceId(3),
            ka_generate([4; 32]).public_share(),
            [0; 16],
            &requester,
        );
        Fixture {
            registry,
            table,
            sgx,
            sev,
            request,
        }
    }

    #[test]
    fn measurement_is_code_hash() {
        let f = fixture();
        let a = f.sgx.create_environment(DeviceId(1), b"client").unwrap();
        let b = f.sgx.create_environment(DeviceId(1), b"client").unwrap();
        let c = f.sgx.create_environment(DeviceId(1), b"other").unwrap();
        assert_eq!(a.measurement, b.measurement);
        assert_ne!(a.measurement, c.measurement);
        assert_eq!(
            f.sgx.create_environment(DeviceId(9), b"client"),
            Err(TeeError::DeviceUnknown(DeviceId(9)))
        );
    }

    #[test]
    fn report_requires_initialized_enclave() {
        let f = fixture();
        let ka = ka_generate([5; 32]);
        let mut h = f.sgx.create_enclave(DeviceId(1), b"client").unwrap();
        assert_eq!(
            f.sgx.generate_native_report(&h, &f.request, &ka),
            Err(TeeError::NotInitialized)
        );
        f.sgx.initialize(&mut h).unwrap();
        assert!(f.sgx.generate_native_report(&h, &f.request, &ka).is_ok());
        f.sgx.teardown(&mut h);
        assert_eq!(
            f.sgx.generate_native_report(&h, &f.request, &ka),
            Err(TeeError::NotInitialized)
        );
    }

    #[test]
    fn honest_reports_verify_under_own_scheme_only() {
        let f = fixture();
        let ka = ka_generate([5; 32]);
        let tags = [TeeSchemeTag::new(SGX_LIKE), TeeSchemeTag::new(SEV_LIKE)];
        for (i, platform) in [&f.sgx, &f.sev].into_iter().enumerate() {
            let h = platform.create_environment(platform.device(), b"client").unwrap();
            let report = platform.generate_native_report(&h, &f.request, &ka).unwrap();
            assert_eq!(report.request_hash, f.request.digest());
            assert_eq!(report.requester_id, f.request.requester_id);
            for (j, tag) in tags.iter().enumerate() {
                assert_eq!(
                    f.table.native_verify(tag, &report, &platform.public_key()).unwrap(),
                    i == j
                );
                // Relabelling the report does not help: the signed layout differs.
                let mut relabelled = report.clone();
                relabelled.scheme = tag.clone();
                if i != j {
                    assert!(!f.table.native_verify(tag, &relabelled, &platform.public_key()).unwrap());
                }
            }
        }
        assert!(matches!(
            f.table.native_verify(&TeeSchemeTag::new("riscv-like"), &{
                let h = f.sgx.create_environment(DeviceId(1), b"c").unwrap();
                f.sgx.generate_native_report(&h, &f.request, &ka).unwrap()
            }, &f.sgx.public_key()),
            Err(TeeError::UnsupportedScheme(_))
        ));
    }

    #[test]
    fn every_bound_field_is_covered() {
        let f = fixture();
        let ka = ka_generate([5; 32]);
        let tag = TeeSchemeTag::new(SEV_LIKE);
        let h = f.sev.create_environment(DeviceId(2), b"client").unwrap();
        let report = f.sev.generate_native_report(&h, &f.request, &ka).unwrap();
        let pk = f.sev.public_key();
        let mut mutants = Vec::new();
        for i in 0..report.attributes.len() {
            let mut r = report.clone();
            r.attributes[i] = f.registry.vocabulary(&tag)[4];
            mutants.push(r);
        }
        let mut r = report.clone();
        r.measurement.0[0] ^= 1;
        mutants.push(r);
        let mut r = report.clone();
        r.ka_public.0[31] ^= 0x80;
        mutants.push(r);
        let mut r = report.clone();
        r.requester_id = DeviceId(77);
        mutants.push(r);
        let mut r = report.clone();
        r.request_hash.0[5] ^= 4;
        mutants.push(r);
        let mut r = report.clone();
        r.signature.0[0] ^= 1;
        mutants.push(r);
        let mut r = report.clone();
        r.attributes.pop();
        mutants.push(r);
        for m in mutants {
            assert!(!f.table.native_verify(&tag, &m, &pk).unwrap(), "{m:?}");
        }
        assert!(f.table.native_verify(&tag, &report, &pk).unwrap());
        // A key other than the registered one.
        assert!(!f.table.native_verify(&tag, &report, &f.sgx.public_key()).unwrap());
    }

    #[test]
    fn schemes_serialize_the_same_environment_differently() {
        let f = fixture();
        let ka = ka_generate([5; 32]);
        let same_keys = keygen([8; 32]);
        let sgx = TeePlatform::new(DeviceId(1), TeeSchemeTag::new(SGX_LIKE), sgx_like_layout(), same_keys.clone(), vec![]);
        let sev = TeePlatform::new(DeviceId(1), TeeSchemeTag::new(SEV_LIKE), sev_like_layout(), same_keys, vec![]);
        let r1 = sgx
            .generate_native_report(&sgx.create_environment(DeviceId(1), b"c").unwrap(), &f.request, &ka)
            .unwrap();
        let r2 = sev
            .generate_native_report(&sev.create_environment(DeviceId(1), b"c").unwrap(), &f.request, &ka)
            .unwrap();
        assert_ne!(sgx_like_layout().body(&r1), sev_like_layout().body(&r2));
        assert_ne!(encode(&r1), encode(&r2));
    }

    #[test]
    fn install_is_conservative() {
        let mut f = fixture();
        let before_registry = encode(&f.registry);
        let before_attrs = f.registry.attributes().to_vec();
        let tag = TeeSchemeTag::new("riscv-like");
        let layout = ReportLayout::new(
            "RISCV-LIKE/KEYSTONE_REPORT",
            vec![
                ReportField::KaPublic,
                ReportField::Measurement,
                ReportField::RequestHash,
                ReportField::Attributes,
                ReportField::RequesterId,
            ],
        )
        .unwrap();
        let ids = f
            .table
            .install_scheme(&mut f.registry, &tag, layout.clone(), &["sm-1.0".to_string()])
            .unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(&f.registry.attributes()[..before_attrs.len()], &before_attrs[..]);
        assert_ne!(encode(&f.registry), before_registry);
        assert_eq!(
            f.table.install_scheme(&mut f.registry, &tag, layout, &[]),
            Err(TeeError::DuplicateScheme(tag))
        );
        // A bad layout is refused before anything is registered.
        let len = f.registry.len();
        let bad = ReportLayout {
            domain: "X".into(),
            field_order: vec![ReportField::KaPublic],
        };
        assert!(f
            .table
            .install_scheme(&mut f.registry, &TeeSchemeTag::new("x"), bad, &["a".into()])
            .is_err());
        assert_eq!(f.registry.len(), len);
    }

    #[test]
    fn vendor_chains() {
        let mut flat = VendorMock::new("intel-like", [10; 32], None);
        let mut chained = VendorMock::new("amd-like", [11; 32], Some([12; 32]));
        flat.provision_device(DeviceId(1), [1; 32]);
        chained.provision_device(DeviceId(2), [2; 32]);
        let e1 = flat.endorse(DeviceId(1)).unwrap();
        let e2 = chained.fetch_certificate_chain(DeviceId(2)).unwrap();
        assert!(e1.intermediate.is_none());
        assert!(e2.intermediate.is_some());
        assert!(e1.verify(&flat.root_public()));
        assert!(e2.verify(&chained.root_public()));
        assert!(!e1.verify(&chained.root_public()));
        assert!(!e2.verify(&flat.root_public()));
        let mut forged = e2.clone();
        forged.device_public_key = keygen([99; 32]).public();
        assert!(!forged.verify(&chained.root_public()));
        let mut wrong_id = e1.clone();
        wrong_id.device_id = DeviceId(5);
        assert!(!wrong_id.verify(&flat.root_public()));
        assert_eq!(flat.endorse(DeviceId(3)), Err(TeeError::DeviceUnknown(DeviceId(3))));
    }
}
