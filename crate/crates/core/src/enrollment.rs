//! Device enrollment: vendor-endorsed keys and keys read directly by a
//! quorum of validators over a physical channel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Encode, Encoder};
use crate::crypto::{self, PublicKey, Signature, SigningKeyPair};
use crate::ids::{DeviceId, TeeSchemeTag, ValidatorId};
use crate::ledger::{Submitter, Transaction, TxPayload, ValidatorSet};
use crate::tee::{VendorEndorsement, VendorMock};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnrollmentError {
    #[error("vendor endorsement does not verify")]
    EndorsementInvalid,
    #[error("device {0} is already enrolled")]
    DuplicateDevice(DeviceId),
    #[error("witnesses read different keys and none reached quorum")]
    KeyMismatch,
    #[error("{got} matching witnesses, quorum is {quorum}")]
    InsufficientWitnesses { got: usize, quorum: usize },
    #[error("vendor {0} is not known to the validators")]
    UnknownVendor(String),
    #[error("scheme {0} is not installed")]
    UnknownScheme(TeeSchemeTag),
    #[error("enrollment payload is inconsistent: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrollmentPath {
    Vendor,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: DeviceId,
    pub attestation_public_key: PublicKey,
    pub scheme: TeeSchemeTag,
    pub enrollment_path: EnrollmentPath,
    pub endorsement: Option<VendorEndorsement>,
}

impl Encode for DeviceRecord {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.device_id)
            .field(&self.attestation_public_key)
            .field(&self.scheme)
            .bool(self.enrollment_path == EnrollmentPath::Vendor)
            .option(&self.endorsement);
    }
}

/// A validator's signed statement of the key it read from a device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessStatement {
    pub validator: ValidatorId,
    pub device_id: DeviceId,
    pub scheme: TeeSchemeTag,
    pub public_key: PublicKey,
    pub signature: Signature,
}

impl WitnessStatement {
    fn message(device_id: DeviceId, scheme: &TeeSchemeTag, public_key: &PublicKey) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str("dhtee/witness")
            .field(&device_id)
            .field(scheme)
            .field(public_key);
        e.finish().into_vec()
    }

    pub fn sign(
        validator: ValidatorId,
        keys: &SigningKeyPair,
        device_id: DeviceId,
        scheme: &TeeSchemeTag,
        public_key: PublicKey,
    ) -> Self {
        Self {
            validator,
            device_id,
            scheme: scheme.clone(),
            public_key,
            signature: keys.sign(Self::message(device_id, scheme, &public_key)),
        }
    }

    pub fn verify(&self, validators: &ValidatorSet) -> bool {
        validators.key(self.validator).is_some_and(|pk| {
            crypto::verify(
                pk,
                Self::message(self.device_id, &self.scheme, &self.public_key),
                &self.signature,
            )
        })
    }
}

impl Encode for WitnessStatement {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.validator)
            .field(&self.device_id)
            .field(&self.scheme)
            .field(&self.public_key)
            .field(&self.signature);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollPayload {
    pub record: DeviceRecord,
    /// Quorum of matching witness statements; empty for vendor enrollment.
    pub witnesses: Vec<WitnessStatement>,
}

impl Encode for EnrollPayload {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.record).list(&self.witnesses);
    }
}

/// Groups witness statements by key and keeps the group that reaches
/// quorum. Statements with bad signatures or for another device are dropped.
pub fn aggregate_witnesses(
    device_id: DeviceId,
    statements: &[WitnessStatement],
    validators: &ValidatorSet,
) -> Result<(PublicKey, Vec<WitnessStatement>), EnrollmentError> {
    let mut by_key: BTreeMap<PublicKey, BTreeMap<ValidatorId, WitnessStatement>> = BTreeMap::new();
    for s in statements {
        if s.device_id == device_id && s.verify(validators) {
            by_key
                .entry(s.public_key)
                .or_default()
                .entry(s.validator)
                .or_insert_with(|| s.clone());
        }
    }
    if let Some((key, group)) = by_key.iter().find(|(_, g)| g.len() >= validators.quorum) {
        return Ok((*key, group.values().cloned().collect()));
    }
    if by_key.len() > 1 {
        return Err(EnrollmentError::KeyMismatch);
    }
    Err(EnrollmentError::InsufficientWitnesses {
        got: by_key.values().map(BTreeMap::len).max().unwrap_or(0),
        quorum: validators.quorum,
    })
}

/// Checks an enrollment payload against validator-side knowledge.
pub fn validate_enrollment(
    payload: &EnrollPayload,
    validators: &ValidatorSet,
    vendors: &BTreeMap<String, PublicKey>,
) -> Result<(), EnrollmentError> {
    let record = &payload.record;
    match record.enrollment_path {
        EnrollmentPath::Vendor => {
            let endorsement = record
                .endorsement
                .as_ref()
                .ok_or(EnrollmentError::Malformed("vendor path without endorsement"))?;
            if !payload.witnesses.is_empty() {
                return Err(EnrollmentError::Malformed("vendor path with witnesses"));
            }
            let root = vendors
                .get(&endorsement.vendor)
                .ok_or_else(|| EnrollmentError::UnknownVendor(endorsement.vendor.clone()))?;
            if endorsement.device_id != record.device_id
                || endorsement.device_public_key != record.attestation_public_key
                || !endorsement.verify(root)
            {
                return Err(EnrollmentError::EndorsementInvalid);
            }
        }
        EnrollmentPath::Direct => {
            if record.endorsement.is_some() {
                return Err(EnrollmentError::Malformed("direct path with endorsement"));
            }
            if payload.witnesses.iter().any(|w| w.scheme != record.scheme) {
                return Err(EnrollmentError::Malformed("witness scheme differs from record"));
            }
            let (key, _) = aggregate_witnesses(record.device_id, &payload.witnesses, validators)?;
            if key != record.attestation_public_key {
                return Err(EnrollmentError::KeyMismatch);
            }
        }
    }
    Ok(())
}

/// Enroll transaction for a vendor-provisioned device. The device signs the
/// transaction with the key being enrolled.
pub fn enroll_via_vendor(
    device_id: DeviceId,
    scheme: &TeeSchemeTag,
    device_keys: &SigningKeyPair,
    vendor: &VendorMock,
) -> Result<Transaction, EnrollmentError> {
    let endorsement = vendor
        .fetch_certificate_chain(device_id)
        .map_err(|_| EnrollmentError::EndorsementInvalid)?;
    if endorsement.device_public_key != device_keys.public() {
        return Err(EnrollmentError::EndorsementInvalid);
    }
    let record = DeviceRecord {
        device_id,
        attestation_public_key: device_keys.public(),
        scheme: scheme.clone(),
        enrollment_path: EnrollmentPath::Vendor,
        endorsement: Some(endorsement),
    };
    Ok(Transaction::signed(
        TxPayload::Enroll(EnrollPayload {
            record,
            witnesses: Vec::new(),
        }),
        Submitter::Device(device_id),
        device_keys,
    ))
}

/// Enroll transaction assembled from witness statements collected over
/// physical channels.
pub fn enroll_direct(
    device_id: DeviceId,
    scheme: &TeeSchemeTag,
    device_keys: &SigningKeyPair,
    statements: &[WitnessStatement],
    validators: &ValidatorSet,
) -> Result<Transaction, EnrollmentError> {
    let (key, witnesses) = aggregate_witnesses(device_id, statements, validators)?;
    if key != device_keys.public() {
        return Err(EnrollmentError::KeyMismatch);
    }
    let record = DeviceRecord {
        device_id,
        attestation_public_key: key,
        scheme: scheme.clone(),
        enrollment_path: EnrollmentPath::Direct,
        endorsement: None,
    };
    Ok(Transaction::signed(
        TxPayload::Enroll(EnrollPayload { record, witnesses }),
        Submitter::Device(device_id),
        device_keys,
    ))
}

/// The validator set a device stores for light verification. It travels
/// with the enrollment response over the same trusted channel as the
/// enrollment itself; an unenrolled device holds none.
pub fn distribute_validator_set(enrolled: bool, genesis: &ValidatorSet) -> ValidatorSet {
    if enrolled {
        genesis.clone()
    } else {
        ValidatorSet {
            validators: Vec::new(),
            quorum: 0,
        }
    }
}
