//! Identifier newtypes shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Encode, Encoder};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

impl Encode for DeviceId {
    fn encode_into(&self, out: &mut Encoder) {
        self.0.encode_into(out);
    }
}

/// Position of a validator in the genesis validator list.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidatorId(pub u32);

impl fmt::Display for ValidatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl Encode for ValidatorId {
    fn encode_into(&self, out: &mut Encoder) {
        self.0.encode_into(out);
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeId(pub u32);

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

impl Encode for AttributeId {
    fn encode_into(&self, out: &mut Encoder) {
        self.0.encode_into(out);
    }
}

/// Short name of a TEE scheme, e.g. `sgx-like`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TeeSchemeTag(pub String);

impl TeeSchemeTag {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TeeSchemeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Encode for TeeSchemeTag {
    fn encode_into(&self, out: &mut Encoder) {
        self.0.encode_into(out);
    }
}
