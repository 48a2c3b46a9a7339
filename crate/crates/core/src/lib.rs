//! Cross-TEE attestation coordinated by a permissioned ledger.
//!
//! Devices whose TEEs cannot verify one another submit native reports to a
//! validator set; validators verify them with per-scheme verifiers, translate
//! the verdict through an attribute equivalence registry, and finalize a
//! scheme-neutral result that any device can check with a light-client proof.

pub mod codec;
pub mod crypto;
pub mod enrollment;
pub mod ids;
pub mod ledger;
pub mod protocol;
pub mod registry;
pub mod scenario;
pub mod scheduler;
pub mod simnet;
pub mod tee;
