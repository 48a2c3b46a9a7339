//! Signatures (Ed25519), key agreement (X25519), session-key derivation
//! (HKDF-SHA-256) and the channel AEAD (ChaCha20-Poly1305).
//!
//! Every key is derived from caller-supplied seed bytes so a simulation run
//! is reproducible end to end. Byte lengths: public keys 32, signatures 64,
//! key-agreement shares 32, session keys 32, AEAD nonces 12.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{hash_of, Digest, Encode, Encoder};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed signature or public key")]
    MalformedSignature,
    #[error("key agreement share is not a contributory group element")]
    InvalidPublicShare,
    #[error("ciphertext failed authentication")]
    AuthenticationFailure,
}

macro_rules! fixed_bytes {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), hex::encode(&self.0[..4]))
            }
        }

        impl Encode for $name {
            fn encode_into(&self, out: &mut Encoder) {
                self.0.encode_into(out);
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; $len] = bytes
                    .try_into()
                    .map_err(|_| serde::de::Error::custom(concat!("expected ", $len, " bytes")))?;
                Ok($name(arr))
            }
        }
    };
}

fixed_bytes!(PublicKey, 32);
fixed_bytes!(Signature, 64);
fixed_bytes!(SharePublic, 32);

impl Signature {
    /// A placeholder for unsigned system records.
    pub const EMPTY: Signature = Signature([0u8; 64]);
}

/// An Ed25519 identity. The secret half never leaves this struct.
#[derive(Clone)]
pub struct SigningKeyPair {
    secret: ed25519_dalek::SigningKey,
    public: PublicKey,
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl SigningKeyPair {
    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: impl AsRef<[u8]>) -> Signature {
        sign(self, message)
    }
}

pub fn keygen(seed: [u8; 32]) -> SigningKeyPair {
    let secret = ed25519_dalek::SigningKey::from_bytes(&seed);
    let public = PublicKey(secret.verifying_key().to_bytes());
    SigningKeyPair { secret, public }
}

pub fn sign(keys: &SigningKeyPair, message: impl AsRef<[u8]>) -> Signature {
    Signature(keys.secret.sign(message.as_ref()).to_bytes())
}

pub fn try_verify(
    public: &PublicKey,
    message: impl AsRef<[u8]>,
    signature: &Signature,
) -> Result<(), CryptoError> {
    let key = ed25519_dalek::VerifyingKey::from_bytes(&public.0)
        .map_err(|_| CryptoError::MalformedSignature)?;
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.verify(message.as_ref(), &sig)
        .map_err(|_| CryptoError::MalformedSignature)
}

pub fn verify(public: &PublicKey, message: impl AsRef<[u8]>, signature: &Signature) -> bool {
    try_verify(public, message, signature).is_ok()
}

/// An ephemeral X25519 share. Only the public half is ever encoded.
#[derive(Clone)]
pub struct KeyAgreementShare {
    secret: x25519_dalek::StaticSecret,
    public: SharePublic,
}

impl fmt::Debug for KeyAgreementShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyAgreementShare")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyAgreementShare {
    pub fn public_share(&self) -> SharePublic {
        self.public
    }
}

pub fn ka_generate(seed: [u8; 32]) -> KeyAgreementShare {
    let secret = x25519_dalek::StaticSecret::from(seed);
    let public = SharePublic(x25519_dalek::PublicKey::from(&secret).to_bytes());
    KeyAgreementShare { secret, public }
}

pub fn ka_shared(my: &KeyAgreementShare, their_public: &SharePublic) -> Result<[u8; 32], CryptoError> {
    let shared = my
        .secret
        .diffie_hellman(&x25519_dalek::PublicKey::from(their_public.0));
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidPublicShare);
    }
    Ok(shared.to_bytes())
}

/// Symmetric key for a post-attestation channel, bound to the transcript of
/// the attestation run(s) that produced it.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub key: [u8; 32],
    pub transcript_hash: Digest,
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("fingerprint", &hash_of(self.key).short())
            .field("transcript_hash", &self.transcript_hash)
            .finish()
    }
}

impl SessionKey {
    /// Digest of the key bytes, safe to log and compare across endpoints.
    pub fn fingerprint(&self) -> Digest {
        hash_of(self.key)
    }
}

const SESSION_INFO: &[u8] = b"dhtee/session/v1";

pub fn derive_session(shared_secret: &[u8; 32], transcript_hash: &Digest) -> SessionKey {
    let hk = Hkdf::<Sha256>::new(Some(transcript_hash.as_bytes()), shared_secret);
    let mut key = [0u8; 32];
    hk.expand(SESSION_INFO, &mut key)
        .expect("32 bytes is a valid HKDF-SHA-256 output length");
    SessionKey {
        key,
        transcript_hash: *transcript_hash,
    }
}

pub fn seal(key: &SessionKey, nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8> {
    ChaCha20Poly1305::new(Key::from_slice(&key.key))
        .encrypt(Nonce::from_slice(nonce), plaintext)
        .expect("in-memory encryption does not fail")
}

pub fn open(key: &SessionKey, nonce: &[u8; 12], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    ChaCha20Poly1305::new(Key::from_slice(&key.key))
        .decrypt(Nonce::from_slice(nonce), ciphertext)
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// Seeded randomness owned by one simulated actor.
pub struct SeededRng(ChaCha20Rng);

impl SeededRng {
    /// Derives an independent stream from a master seed and an actor label.
    pub fn for_actor(master_seed: u64, label: &str) -> Self {
        let mut e = Encoder::new();
        e.str("dhtee/rng").u64(master_seed).str(label);
        Self(ChaCha20Rng::from_seed(hash_of(e.finish()).0))
    }

    pub fn seed32(&mut self) -> [u8; 32] {
        let mut out = [0u8; 32];
        self.0.fill_bytes(&mut out);
        out
    }

    pub fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.0.fill_bytes(&mut out);
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `0..bound` (bound > 0).
    pub fn below(&mut self, bound: u64) -> u64 {
        self.0.next_u64() % bound
    }

    /// Bernoulli trial with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        (self.0.next_u64() >> 11) as f64 / ((1u64 << 53) as f64) < p
    }
}
