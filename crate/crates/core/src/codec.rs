//! Canonical byte encoding, SHA-256 digests and binary Merkle trees.
//!
//! Layout rules (the signing format for every on-chain record):
//!
//! * A record is the concatenation of its fields in declared order.
//! * Every field is written as a 4-byte big-endian length followed by the
//!   field's own encoding.
//! * Integers encode as fixed-width big-endian, booleans as one byte,
//!   byte strings and text as their raw bytes.
//! * A list encodes as a 4-byte big-endian element count followed by each
//!   element as a length-prefixed field.
//! * An optional value encodes as one tag byte (`0` absent, `1` present),
//!   followed by the length-prefixed value when present.
//!
//! Merkle trees hash pairs as `SHA-256(left ‖ right)`. A level with an odd
//! number of nodes duplicates its last node.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("merkle tree needs at least one leaf")]
    EmptyLeaves,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Output of [`encode`].
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct CanonicalBytes(Vec<u8>);

impl CanonicalBytes {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[u8]> for CanonicalBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for CanonicalBytes {
    fn from(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }
}

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }

    /// First eight hex characters, for log lines.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

/// Types with a canonical byte layout.
pub trait Encode {
    fn encode_into(&self, out: &mut Encoder);
}

/// Append-only writer for the canonical layout.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> CanonicalBytes {
        CanonicalBytes(self.buf)
    }

    /// Writes a nested value as a length-prefixed field.
    pub fn field<T: Encode + ?Sized>(&mut self, value: &T) -> &mut Self {
        let at = self.buf.len();
        self.buf.extend_from_slice(&[0u8; 4]);
        value.encode_into(self);
        let len = (self.buf.len() - at - 4) as u32;
        self.buf[at..at + 4].copy_from_slice(&len.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf
            .extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn list<T: Encode>(&mut self, items: &[T]) -> &mut Self {
        self.field(items)
    }

    pub fn option<T: Encode>(&mut self, value: &Option<T>) -> &mut Self {
        self.field(value)
    }

    fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }
}

impl Encode for u8 {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(&[*self]);
    }
}

impl Encode for u32 {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(&self.to_be_bytes());
    }
}

impl Encode for u64 {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(&self.to_be_bytes());
    }
}

impl Encode for bool {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(&[*self as u8]);
    }
}

impl Encode for str {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(self.as_bytes());
    }
}

impl Encode for String {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(self.as_bytes());
    }
}

impl<const N: usize> Encode for [u8; N] {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(self);
    }
}

impl Encode for Digest {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(&self.0);
    }
}

impl<T: Encode> Encode for [T] {
    fn encode_into(&self, out: &mut Encoder) {
        out.raw(&(self.len() as u32).to_be_bytes());
        for item in self {
            out.field(item);
        }
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode_into(&self, out: &mut Encoder) {
        self.as_slice().encode_into(out);
    }
}

impl<T: Encode> Encode for Option<T> {
    fn encode_into(&self, out: &mut Encoder) {
        match self {
            None => out.raw(&[0]),
            Some(v) => {
                out.raw(&[1]);
                out.field(v);
            }
        }
    }
}

impl<T: Encode + ?Sized> Encode for &T {
    fn encode_into(&self, out: &mut Encoder) {
        (**self).encode_into(out);
    }
}

pub fn encode<T: Encode + ?Sized>(record: &T) -> CanonicalBytes {
    let mut e = Encoder::new();
    record.encode_into(&mut e);
    e.finish()
}

pub fn hash_of(bytes: impl AsRef<[u8]>) -> Digest {
    Digest(Sha256::digest(bytes.as_ref()).into())
}

/// `hash_of(encode(record))`.
pub fn digest_of<T: Encode + ?Sized>(record: &T) -> Digest {
    hash_of(encode(record))
}

fn hash_pair(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update(left.0);
    h.update(right.0);
    Digest(h.finalize().into())
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_pair(l, r),
            [l] => hash_pair(l, l),
            _ => unreachable!(),
        })
        .collect()
}

pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, CodecError> {
    if leaves.is_empty() {
        return Err(CodecError::EmptyLeaves);
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    Ok(level[0])
}

/// Which side of the running hash a sibling sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub path: Vec<(Digest, Side)>,
    pub root: Digest,
}

impl Encode for MerkleProof {
    fn encode_into(&self, out: &mut Encoder) {
        out.u64(self.leaf_index);
        out.u32(self.path.len() as u32);
        for (sibling, side) in &self.path {
            out.field(sibling);
            out.bool(*side == Side::Left);
        }
        out.field(&self.root);
    }
}

pub fn merkle_prove(leaves: &[Digest], index: usize) -> Result<MerkleProof, CodecError> {
    if index >= leaves.len() {
        return Err(CodecError::IndexOutOfRange {
            index,
            len: leaves.len(),
        });
    }
    let mut path = Vec::new();
    let mut level = leaves.to_vec();
    let mut pos = index;
    while level.len() > 1 {
        let entry = if pos % 2 == 0 {
            let sibling = level.get(pos + 1).unwrap_or(&level[pos]);
            (*sibling, Side::Right)
        } else {
            (level[pos - 1], Side::Left)
        };
        path.push(entry);
        level = next_level(&level);
        pos /= 2;
    }
    Ok(MerkleProof {
        leaf_index: index as u64,
        path,
        root: level[0],
    })
}

/// Folds `leaf` up the proof path. The side flags must agree with the bits
/// of `leaf_index`, so a proof cannot be re-targeted at another position.
pub fn verify_merkle(proof: &MerkleProof, leaf: &Digest) -> bool {
    if proof.path.len() < 64 && proof.leaf_index >> proof.path.len() != 0 {
        return false;
    }
    let mut acc = *leaf;
    for (level, (sibling, side)) in proof.path.iter().enumerate() {
        let is_right_child = (proof.leaf_index >> level) & 1 == 1;
        acc = match (side, is_right_child) {
            (Side::Left, true) => hash_pair(sibling, &acc),
            (Side::Right, false) => hash_pair(&acc, sibling),
            _ => return false,
        };
    }
    acc == proof.root
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn leaf(i: u32) -> Digest {
        hash_of(i.to_be_bytes())
    }

    fn leaves(n: u32) -> Vec<Digest> {
        (0..n).map(leaf).collect()
    }

    // Independent recursive construction: split at the next power of two
    // after padding the level to even width by duplication.
    fn oracle_root(nodes: &[Digest]) -> Digest {
        if nodes.len() == 1 {
            return nodes[0];
        }
        let mut padded = nodes.to_vec();
        if padded.len() % 2 == 1 {
            padded.push(*padded.last().unwrap());
        }
        let parents: Vec<Digest> = padded
            .chunks(2)
            .map(|p| {
                let mut cat = p[0].0.to_vec();
                cat.extend_from_slice(&p[1].0);
                hash_of(cat)
            })
            .collect();
        oracle_root(&parents)
    }

    #[test]
    fn sha256_vectors() {
        assert_eq!(
            hash_of(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash_of(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(hash_of(b"x"), hash_of(b"x"));
    }

    #[test]
    fn empty_list_is_zero_count() {
        let empty: Vec<u32> = Vec::new();
        assert_eq!(encode(&empty).as_slice(), &[0, 0, 0, 0]);
    }

    #[test]
    fn field_layout_is_length_prefixed() {
        let mut e = Encoder::new();
        e.u32(7).str("ab");
        assert_eq!(
            e.finish().as_slice(),
            &[0, 0, 0, 4, 0, 0, 0, 7, 0, 0, 0, 2, b'a', b'b']
        );
        let some: Option<u8> = Some(9);
        assert_eq!(encode(&some).as_slice(), &[1, 0, 0, 0, 1, 9]);
        assert_eq!(encode(&None::<u8>).as_slice(), &[0]);
    }

    #[derive(Clone, Debug, PartialEq, Eq, Hash)]
    struct Sample {
        id: u64,
        label: String,
        tags: Vec<u32>,
        blob: Vec<u8>,
        extra: Option<u32>,
    }

    impl Encode for Sample {
        fn encode_into(&self, out: &mut Encoder) {
            out.u64(self.id)
                .str(&self.label)
                .list(&self.tags)
                .bytes(&self.blob)
                .option(&self.extra);
        }
    }

    fn sample(rng: &mut impl rand_core::RngCore) -> Sample {
        let small = |rng: &mut dyn rand_core::RngCore, m: u32| rng.next_u32() % m;
        let n_tags = small(rng, 4);
        let n_blob = small(rng, 4);
        let n_label = small(rng, 3);
        Sample {
            id: u64::from(small(rng, 3)),
            label: (0..n_label).map(|_| (b'a' + small(rng, 2) as u8) as char).collect(),
            tags: (0..n_tags).map(|_| small(rng, 3)).collect(),
            blob: (0..n_blob).map(|_| small(rng, 3) as u8).collect(),
            extra: if small(rng, 2) == 0 { None } else { Some(small(rng, 2)) },
        }
    }

    #[test]
    fn randomized_injectivity_probe() {
        use rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // Small value ranges force many structurally-near pairs.
        let mut seen: HashMap<Vec<u8>, Sample> = HashMap::new();
        let mut distinct_pairs = 0;
        for _ in 0..1000 {
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            if a != b {
                distinct_pairs += 1;
                assert_ne!(encode(&a), encode(&b), "{a:?} vs {b:?}");
            }
            for s in [a, b] {
                let bytes = encode(&s).into_vec();
                if let Some(prev) = seen.insert(bytes, s.clone()) {
                    assert_eq!(prev, s, "collision");
                }
            }
        }
        assert!(distinct_pairs > 500);
    }

    #[test]
    fn merkle_small_cases() {
        let l = leaves(4);
        assert_eq!(merkle_root(&l[..1]).unwrap(), l[0]);
        let mut cat = l[0].0.to_vec();
        cat.extend_from_slice(&l[1].0);
        assert_eq!(merkle_root(&l[..2]).unwrap(), hash_of(&cat));
        assert_eq!(merkle_root(&l).unwrap(), oracle_root(&l));
        for n in 1..=17 {
            let l = leaves(n);
            assert_eq!(merkle_root(&l).unwrap(), oracle_root(&l), "n={n}");
        }
        assert_eq!(merkle_root(&[]), Err(CodecError::EmptyLeaves));
    }

    #[test]
    fn merkle_prove_shapes() {
        let one = leaves(1);
        let p = merkle_prove(&one, 0).unwrap();
        assert!(p.path.is_empty());
        assert_eq!(p.root, one[0]);

        let two = leaves(2);
        let p = merkle_prove(&two, 1).unwrap();
        assert_eq!(p.path, vec![(two[0], Side::Left)]);
        assert!(verify_merkle(&p, &two[1]));

        assert_eq!(
            merkle_prove(&two, 2),
            Err(CodecError::IndexOutOfRange { index: 2, len: 2 })
        );

        for n in 1..=33u32 {
            let l = leaves(n);
            let expected = (n as f64).log2().ceil() as usize;
            for i in 0..n as usize {
                assert_eq!(merkle_prove(&l, i).unwrap().path.len(), expected);
            }
        }
    }

    #[test]
    fn eight_leaf_cross_check() {
        let l = leaves(8);
        for i in 0..8 {
            let p = merkle_prove(&l, i).unwrap();
            for (j, other) in l.iter().enumerate() {
                assert_eq!(verify_merkle(&p, other), i == j, "proof {i} leaf {j}");
            }
        }
    }

    fn flip(d: &Digest, bit: usize) -> Digest {
        let mut out = *d;
        out.0[bit / 8] ^= 1 << (bit % 8);
        out
    }

    #[test]
    fn every_single_bit_mutation_fails() {
        for n in [1u32, 2, 3, 5, 8] {
            let l = leaves(n);
            for i in 0..n as usize {
                let proof = merkle_prove(&l, i).unwrap();
                assert!(verify_merkle(&proof, &l[i]));
                for bit in 0..256 {
                    assert!(!verify_merkle(&proof, &flip(&l[i], bit)));
                    let mut p = proof.clone();
                    p.root = flip(&p.root, bit);
                    assert!(!verify_merkle(&p, &l[i]));
                    for k in 0..proof.path.len() {
                        let mut p = proof.clone();
                        p.path[k].0 = flip(&p.path[k].0, bit);
                        assert!(!verify_merkle(&p, &l[i]), "n={n} i={i} k={k} bit={bit}");
                    }
                }
                for k in 0..proof.path.len() {
                    let mut p = proof.clone();
                    p.path[k].1 = match p.path[k].1 {
                        Side::Left => Side::Right,
                        Side::Right => Side::Left,
                    };
                    assert!(!verify_merkle(&p, &l[i]));
                }
                for bit in 0..64 {
                    let mut p = proof.clone();
                    p.leaf_index ^= 1 << bit;
                    assert!(!verify_merkle(&p, &l[i]), "n={n} i={i} index bit {bit}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn prove_then_verify(n in 1u32..=64, pick in any::<prop::sample::Index>()) {
            let l = leaves(n);
            let i = pick.index(n as usize);
            let p = merkle_prove(&l, i).unwrap();
            prop_assert!(verify_merkle(&p, &l[i]));
            prop_assert_eq!(p.root, merkle_root(&l).unwrap());
        }

        #[test]
        fn encoding_is_deterministic(id in any::<u64>(), label in ".{0,12}", tags in prop::collection::vec(any::<u32>(), 0..8)) {
            let s = Sample { id, label, tags, blob: vec![1, 2], extra: None };
            prop_assert_eq!(encode(&s), encode(&s.clone()));
        }
    }
}
