#![allow(dead_code)]

use dhtee::crypto::SeededRng;
use dhtee::enrollment::EnrollmentPath;
use dhtee::ledger::Behavior;
use dhtee::scenario::{
    AttestationConfig, DeviceConfig, Expectations, ProtocolConfig, RegistryFixture, ScenarioConfig, Timing,
};
use dhtee::scheduler::SchedulerMode;
use dhtee::ids::DeviceId;
use dhtee::simnet::{AdversaryConfig, FaultSpec, LinkRule};
use dhtee::tee;
use serde_json::Value;

pub fn fixture_text(name: &str) -> String {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn fixture(name: &str) -> ScenarioConfig {
    ScenarioConfig::from_json(&fixture_text(name)).unwrap()
}

pub const BEHAVIORS: [Behavior; 3] = [Behavior::Silent, Behavior::ForgeResults, Behavior::Equivocate];

fn pick<'a, T>(rng: &mut SeededRng, items: &'a [T]) -> &'a T {
    &items[rng.below(items.len() as u64) as usize]
}

fn subset(rng: &mut SeededRng, items: &[String], min: usize) -> Vec<String> {
    let mut out: Vec<String> = items.iter().filter(|_| rng.chance(0.5)).cloned().collect();
    while out.len() < min {
        let x = pick(rng, items).clone();
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// A random adversarial scenario: one faulty validator with the given
/// behavior, a lying scheduler, lossy and tampering links, and a mix of
/// enrollment paths and requests that may or may not be satisfiable.
pub fn adversarial_scenario(seed: u64, behavior: Behavior) -> ScenarioConfig {
    let mut rng = SeededRng::for_actor(seed, "sweep");
    let vocab = |scheme: &str| match scheme {
        tee::SGX_LIKE => tee::sgx_like_vocabulary(),
        _ => tee::sev_like_vocabulary(),
    };
    let schemes = [tee::SGX_LIKE, tee::SEV_LIKE];
    let n_devices = 3 + rng.below(2) as u32;
    let devices: Vec<DeviceConfig> = (1..=n_devices)
        .map(|id| {
            let scheme = if id <= 2 { schemes[id as usize - 1] } else { *pick(&mut rng, &schemes) };
            let other = if scheme == tee::SGX_LIKE { tee::SEV_LIKE } else { tee::SGX_LIKE };
            DeviceConfig {
                id,
                scheme: scheme.to_string(),
                enrollment: if rng.chance(0.5) { EnrollmentPath::Direct } else { EnrollmentPath::Vendor },
                attributes: subset(&mut rng, &vocab(scheme), 1),
                reverse_requirements: subset(&mut rng, &vocab(other), 0)
                    .into_iter()
                    .take(if rng.chance(0.5) { 0 } else { 2 })
                    .map(|l| format!("{other}:{l}"))
                    .collect(),
            }
        })
        .collect();
    // Device 1 (sgx-like) asks device 2 (sev-like) for something it has,
    // unless the generator rolls otherwise.
    let mut devices = devices;
    if rng.chance(0.7) {
        for (d, label) in [(0, "sdk-v2"), (1, "fw-1.4")] {
            if !devices[d].attributes.iter().any(|a| a == label) {
                devices[d].attributes.push(label.to_string());
            }
        }
    }
    let first = AttestationConfig {
        requester: 1,
        target: Some(2),
        requirements: vec!["sgx-like:sdk-v2".into()],
        start_round: 3 + rng.below(3),
    };
    let attestations = std::iter::once(first)
        .chain((0..1 + rng.below(2)).map(|_| {
            let requester = 1 + rng.below(n_devices as u64) as u32;
            let scheme = &devices[requester as usize - 1].scheme;
            let target = if rng.chance(0.5) {
                let t = 1 + rng.below(n_devices as u64) as u32;
                (t != requester).then_some(t)
            } else {
                None
            };
            AttestationConfig {
                requester,
                target,
                requirements: subset(&mut rng, &vocab(scheme), 1)
                    .into_iter()
                    .take(2)
                    .map(|l| format!("{scheme}:{l}"))
                    .collect(),
                start_round: 3 + rng.below(4),
            }
        }))
        .collect();
    let pick_device = rng.chance(0.5).then(|| DeviceId(1 + rng.below(n_devices as u64) as u32));
    ScenarioConfig {
        name: format!("sweep-{seed}-{behavior:?}"),
        seed,
        validators: 4,
        block_capacity: 8,
        rounds: 30,
        timing: Timing::default(),
        protocol: ProtocolConfig::default(),
        schemes: Vec::new(),
        registry: RegistryFixture {
            attributes: Vec::new(),
            equivalences: vec![
                ["sgx-like:sdk-v2".into(), "sev-like:fw-1.4".into()],
                ["sgx-like:aesni".into(), "sev-like:aes-gcm".into()],
                ["sgx-like:dhtee-client-1".into(), "sev-like:dhtee-client-1".into()],
            ],
        },
        devices,
        attestations,
        adversary: AdversaryConfig {
            faulty: vec![FaultSpec {
                validator: rng.below(4) as u32,
                behavior,
            }],
            scheduler: SchedulerMode::Adversarial { pick: pick_device },
            tamper: vec![LinkRule {
                kinds: vec!["forward".into(), "query_response".into(), "channel_data".into(), "submit".into()],
                probability: 0.05,
            }],
            drop: vec![LinkRule {
                kinds: Vec::new(),
                probability: 0.02,
            }],
        },
        expect: Expectations::default(),
    }
}

/// Every value reachable from `v` by flipping exactly one bit of one leaf:
/// integers bit by bit, hex strings in their decoded bytes, other strings
/// in their UTF-8 bytes (keeping only valid UTF-8), booleans negated.
pub fn bit_mutants(v: &Value) -> Vec<Value> {
    let mut out = Vec::new();
    mutate_into(v, &mut |m| out.push(m));
    out
}

fn mutate_into(v: &Value, emit: &mut dyn FnMut(Value)) {
    match v {
        Value::Bool(b) => emit(Value::Bool(!b)),
        Value::Number(n) => {
            if let Some(x) = n.as_u64() {
                for bit in 0..64 {
                    emit(Value::from(x ^ (1u64 << bit)));
                }
            }
        }
        Value::String(s) => {
            let hex_bytes = (s.len() % 2 == 0 && !s.is_empty()).then(|| hex::decode(s).ok()).flatten();
            match hex_bytes {
                Some(bytes) => {
                    for i in 0..bytes.len() * 8 {
                        let mut b = bytes.clone();
                        b[i / 8] ^= 1 << (i % 8);
                        emit(Value::String(hex::encode(b)));
                    }
                }
                None => {
                    for i in 0..s.len() * 8 {
                        let mut b = s.as_bytes().to_vec();
                        b[i / 8] ^= 1 << (i % 8);
                        if let Ok(t) = String::from_utf8(b) {
                            emit(Value::String(t));
                        }
                    }
                }
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                mutate_into(item, &mut |m| {
                    let mut copy = items.clone();
                    copy[i] = m;
                    emit(Value::Array(copy));
                });
            }
        }
        Value::Object(map) => {
            for (k, item) in map {
                mutate_into(item, &mut |m| {
                    let mut copy = map.clone();
                    copy.insert(k.clone(), m);
                    emit(Value::Object(copy));
                });
            }
        }
        Value::Null => {}
    }
}
