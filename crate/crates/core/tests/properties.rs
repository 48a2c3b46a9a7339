mod common;

use common::{adversarial_scenario, BEHAVIORS};
use dhtee::ids::DeviceId;
use dhtee::ledger::{Behavior, TxPayload};
use dhtee::protocol::Verdict;
use dhtee::scenario::{channel_pairs, run_world, World};
use dhtee::scheduler::SchedulerMode;
use proptest::prelude::*;

fn honest_chains_agree(world: &World) -> Result<(), TestCaseError> {
    let honest: Vec<_> = world
        .sim
        .validators()
        .iter()
        .filter(|v| v.behavior() == Behavior::Honest)
        .collect();
    let shortest = honest.iter().map(|v| v.height()).min().unwrap() as usize;
    for h in 0..shortest {
        let hash = honest[0].chain()[h].hash();
        prop_assert!(honest.iter().all(|v| v.chain()[h].hash() == hash), "fork at height {}", h + 1);
    }
    for v in &honest {
        if shortest > 0 && v.height() as usize == shortest {
            prop_assert_eq!(v.state().state_root(), honest[0].chain()[shortest - 1].header.state_root);
        }
    }
    Ok(())
}

/// Folding the chain from genesis reproduces every header's state root and
/// the live state.
fn replay_matches(world: &World) -> Result<(), TestCaseError> {
    let node = world.sim.reference();
    let mut state = world.genesis.clone();
    for block in node.chain() {
        for tx in &block.transactions {
            prop_assert!(state.apply(tx).is_accepted());
        }
        prop_assert_eq!(state.state_root(), block.header.state_root);
    }
    prop_assert_eq!(state.state_root(), node.state().state_root());
    Ok(())
}

fn scenario() -> impl Strategy<Value = (u64, usize)> {
    (0u64..10_000, 0usize..4)
}

fn config_for(seed: u64, b: usize) -> dhtee::scenario::ScenarioConfig {
    let mut config = adversarial_scenario(seed, BEHAVIORS[b % 3]);
    config.rounds = 20;
    if b == 3 {
        config.adversary.faulty.clear();
    }
    config
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn honest_validators_hold_identical_state((seed, b) in scenario()) {
        let world = run_world(&config_for(seed, b), None).unwrap();
        honest_chains_agree(&world)?;
        replay_matches(&world)?;
    }

    #[test]
    fn same_seed_same_digest((seed, b) in scenario()) {
        let config = config_for(seed, b);
        let a = run_world(&config, None).unwrap();
        let c = run_world(&config, None).unwrap();
        prop_assert_eq!(a.sim.trace().digest(), c.sim.trace().digest());
    }

    #[test]
    fn channels_only_to_compliant_peers((seed, b) in scenario()) {
        let world = run_world(&config_for(seed, b), None).unwrap();
        let state = world.sim.reference().state();
        for (id, client) in world.sim.devices() {
            for (peer, channel) in client.channels() {
                for h in &channel.requests {
                    let entry = state.request(h).unwrap();
                    let prover = if entry.request.requester_id == *id { *peer } else { *id };
                    let real = world.sim.devices()[&prover].platform().attributes().to_vec();
                    prop_assert!(state.registry().satisfies(&entry.request.lst, &real).unwrap().satisfied);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    /// Over a clean network, a pair shares a key exactly when both
    /// directions finalized as satisfied, and shared keys are equal.
    #[test]
    fn keys_equal_iff_both_directions_satisfied(seed in 0u64..10_000) {
        let mut config = adversarial_scenario(seed, Behavior::Silent);
        config.adversary.faulty.clear();
        config.adversary.tamper.clear();
        config.adversary.drop.clear();
        config.adversary.scheduler = SchedulerMode::Honest;
        config.rounds = 50;
        let world = run_world(&config, None).unwrap();
        let state = world.sim.reference().state();
        let mut satisfied = std::collections::BTreeSet::new();
        for block in world.sim.reference().chain() {
            for tx in &block.transactions {
                if let TxPayload::AttResult(r) = &tx.payload {
                    if r.verdict == Verdict::Satisfied {
                        let requester = state.request(&r.request_hash).unwrap().request.requester_id;
                        satisfied.insert((requester, r.prover_id));
                    }
                }
            }
        }
        let pairs = channel_pairs(&world);
        for c in &pairs {
            prop_assert!(c.keys_equal);
        }
        let ids: Vec<DeviceId> = world.sim.devices().keys().copied().collect();
        for &a in &ids {
            for &b in &ids {
                if a < b {
                    let both = satisfied.contains(&(a, b)) && satisfied.contains(&(b, a));
                    let has = pairs.iter().any(|c| c.a == a && c.b == b);
                    prop_assert_eq!(both, has, "pair {}-{}", a, b);
                }
            }
        }
    }
}
