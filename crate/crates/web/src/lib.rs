//! Browser bindings: run a scenario, sweep submission rates, and check a
//! requirement list against a report under declared equivalences.

use dhtee::ids::TeeSchemeTag;
use dhtee::registry::{Registry, RequirementList};
use dhtee::scenario::{perf_csv, perf_sweep, run_scenario, PerfConfig, ScenarioConfig};
use dhtee::tee;
use wasm_bindgen::prelude::*;

pub const DEFAULT_SCENARIO: &str = include_str!("../../../fixtures/happy_path.json");

fn to_js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Runs a scenario config and returns its report as JSON.
pub fn scenario_json(config: &str) -> Result<String, String> {
    let config = ScenarioConfig::from_json(config).map_err(|e| e.to_string())?;
    let (report, trace) = run_scenario(&config).map_err(|e| e.to_string())?;
    let mut value = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    value["summary"] = report.summary().into();
    value["passed"] = report.passed().into();
    value["trace_lines"] = trace.lines.len().into();
    Ok(value.to_string())
}

/// Plain vs attestation sweep for the given rates, as CSV.
pub fn sweep_csv(rates: &[u64], rounds: u64, seed: u64) -> Result<String, String> {
    let config = PerfConfig {
        name: "browser".into(),
        seed,
        validators: 4,
        block_capacity: 8,
        rates: rates.to_vec(),
        rounds: rounds.max(1),
        timing: Default::default(),
    };
    if config.rates.is_empty() || config.rates.contains(&0) {
        return Err("rates must be positive".into());
    }
    Ok(perf_csv(&perf_sweep(&config)))
}

fn parse_ref(s: &str) -> Result<(TeeSchemeTag, &str), String> {
    s.trim()
        .split_once(':')
        .map(|(a, b)| (TeeSchemeTag::new(a), b))
        .ok_or_else(|| format!("{s:?} is not scheme:label"))
}

/// Satisfaction over the built-in sgx-like and sev-like vocabularies.
/// Arguments are comma-separated `scheme:label` lists; equivalences are
/// `a=b` pairs separated by commas.
pub fn satisfaction(required: &str, reported: &str, equivalences: &str) -> Result<String, String> {
    let mut registry = Registry::new();
    for (tag, vocab) in [
        (tee::SGX_LIKE, tee::sgx_like_vocabulary()),
        (tee::SEV_LIKE, tee::sev_like_vocabulary()),
    ] {
        for label in vocab {
            registry
                .register_attribute(&TeeSchemeTag::new(tag), &label)
                .map_err(|e| e.to_string())?;
        }
    }
    let id = |r: &Registry, s: &str| -> Result<_, String> {
        let (scheme, label) = parse_ref(s)?;
        r.id_of(&scheme, label).map_err(|e| e.to_string())
    };
    for pair in equivalences.split(',').filter(|p| !p.trim().is_empty()) {
        let (a, b) = pair.split_once('=').ok_or_else(|| format!("{pair:?} is not a=b"))?;
        let (a, b) = (id(&registry, a)?, id(&registry, b)?);
        registry.declare_equivalence(a, b).map_err(|e| e.to_string())?;
    }
    let list = |s: &str| -> Result<Vec<_>, String> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| id(&registry, p)).collect()
    };
    let lst = RequirementList {
        required: list(required)?,
        target_device: None,
    };
    let result = registry.satisfies(&lst, &list(reported)?).map_err(|e| e.to_string())?;
    let name = |a| {
        registry
            .attribute(a)
            .map(|x| format!("{}:{}", x.scheme.as_str(), x.label))
            .unwrap_or_default()
    };
    let witnesses: Vec<_> = result
        .witnesses
        .iter()
        .map(|(r, w)| serde_json::json!({ "required": name(*r), "witness": name(*w) }))
        .collect();
    let missing: Vec<_> = result.missing.iter().map(|m| name(*m)).collect();
    Ok(serde_json::json!({
        "satisfied": result.satisfied,
        "witnesses": witnesses,
        "missing": missing,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn default_scenario() -> String {
    DEFAULT_SCENARIO.to_string()
}

#[wasm_bindgen]
pub fn run(config: &str) -> Result<String, JsValue> {
    scenario_json(config).map_err(to_js)
}

#[wasm_bindgen]
pub fn sweep(rates: Vec<u64>, rounds: u64, seed: u64) -> Result<String, JsValue> {
    sweep_csv(&rates, rounds, seed).map_err(to_js)
}

#[wasm_bindgen]
pub fn check(required: &str, reported: &str, equivalences: &str) -> Result<String, JsValue> {
    satisfaction(required, reported, equivalences).map_err(to_js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_passes() {
        let out: serde_json::Value = serde_json::from_str(&scenario_json(DEFAULT_SCENARIO).unwrap()).unwrap();
        assert_eq!(out["passed"], true);
        assert_eq!(out["channels"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn bad_config_is_an_error() {
        assert!(scenario_json("{\"name\": 1}").unwrap_err().contains("line 1"));
    }

    #[test]
    fn sweep_rows() {
        let csv = sweep_csv(&[1, 4], 4, 2).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(sweep_csv(&[], 4, 2).is_err());
    }

    #[test]
    fn satisfaction_with_and_without_equivalence() {
        let eq = "sgx-like:sdk-v2=sev-like:fw-1.4";
        let yes: serde_json::Value =
            serde_json::from_str(&satisfaction("sgx-like:sdk-v2", "sev-like:fw-1.4, sev-like:aes-gcm", eq).unwrap())
                .unwrap();
        assert_eq!(yes["satisfied"], true);
        assert_eq!(yes["witnesses"][0]["witness"], "sev-like:fw-1.4");
        let no: serde_json::Value =
            serde_json::from_str(&satisfaction("sgx-like:sdk-v2", "sev-like:fw-1.4", "").unwrap()).unwrap();
        assert_eq!(no["satisfied"], false);
        assert_eq!(no["missing"][0], "sgx-like:sdk-v2");
        assert!(satisfaction("sdk-v2", "", "").is_err());
    }
}
