use std::path::PathBuf;

use serde_json::Value;
use stratum_core::arbiter::PriorityConfig;
use stratum_core::authority::AuthorityTable;
use stratum_core::messages::{validate, MessageKind, ValidationStatus};
use stratum_core::runtime::{Mode, RuntimeConfig};
use stratum_core::sim::ScenarioScript;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(root().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn shipped_configs_equal_defaults() {
    assert_eq!(AuthorityTable::from_json(&read("config/authority.json")).unwrap(), AuthorityTable::reference());
    let arbiter = PriorityConfig::from_json(&read("config/arbiter.json")).unwrap();
    let default = PriorityConfig::default();
    assert_eq!(
        (arbiter.alpha, arbiter.beta, arbiter.gamma, arbiter.epsilon, arbiter.tie_break),
        (default.alpha, default.beta, default.gamma, default.epsilon, default.tie_break)
    );
    assert_eq!(RuntimeConfig::from_json(&read("config/runtime.json")).unwrap(), RuntimeConfig::for_layers(4, Mode::Ctha));
}

#[test]
fn scenario_samples_conform_to_schema_and_load() {
    let schema: Value = serde_json::from_str(&read("schemas/scenario.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for rel in ["samples/scenario_benign.json", "samples/scenario_faults.json"] {
        let text = read(rel);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert!(validator.is_valid(&v), "{rel}");
        ScenarioScript::from_json(&text).unwrap();
    }
    let benign = serde_json::to_value(ScenarioScript::benign(1, 5, 4)).unwrap();
    assert!(validator.is_valid(&benign));
    let mut extra = benign.clone();
    extra["surprise"] = Value::Bool(true);
    assert!(!validator.is_valid(&extra));
    assert!(ScenarioScript::from_json(&extra.to_string()).is_err());
}

#[test]
fn message_samples_validate() {
    for kind in MessageKind::ALL {
        let name = format!("samples/{}_valid.json", serde_json::to_value(kind).unwrap().as_str().unwrap());
        let v: Value = serde_json::from_str(&read(&name)).unwrap();
        assert_eq!(validate(&v, kind).status, ValidationStatus::Valid, "{name}");
    }
    let bad: Value = serde_json::from_str(&read("samples/summary_invalid.json")).unwrap();
    assert_ne!(validate(&bad, MessageKind::Summary).status, ValidationStatus::Valid);
}
