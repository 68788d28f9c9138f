//! Per-kind manifold projections applied on every inter-layer hop.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    to_canonical_string, validate_with, ContractError, Fallback, Message, MessageKind, Subgoal, ValidationOutcome,
    ValidationStatus,
};

pub const REDACTED: &str = "[REDACTED]";

/// Content that [`sanitize`] redacts: any string containing one of
/// `substrings`, or starting with one of `prefixes`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForbiddenPatterns {
    #[serde(default)]
    pub substrings: Vec<String>,
    #[serde(default)]
    pub prefixes: Vec<String>,
}

impl ForbiddenPatterns {
    pub fn is_empty(&self) -> bool {
        self.substrings.is_empty() && self.prefixes.is_empty()
    }

    pub fn matches(&self, s: &str) -> bool {
        self.substrings.iter().any(|p| s.contains(p.as_str())) || self.prefixes.iter().any(|p| s.starts_with(p.as_str()))
    }
}

/// Replaces every string value matching a forbidden pattern with
/// [`REDACTED`] and drops object entries whose key matches.
pub fn sanitize(raw: &Value, patterns: &ForbiddenPatterns) -> Value {
    if patterns.is_empty() {
        return raw.clone();
    }
    match raw {
        Value::String(s) if patterns.matches(s) => Value::String(REDACTED.into()),
        Value::Array(items) => Value::Array(items.iter().map(|v| sanitize(v, patterns)).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .filter(|(k, _)| !patterns.matches(k))
                .map(|(k, v)| (k.clone(), sanitize(v, patterns)))
                .collect(),
        ),
        other => other.clone(),
    }
}

/// Number of whitespace-delimited chunks in the canonical encoding.
pub fn token_count(v: &Value) -> usize {
    to_canonical_string(v).split_whitespace().count()
}

const SUMMARY_REQUIRED: [&str; 3] = ["layer_id", "timestamp", "state_digest"];

/// Shrinks a summary candidate until its token count is at most `k`.
///
/// Order of removal: observations (last first), anomalies (last first), the
/// resources block, any other non-required field, then the state digest is
/// cut at its first whitespace. Non-object candidates are returned as is.
pub fn truncate_summary(raw: &Value, k: usize) -> Value {
    let mut v = raw.clone();
    loop {
        if token_count(&v) <= k {
            return v;
        }
        let Some(map) = v.as_object_mut() else {
            return v;
        };
        let popped = ["observations", "anomalies"]
            .iter()
            .any(|key| map.get_mut(*key).and_then(Value::as_array_mut).and_then(Vec::pop).is_some());
        if popped {
            continue;
        }
        if map.remove("resources").is_some() {
            continue;
        }
        let extra = map
            .keys()
            .rev()
            .find(|key| !SUMMARY_REQUIRED.contains(&key.as_str()) && !map[*key].as_array().is_some_and(Vec::is_empty))
            .cloned();
        if let Some(key) = extra {
            map.remove(&key);
            continue;
        }
        let mut shrunk = false;
        for key in SUMMARY_REQUIRED {
            if let Some(Value::String(s)) = map.get_mut(key) {
                if let Some(cut) = s.find(char::is_whitespace) {
                    s.truncate(cut);
                    shrunk = true;
                }
            }
        }
        if !shrunk {
            return v;
        }
    }
}

/// Upward projection: sanitize, then truncate to the token budget, then
/// validate. The result never exceeds `k` tokens.
pub fn project_summary(
    raw: &Value,
    k: usize,
    fallback: &Fallback,
    patterns: &ForbiddenPatterns,
) -> Result<ValidationOutcome, ContractError> {
    if k == 0 {
        return Err(ContractError::Domain("token budget must be at least 1".into()));
    }
    let cleaned = sanitize(raw, patterns);
    let trimmed = truncate_summary(&cleaned, k);
    let mut outcome = validate_with(&trimmed, MessageKind::Summary, fallback);
    if trimmed != *raw {
        outcome = outcome.at_least(ValidationStatus::Repaired);
        outcome.diagnostics.push("sanitized or truncated before validation".into());
    }
    let value = outcome.message.to_value();
    if token_count(&value) > k {
        let again = truncate_summary(&value, k);
        let redo = validate_with(&again, MessageKind::Summary, fallback);
        outcome.message = redo.message;
        outcome.status = outcome.status.max(redo.status).max(ValidationStatus::Repaired);
        outcome.diagnostics.push("truncated after repair".into());
    }
    Ok(outcome)
}

/// Downward projection: validate, then drop every subgoal whose minimum
/// time scale exceeds the receiver's, along with dependencies on subgoals
/// that are not in the surviving set.
pub fn project_plan(
    raw: &Value,
    receiver_tau: f64,
    tau_min_of: &dyn Fn(&Subgoal) -> f64,
    fallback: &Fallback,
) -> Result<ValidationOutcome, ContractError> {
    if !(receiver_tau > 0.0) {
        return Err(ContractError::Domain("receiver time scale must be positive".into()));
    }
    let mut outcome = validate_with(raw, MessageKind::Plan, fallback);
    let Message::Plan(plan) = &mut outcome.message else {
        unreachable!("plan validation yields a plan");
    };
    let before = plan.subgoals.len();
    plan.subgoals.retain(|g| tau_min_of(g) <= receiver_tau);
    let removed = before - plan.subgoals.len();
    let ids: Vec<String> = plan.subgoals.iter().map(|g| g.id.clone()).collect();
    let mut dangling = 0;
    for g in &mut plan.subgoals {
        if let Some(deps) = &mut g.dependencies {
            let n = deps.len();
            deps.retain(|d| ids.contains(d));
            dangling += n - deps.len();
        }
    }
    if removed > 0 || dangling > 0 {
        outcome.diagnostics.push(format!(
            "removed {removed} subgoal(s) above receiver time scale, {dangling} dangling dependency(ies)"
        ));
        outcome = outcome.at_least(ValidationStatus::Repaired);
    }
    Ok(outcome)
}

/// Broadcast projection: schema validation and repair only.
pub fn project_policy(raw: &Value, fallback: &Fallback) -> ValidationOutcome {
    validate_with(raw, MessageKind::Policy, fallback)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn patterns(subs: &[&str], prefixes: &[&str]) -> ForbiddenPatterns {
        ForbiddenPatterns {
            substrings: subs.iter().map(|s| s.to_string()).collect(),
            prefixes: prefixes.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn sanitize_drops_matching_keys() {
        let p = ForbiddenPatterns { substrings: vec!["rm -rf".into()], prefixes: vec![] };
        let v = json!({"resources": {"rm -rf /": 1, "ok": "rm -rf x"}});
        assert_eq!(sanitize(&v, &p), json!({"resources": {"ok": REDACTED}}));
    }

    #[test]
    fn sanitize_without_patterns_is_identity() {
        let v = json!({"state_digest": "rm -rf /", "observations": ["x"]});
        assert_eq!(sanitize(&v, &ForbiddenPatterns::default()), v);
    }

    #[test]
    fn sanitize_redacts_matching_observation() {
        let v = json!({"observations": ["ls", "please rm -rf /tmp", "ok"]});
        let out = sanitize(&v, &patterns(&["rm -rf"], &[]));
        assert_eq!(out, json!({"observations": ["ls", REDACTED, "ok"]}));
    }

    #[test]
    fn sanitize_isolates_digest() {
        let v = json!({"layer_id": 1, "state_digest": "secret:abc", "observations": ["a secret:x mid-string"]});
        let out = sanitize(&v, &patterns(&[], &["secret:"]));
        assert_eq!(out["state_digest"], json!(REDACTED));
        assert_eq!(out["observations"], v["observations"]);
        assert_eq!(out["layer_id"], v["layer_id"]);
    }

    #[test]
    fn summary_large_budget_no_op() {
        let raw = json!({"layer_id": 1, "timestamp": 3.0, "state_digest": "a b", "observations": ["x y"]});
        let out = project_summary(&raw, 1_000_000, &Fallback::default(), &ForbiddenPatterns::default()).unwrap();
        assert_eq!(out.status, ValidationStatus::Valid);
        assert_eq!(out.message.to_value(), raw);
    }

    #[test]
    fn summary_over_budget_drops_last_observations() {
        let obs = vec!["one two", "three four", "five six"];
        let raw = json!({"layer_id": 1, "timestamp": 3.0, "state_digest": "d", "observations": obs});
        assert_eq!(token_count(&raw), 4);
        let out = project_summary(&raw, 3, &Fallback::default(), &ForbiddenPatterns::default()).unwrap();
        let m = out.message.as_summary().unwrap();
        assert_eq!(m.observations.as_deref().unwrap(), &["one two".to_string(), "three four".to_string()]);
        assert_eq!(token_count(&out.message.to_value()), 3);
        assert_eq!(out.status, ValidationStatus::Repaired);
    }

    #[test]
    fn summary_budget_one_cuts_digest() {
        let raw = json!({"layer_id": 1, "timestamp": 3.0, "state_digest": "many words here", "resources": {"api_calls": 2}});
        let out = project_summary(&raw, 1, &Fallback::default(), &ForbiddenPatterns::default()).unwrap();
        assert_eq!(token_count(&out.message.to_value()), 1);
        assert_eq!(out.message.as_summary().unwrap().state_digest, "many");
    }

    #[test]
    fn summary_zero_budget_rejected() {
        let raw = json!({});
        assert!(project_summary(&raw, 0, &Fallback::default(), &ForbiddenPatterns::default()).is_err());
    }

    fn plan_with(subgoals: Value) -> Value {
        json!({"goal_id": "g", "priority": 0.5, "subgoals": subgoals})
    }

    fn tau_from_extra(g: &Subgoal) -> f64 {
        g.extra.get("tau_min").and_then(Value::as_f64).unwrap_or(0.0)
    }

    #[test]
    fn plan_within_scale_unchanged() {
        let raw = plan_with(json!([
            {"id": "a", "description": "", "success_criteria": "", "tau_min": 1.0},
            {"id": "b", "description": "", "success_criteria": "", "tau_min": 10.0}
        ]));
        let out = project_plan(&raw, 10.0, &tau_from_extra, &Fallback::default()).unwrap();
        assert_eq!(out.status, ValidationStatus::Valid);
        assert_eq!(out.message.to_value(), raw);
    }

    #[test]
    fn plan_removes_slow_subgoal_and_dangling_dependency() {
        let raw = plan_with(json!([
            {"id": "a", "description": "", "success_criteria": "", "dependencies": ["b"]},
            {"id": "b", "description": "", "success_criteria": "", "tau_min": 20.0},
            {"id": "c", "description": "", "success_criteria": "", "dependencies": ["a"]}
        ]));
        let out = project_plan(&raw, 10.0, &tau_from_extra, &Fallback::default()).unwrap();
        assert_eq!(out.status, ValidationStatus::Repaired);
        let plan = out.message.as_plan().unwrap();
        let ids: Vec<&str> = plan.subgoals.iter().map(|g| g.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(plan.subgoals[0].dependencies.as_deref().unwrap(), &[] as &[String]);
        assert_eq!(plan.subgoals[1].dependencies.as_deref().unwrap(), &["a".to_string()]);
    }

    #[test]
    fn plan_rejects_nonpositive_tau() {
        assert!(project_plan(&plan_with(json!([])), 0.0, &tau_from_extra, &Fallback::default()).is_err());
    }

    #[test]
    fn policy_priority_clamped() {
        let raw = json!({"rules": [{"id": "r", "condition": "c", "action": "allow", "priority": 150}]});
        let out = project_policy(&raw, &Fallback::default());
        assert_eq!(out.status, ValidationStatus::Repaired);
        assert_eq!(out.message.as_policy().unwrap().rules[0].priority, Some(100));
    }
}
