//! Typed inter-layer message contracts.
//!
//! Three packet kinds travel between layers: `Summary` upward, `Plan`
//! downward and `Policy` broadcast from the top layer. Every packet is
//! checked against its wire schema (shipped under `schemas/`) and, when it
//! does not conform, either repaired field by field or replaced by a safe
//! default. Whatever comes out of [`validate`] always conforms.

mod canonical;
mod projection;
mod schema;
mod types;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use canonical::{encode, parse, to_canonical_bytes, to_canonical_string, ParseError};
pub use projection::{
    project_plan, project_policy, project_summary, sanitize, token_count, truncate_summary, ForbiddenPatterns,
    REDACTED,
};
pub use schema::{SchemaNode, Violation, ViolationKind};
pub use types::{
    AnomalyFlag, AnomalyKind, PlanMessage, PolicyMessage, PolicyRule, ResourceUsage, RollbackAction,
    RollbackCondition, RuleAction, Subgoal, SummaryMessage,
};

use schema::Fate;

pub const SUMMARY_SCHEMA: &str = include_str!("../../../../schemas/summary.json");
pub const PLAN_SCHEMA: &str = include_str!("../../../../schemas/plan.json");
pub const POLICY_SCHEMA: &str = include_str!("../../../../schemas/policy.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("message does not satisfy the {kind} schema: {detail}")]
    Schema { kind: MessageKind, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Summary,
    Plan,
    Policy,
}

impl MessageKind {
    pub const ALL: [MessageKind; 3] = [MessageKind::Summary, MessageKind::Plan, MessageKind::Policy];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Summary => "summary",
            Self::Plan => "plan",
            Self::Policy => "policy",
        }
    }

    /// Raw schema text as shipped.
    pub fn schema_text(self) -> &'static str {
        match self {
            Self::Summary => SUMMARY_SCHEMA,
            Self::Plan => PLAN_SCHEMA,
            Self::Policy => POLICY_SCHEMA,
        }
    }

    pub fn schema(self) -> &'static SchemaNode {
        static NODES: OnceLock<[SchemaNode; 3]> = OnceLock::new();
        let nodes = NODES.get_or_init(|| {
            MessageKind::ALL.map(|k| {
                let v: Value = serde_json::from_str(k.schema_text()).expect("shipped schema is JSON");
                SchemaNode::load(&v).expect("shipped schema uses the supported subset")
            })
        });
        &nodes[self as usize]
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = ContractError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summary" => Ok(Self::Summary),
            "plan" => Ok(Self::Plan),
            "policy" => Ok(Self::Policy),
            other => Err(ContractError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Summary(SummaryMessage),
    Plan(PlanMessage),
    Policy(PolicyMessage),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Summary(_) => MessageKind::Summary,
            Self::Plan(_) => MessageKind::Plan,
            Self::Policy(_) => MessageKind::Policy,
        }
    }

    pub fn to_value(&self) -> Value {
        let v = match self {
            Self::Summary(m) => serde_json::to_value(m),
            Self::Plan(m) => serde_json::to_value(m),
            Self::Policy(m) => serde_json::to_value(m),
        };
        v.expect("typed messages always serialize")
    }

    pub fn from_value(kind: MessageKind, v: &Value) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            MessageKind::Summary => Self::Summary(SummaryMessage::deserialize(v)?),
            MessageKind::Plan => Self::Plan(PlanMessage::deserialize(v)?),
            MessageKind::Policy => Self::Policy(PolicyMessage::deserialize(v)?),
        })
    }

    /// Canonical byte form; also the cache identity of the message.
    pub fn serialize(&self) -> Vec<u8> {
        to_canonical_bytes(&self.to_value())
    }

    pub fn as_summary(&self) -> Option<&SummaryMessage> {
        match self {
            Self::Summary(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_plan(&self) -> Option<&PlanMessage> {
        match self {
            Self::Plan(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_policy(&self) -> Option<&PolicyMessage> {
        match self {
            Self::Policy(m) => Some(m),
            _ => None,
        }
    }

    /// The safe replacement used when a message cannot be repaired.
    pub fn default_for(kind: MessageKind, fallback: &Fallback) -> Self {
        match kind {
            MessageKind::Summary => Self::Summary(SummaryMessage::new(
                fallback.sender.clamp(1, 4) as i64,
                if fallback.now.is_finite() { fallback.now } else { 0.0 },
                "DEFAULT",
            )),
            MessageKind::Plan => Self::Plan(PlanMessage::new("noop", Vec::new(), 0.0)),
            MessageKind::Policy => Self::Policy(PolicyMessage::new(Vec::new())),
        }
    }
}

/// Parses canonical (or any JSON) bytes and checks them strictly against
/// the schema of `kind`. No repair is attempted.
pub fn parse_message(bytes: &[u8], kind: MessageKind) -> Result<Message, ContractError> {
    let v = parse(bytes)?;
    let violations = kind.schema().violations(&v);
    if let Some(first) = violations.first() {
        return Err(ContractError::Schema {
            kind,
            detail: first.to_string(),
        });
    }
    Message::from_value(kind, &v).map_err(|e| ContractError::Schema {
        kind,
        detail: e.to_string(),
    })
}

/// Sender and clock used to fill the default Summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fallback {
    pub sender: usize,
    pub now: f64,
}

impl Default for Fallback {
    fn default() -> Self {
        Self { sender: 1, now: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationStatus {
    Valid,
    Repaired,
    Defaulted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub status: ValidationStatus,
    pub message: Message,
    pub diagnostics: Vec<String>,
}

impl ValidationOutcome {
    /// Raises the status to at least `floor`.
    pub(crate) fn at_least(mut self, floor: ValidationStatus) -> Self {
        self.status = self.status.max(floor);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrepairable: {reason}")]
pub struct RepairFailure {
    pub reason: String,
}

/// Policy rules beyond this count are evicted lowest priority first.
pub const MAX_POLICY_RULES: usize = 20;

/// Deterministic field-level repair of a non-conforming candidate.
///
/// Passes run in a fixed order: drop forbidden or ill-typed fields, clamp
/// numbers, cut strings, cut lists, coerce enum spellings. Fails when a
/// required field is still absent.
pub fn repair(raw: &Value, kind: MessageKind) -> Result<Value, RepairFailure> {
    let schema = kind.schema();
    let mut v = raw.clone();
    if !v.is_object() {
        return Err(RepairFailure {
            reason: "candidate is not an object".into(),
        });
    }
    let fail_missing = |v: &Value| {
        let missing: Vec<String> = schema
            .violations(v)
            .into_iter()
            .filter(|x| x.path == "/" && matches!(x.kind, ViolationKind::MissingRequired(_)))
            .map(|x| x.to_string())
            .collect();
        RepairFailure {
            reason: if missing.is_empty() {
                "required field unrecoverable".into()
            } else {
                missing.join("; ")
            },
        }
    };
    if schema.drop_unknown(&mut v) == Fate::Drop {
        return Err(fail_missing(&v));
    }
    schema.clamp(&mut v);
    schema.truncate_strings(&mut v);
    if kind == MessageKind::Policy {
        evict_low_priority_rules(&mut v);
    }
    schema.truncate_lists(&mut v);
    if schema.coerce_enums(&mut v) == Fate::Drop {
        return Err(fail_missing(&v));
    }
    let left = schema.violations(&v);
    if let Some(first) = left.first() {
        return Err(RepairFailure {
            reason: first.to_string(),
        });
    }
    Ok(v)
}

fn evict_low_priority_rules(v: &mut Value) {
    let Some(rules) = v.get_mut("rules").and_then(Value::as_array_mut) else {
        return;
    };
    if rules.len() <= MAX_POLICY_RULES {
        return;
    }
    let key = |r: &Value| {
        let prio = r.get("priority").and_then(Value::as_i64).unwrap_or(0);
        let id = r.get("id").and_then(Value::as_str).unwrap_or("").to_string();
        (std::cmp::Reverse(prio), id)
    };
    rules.sort_by_cached_key(key);
    rules.truncate(MAX_POLICY_RULES);
}

pub fn validate(raw: &Value, kind: MessageKind) -> ValidationOutcome {
    validate_with(raw, kind, &Fallback::default())
}

/// Returns `raw` unchanged when it conforms, the repaired message when
/// repair succeeds, or the kind's default message otherwise.
pub fn validate_with(raw: &Value, kind: MessageKind, fallback: &Fallback) -> ValidationOutcome {
    let violations = kind.schema().violations(raw);
    let diagnostics: Vec<String> = violations.iter().map(ToString::to_string).collect();
    if violations.is_empty() {
        match Message::from_value(kind, raw) {
            Ok(message) => {
                return ValidationOutcome {
                    status: ValidationStatus::Valid,
                    message,
                    diagnostics,
                }
            }
            Err(e) => {
                return default_outcome(kind, fallback, vec![format!("typed decode failed: {e}")]);
            }
        }
    }
    match repair(raw, kind) {
        Ok(fixed) => match Message::from_value(kind, &fixed) {
            Ok(message) => ValidationOutcome {
                status: ValidationStatus::Repaired,
                message,
                diagnostics,
            },
            Err(e) => {
                let mut d = diagnostics;
                d.push(format!("typed decode failed: {e}"));
                default_outcome(kind, fallback, d)
            }
        },
        Err(failure) => {
            let mut d = diagnostics;
            d.push(failure.to_string());
            default_outcome(kind, fallback, d)
        }
    }
}

fn default_outcome(kind: MessageKind, fallback: &Fallback, diagnostics: Vec<String>) -> ValidationOutcome {
    ValidationOutcome {
        status: ValidationStatus::Defaulted,
        message: Message::default_for(kind, fallback),
        diagnostics,
    }
}
