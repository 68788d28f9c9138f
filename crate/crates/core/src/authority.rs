//! Per-layer authority manifolds and projection of out-of-scope proposals.
//!
//! A proposal is inside layer `l`'s manifold when its time-scale interval
//! contains the layer's characteristic time and its category is one the
//! layer may decide. Anything else is projected: through a configured
//! category downgrade when one exists, otherwise to a no-op.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuthorityError {
    #[error("invalid proposal `{id}`: {reason}")]
    InvalidProposal { id: String, reason: String },
    #[error("invalid manifold for layer {layer}: {reason}")]
    InvalidManifold { layer: usize, reason: String },
    #[error("no manifold configured for layer {0}")]
    UnknownLayer(usize),
    #[error("verifier returned {0}, outside [0, 1]")]
    VerifierContract(f64),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
}

macro_rules! categories {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Decision categories a proposal can fall into.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum Category {
            $($variant),*
        }

        impl Category {
            pub const ALL: &'static [Category] = &[$(Category::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Category::$variant => $name),*
                }
            }
        }

        impl FromStr for Category {
            type Err = AuthorityError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(Category::$variant),)*
                    other => Err(AuthorityError::UnknownCategory(other.to_string())),
                }
            }
        }
    };
}

categories! {
    ToolInvocation => "tool_invocation",
    ParameterSelection => "parameter_selection",
    ErrorRetry => "error_retry",
    ImmediateResponse => "immediate_response",
    StepOrdering => "step_ordering",
    LocalOptimization => "local_optimization",
    MemoryUpdate => "memory_update",
    SubtaskSplit => "subtask_split",
    PlanRevision => "plan_revision",
    GoalDecomposition => "goal_decomposition",
    ResourceAllocation => "resource_allocation",
    DeadlineSetting => "deadline_setting",
    PolicyUpdate => "policy_update",
    ThresholdTuning => "threshold_tuning",
    ConstraintModification => "constraint_modification",
    MetaLearning => "meta_learning",
    Noop => "noop",
    Composite => "composite",
}

impl Category {
    /// Categories a single layer may propose; `Composite` only arises from
    /// arbitration.
    pub fn proposable() -> impl Iterator<Item = Category> {
        Self::ALL.iter().copied().filter(|c| *c != Category::Composite)
    }

    /// Reflex-layer categories treated as safety-critical in emergencies.
    pub fn is_safety(self) -> bool {
        matches!(self, Category::ErrorRetry | Category::ImmediateResponse)
    }

    /// Top-layer categories that enforce policy.
    pub fn is_policy_enforcement(self) -> bool {
        matches!(
            self,
            Category::PolicyUpdate | Category::ThresholdTuning | Category::ConstraintModification
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Encodes `+inf` as `null` so unbounded time scales survive JSON.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// A layer's candidate action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub id: String,
    pub layer: usize,
    pub category: Category,
    #[serde(default)]
    pub resources: BTreeSet<String>,
    #[serde(default)]
    pub effects: BTreeSet<String>,
    pub tau_min: f64,
    #[serde(with = "unbounded")]
    pub tau_max: f64,
    pub confidence: f64,
    #[serde(default)]
    pub urgency: f64,
    #[serde(default)]
    pub payload: Value,
}

impl ActionProposal {
    pub fn new(id: impl Into<String>, layer: usize, category: Category, tau_min: f64, tau_max: f64) -> Self {
        Self {
            id: id.into(),
            layer,
            category,
            resources: BTreeSet::new(),
            effects: BTreeSet::new(),
            tau_min,
            tau_max,
            confidence: 1.0,
            urgency: 0.0,
            payload: Value::Null,
        }
    }

    /// The always-admissible empty action.
    pub fn noop(id: impl Into<String>, layer: usize) -> Self {
        Self::new(id, layer, Category::Noop, 0.0, f64::INFINITY)
    }

    pub fn with_resources<I, S>(mut self, resources: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.resources = resources.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_effects<I, S>(mut self, effects: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.effects = effects.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn with_urgency(mut self, urgency: f64) -> Self {
        self.urgency = urgency;
        self
    }

    pub fn with_payload(mut self, payload: Value) -> Self {
        self.payload = payload;
        self
    }

    pub fn is_noop(&self) -> bool {
        self.category == Category::Noop
    }

    /// Checks the proposal invariants.
    pub fn check(&self) -> Result<(), AuthorityError> {
        let fail = |reason: &str| {
            Err(AuthorityError::InvalidProposal {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.layer == 0 {
            return fail("layer must be >= 1");
        }
        if !(self.tau_min >= 0.0) || self.tau_min.is_infinite() || self.tau_max.is_nan() {
            return fail("tau_min must be finite and nonnegative");
        }
        if self.tau_min > self.tau_max {
            return fail("tau_min exceeds tau_max");
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return fail("confidence outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.urgency) {
            return fail("urgency outside [0, 1]");
        }
        for e in &self.effects {
            if let Some(base) = e.strip_prefix('!') {
                if self.effects.contains(base) {
                    return fail("effects contain both a token and its negation");
                }
            }
        }
        Ok(())
    }
}

/// Per-layer characteristic time and decision scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorityManifold {
    pub layer: usize,
    pub name: String,
    pub tau: f64,
    pub permitted: BTreeSet<Category>,
    pub forbidden: BTreeSet<Category>,
    #[serde(default)]
    pub downgrade: BTreeMap<Category, Category>,
}

impl AuthorityManifold {
    pub fn check(&self) -> Result<(), AuthorityError> {
        let fail = |reason: String| {
            Err(AuthorityError::InvalidManifold {
                layer: self.layer,
                reason,
            })
        };
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return fail("tau must be positive and finite".into());
        }
        if let Some(c) = self.permitted.intersection(&self.forbidden).next() {
            return fail(format!("`{c}` both permitted and forbidden"));
        }
        if !self.permitted.contains(&Category::Noop) {
            return fail("noop must be permitted".into());
        }
        if self.permitted.contains(&Category::Composite) {
            return fail("composite is not a proposable category".into());
        }
        for (from, to) in &self.downgrade {
            if !self.permitted.contains(to) {
                return fail(format!("downgrade {from} -> {to} targets a category outside the manifold"));
            }
        }
        Ok(())
    }
}

/// Authority manifolds for every layer, fastest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorityTable {
    pub layers: Vec<AuthorityManifold>,
}

impl AuthorityTable {
    pub fn new(layers: Vec<AuthorityManifold>) -> Result<Self, AuthorityError> {
        let table = Self { layers };
        table.check()?;
        Ok(table)
    }

    pub fn check(&self) -> Result<(), AuthorityError> {
        for (i, m) in self.layers.iter().enumerate() {
            if m.layer != i + 1 {
                return Err(AuthorityError::InvalidManifold {
                    layer: m.layer,
                    reason: format!("expected layer {} at position {}", i + 1, i),
                });
            }
            m.check()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let table: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        table.check().map_err(|e| e.to_string())?;
        Ok(table)
    }

    pub fn manifold(&self, layer: usize) -> Result<&AuthorityManifold, AuthorityError> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or(AuthorityError::UnknownLayer(layer))
    }

    /// The four-layer reference table: Reflex, Tactical, Strategic and
    /// Institutional, with characteristic times 0.1 s, 10 s, 600 s and
    /// 86400 s.
    pub fn reference() -> Self {
        use Category::*;
        let manifold = |layer, name: &str, tau, permitted: &[Category], forbidden: &[Category], down: &[(Category, Category)]| {
            AuthorityManifold {
                layer,
                name: name.to_string(),
                tau,
                permitted: permitted.iter().copied().chain([Noop]).collect(),
                forbidden: forbidden.iter().copied().collect(),
                downgrade: down.iter().copied().collect(),
            }
        };
        Self {
            layers: vec![
                manifold(
                    1,
                    "reflex",
                    0.1,
                    &[ToolInvocation, ParameterSelection, ErrorRetry, ImmediateResponse],
                    // goal modification, plan changes, resource reallocation, policy updates
                    &[GoalDecomposition, PlanRevision, ResourceAllocation, PolicyUpdate],
                    &[],
                ),
                manifold(
                    2,
                    "tactical",
                    10.0,
                    &[StepOrdering, LocalOptimization, MemoryUpdate, SubtaskSplit],
                    // strategic commitments, safety rule changes, long-term resource binding
                    &[
                        PlanRevision,
                        GoalDecomposition,
                        DeadlineSetting,
                        PolicyUpdate,
                        ConstraintModification,
                        ResourceAllocation,
                    ],
                    &[(PlanRevision, SubtaskSplit), (GoalDecomposition, SubtaskSplit)],
                ),
                manifold(
                    3,
                    "strategic",
                    600.0,
                    &[PlanRevision, GoalDecomposition, ResourceAllocation, DeadlineSetting],
                    // immediate tool calls, policy modifications, constitutional changes
                    &[
                        ToolInvocation,
                        ImmediateResponse,
                        PolicyUpdate,
                        ThresholdTuning,
                        ConstraintModification,
                        MetaLearning,
                    ],
                    &[],
                ),
                manifold(
                    4,
                    "institutional",
                    86400.0,
                    &[PolicyUpdate, ThresholdTuning, ConstraintModification, MetaLearning],
                    // direct task execution, tactical decisions, immediate responses
                    &[
                        ToolInvocation,
                        ParameterSelection,
                        ErrorRetry,
                        StepOrdering,
                        LocalOptimization,
                        SubtaskSplit,
                        MemoryUpdate,
                        ImmediateResponse,
                    ],
                    &[],
                ),
            ],
        }
    }

    /// Reference table cut or extended to `n` layers. Layers past the
    /// fourth reuse the institutional scope with a geometrically growing
    /// time scale.
    pub fn for_layers(n: usize) -> Self {
        let reference = Self::reference();
        let mut layers: Vec<AuthorityManifold> = reference.layers.iter().take(n).cloned().collect();
        while layers.len() < n {
            let mut next = reference.layers[3].clone();
            next.layer = layers.len() + 1;
            next.name = format!("layer{}", next.layer);
            next.tau = layers.last().map_or(0.1, |m| m.tau * 10.0);
            layers.push(next);
        }
        Self { layers }
    }
}

/// True iff `tau_min <= man.tau <= tau_max` and the category is permitted.
pub fn within_authority(a: &ActionProposal, man: &AuthorityManifold) -> bool {
    a.tau_min <= man.tau && man.tau <= a.tau_max && man.permitted.contains(&a.category)
}

/// Projects `a` onto `man`. In-manifold proposals are returned unchanged;
/// a forbidden category with a configured downgrade is substituted (payload
/// kept) when the substitute fits the time scale; everything else becomes a
/// no-op that keeps the proposal's id and layer.
pub fn project_authority(a: &ActionProposal, man: &AuthorityManifold) -> ActionProposal {
    if within_authority(a, man) {
        return a.clone();
    }
    let scale_ok = a.tau_min <= man.tau && man.tau <= a.tau_max;
    if scale_ok {
        if let Some(&target) = man.downgrade.get(&a.category) {
            let mut sub = a.clone();
            sub.category = target;
            if within_authority(&sub, man) {
                return sub;
            }
        }
    }
    ActionProposal::noop(a.id.clone(), a.layer)
}

/// Post-hoc authority score in `[0, 1]` for a proposal at a layer.
pub trait VerifierHook {
    fn score(&self, a: &ActionProposal, layer: usize) -> f64;
}

/// Scores 1.0 for in-manifold proposals and 0.0 otherwise.
pub struct RuleVerifier<'a> {
    pub table: &'a AuthorityTable,
}

impl VerifierHook for RuleVerifier<'_> {
    fn score(&self, a: &ActionProposal, layer: usize) -> f64 {
        match self.table.manifold(layer) {
            Ok(man) if within_authority(a, man) => 1.0,
            _ => 0.0,
        }
    }
}

impl<F> VerifierHook for F
where
    F: Fn(&ActionProposal, usize) -> f64,
{
    fn score(&self, a: &ActionProposal, layer: usize) -> f64 {
        self(a, layer)
    }
}

pub fn verify(a: &ActionProposal, layer: usize, hook: &dyn VerifierHook) -> Result<f64, AuthorityError> {
    let s = hook.score(a, layer);
    if (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(AuthorityError::VerifierContract(s))
    }
}
