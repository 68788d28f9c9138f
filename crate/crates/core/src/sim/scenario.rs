//! Scenario files, scripted layer policies and the scripted environment.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::authority::{ActionProposal, AuthorityManifold, AuthorityTable, Category};
use crate::hierarchy::MappingParams;
use crate::matrix::Matrix;
use crate::messages::MessageKind;
use crate::runtime::{Environment, LayerInput, LayerOutput, LayerPolicy, Observation, Trigger};

use super::SimError;

fn default_layers() -> usize {
    4
}

fn default_dim() -> usize {
    8
}

/// A raw message a script emits; `body` may violate its schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMessage {
    pub kind: MessageKind,
    pub body: Value,
}

/// One scripted output. Without `at` the line applies at every step the
/// layer is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<ActionProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<ScriptMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// Add `eps` to the layer's state before the step.
    Perturb { eps: f64 },
    /// The layer also emits a schema-violating message.
    InvalidMessage,
    /// The layer proposes a category its manifold forbids.
    AuthorityOverreach,
    /// The layer (or layer 2, if the target is the fastest layer) is forced
    /// active and contends with the fastest layer for one resource.
    ConflictPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub step: u64,
    pub layer: usize,
    #[serde(flatten)]
    pub kind: FaultKind,
}

impl Fault {
    /// The slower member of a conflict pair.
    pub fn contender(&self) -> usize {
        if self.layer <= 1 {
            2
        } else {
            self.layer
        }
    }
}

/// Environment events at a given step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventLine {
    pub step: u64,
    #[serde(default)]
    pub triggers: BTreeSet<Trigger>,
    #[serde(default)]
    pub emergency: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub seed: u64,
    pub horizon: u64,
    #[serde(default = "default_layers")]
    pub n: usize,
    #[serde(default = "default_dim")]
    pub d: usize,
    /// Per-layer scripts, fastest first. A missing or empty entry means the
    /// layer runs its benign default.
    #[serde(default)]
    pub policy_scripts: Vec<Vec<ScriptLine>>,
    #[serde(default)]
    pub fault_plan: Vec<Fault>,
    #[serde(default)]
    pub events: Vec<EventLine>,
}

impl ScenarioScript {
    pub fn benign(seed: u64, horizon: u64, n: usize) -> Self {
        Self {
            seed,
            horizon,
            n,
            d: default_dim(),
            policy_scripts: Vec::new(),
            fault_plan: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.n == 0 || self.d == 0 {
            return bad("n and d must be at least 1".into());
        }
        if self.policy_scripts.len() > self.n {
            return bad(format!("{} policy scripts for {} layers", self.policy_scripts.len(), self.n));
        }
        for f in &self.fault_plan {
            if f.step == 0 || f.step > self.horizon {
                return bad(format!("fault step {} outside 1..={}", f.step, self.horizon));
            }
            if f.layer == 0 || f.layer > self.n {
                return bad(format!("fault layer {} outside 1..={}", f.layer, self.n));
            }
            if matches!(f.kind, FaultKind::ConflictPair) && self.n < 2 {
                return bad("conflict_pair needs at least two layers".into());
            }
            if let FaultKind::Perturb { eps } = f.kind {
                if !eps.is_finite() {
                    return bad("perturbation must be finite".into());
                }
            }
        }
        for (l, lines) in self.policy_scripts.iter().enumerate() {
            for line in lines {
                if let Some(p) = &line.proposal {
                    p.check().map_err(|e| SimError::InvalidScenario(format!("layer {}: {e}", l + 1)))?;
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let script: Self = serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    /// Layers forced active at `step` by faults.
    pub fn forced_at(&self, step: u64) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for f in self.fault_plan.iter().filter(|f| f.step == step) {
            match f.kind {
                FaultKind::Perturb { .. } => {}
                FaultKind::ConflictPair => {
                    out.insert(1);
                    out.insert(f.contender());
                }
                _ => {
                    out.insert(f.layer);
                }
            }
        }
        out
    }
}

/// Seeded mapping parameters: gated random residual mixing with static
/// entries drawn from `[0, 1.5)`.
pub fn seeded_params(n: usize, d: usize, seed: u64) -> MappingParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MappingParams::static_identity(n, d);
    p.alpha_res = 0.5;
    p.theta_res = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    p.b_res = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.5));
    p
}

/// The first category `man` permits besides no-op.
fn home_category(man: &AuthorityManifold) -> Category {
    man.permitted
        .iter()
        .copied()
        .find(|c| *c != Category::Noop)
        .unwrap_or(Category::Noop)
}

/// Deterministic stand-in for a layer's model.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    layer: usize,
    n: usize,
    manifold: AuthorityManifold,
    lines: Vec<ScriptLine>,
    faults: Vec<Fault>,
    /// Steps at which this layer contends for a shared resource.
    contested: BTreeSet<u64>,
}

impl ScriptedPolicy {
    pub fn new(layer: usize, script: &ScenarioScript, table: &AuthorityTable) -> Self {
        let faults: Vec<Fault> = script.fault_plan.iter().filter(|f| f.layer == layer).cloned().collect();
        let contested = script
            .fault_plan
            .iter()
            .filter(|f| matches!(f.kind, FaultKind::ConflictPair) && (layer == 1 || f.contender() == layer))
            .map(|f| f.step)
            .collect();
        Self {
            layer,
            n: script.n,
            manifold: table.manifold(layer).expect("table covers every layer").clone(),
            lines: script.policy_scripts.get(layer - 1).cloned().unwrap_or_default(),
            faults,
            contested,
        }
    }

    fn benign(&self, t: u64) -> LayerOutput {
        let tau = self.manifold.tau;
        let proposal = ActionProposal::new(
            format!("L{}-t{}", self.layer, t),
            self.layer,
            home_category(&self.manifold),
            tau / 10.0,
            tau * 10.0,
        )
        .with_resources([format!("layer:{}", self.layer)])
        .with_confidence(0.9);
        let message = if self.layer < self.n {
            (
                MessageKind::Summary,
                json!({
                    "layer_id": self.layer.min(4),
                    "timestamp": t as f64,
                    "state_digest": format!("layer{}:step{}", self.layer, t),
                }),
            )
        } else {
            (
                MessageKind::Policy,
                json!({"rules": [{"id": "baseline", "condition": "always", "action": "log"}]}),
            )
        };
        LayerOutput {
            proposal: Some(proposal),
            messages: vec![message],
        }
    }

    fn scripted(&self, t: u64) -> LayerOutput {
        let mut out = LayerOutput::default();
        for line in self.lines.iter().filter(|l| l.at.is_none_or(|s| s == t)) {
            if let Some(p) = &line.proposal {
                out.proposal = Some(p.clone());
            }
            if let Some(m) = &line.message {
                out.messages.push((m.kind, m.body.clone()));
            }
        }
        out
    }
}

impl LayerPolicy for ScriptedPolicy {
    fn act(&self, input: &LayerInput) -> Result<LayerOutput, String> {
        let t = input.t;
        let mut out = if self.lines.is_empty() {
            self.benign(t)
        } else {
            self.scripted(t)
        };
        for f in self.faults.iter().filter(|f| f.step == t) {
            match f.kind {
                FaultKind::InvalidMessage => {
                    let kind = if self.layer < self.n {
                        MessageKind::Summary
                    } else {
                        MessageKind::Policy
                    };
                    out.messages.push((kind, json!({"layer_id": "fast", "rules": "none", "observations": 7})));
                }
                FaultKind::AuthorityOverreach => {
                    let category = self.manifold.forbidden.iter().next().copied().unwrap_or(Category::Composite);
                    let tau = self.manifold.tau;
                    out.proposal = Some(
                        ActionProposal::new(format!("overreach-L{}-t{t}", self.layer), self.layer, category, tau / 10.0, tau * 10.0)
                            .with_resources([format!("layer:{}", self.layer)]),
                    );
                }
                FaultKind::Perturb { .. } | FaultKind::ConflictPair => {}
            }
        }
        if self.contested.contains(&t) {
            let tau = self.manifold.tau;
            let p = out.proposal.get_or_insert_with(|| {
                ActionProposal::new(
                    format!("L{}-t{t}", self.layer),
                    self.layer,
                    home_category(&self.manifold),
                    tau / 10.0,
                    tau * 10.0,
                )
            });
            p.resources.insert(format!("contested:{t}"));
        }
        Ok(out)
    }
}

/// Seeded observation stream with scripted trigger events; records every
/// emitted action.
#[derive(Debug, Clone)]
pub struct ScriptedEnv {
    seed: u64,
    d: usize,
    events: BTreeMap<u64, EventLine>,
    pub applied: Vec<(u64, Vec<ActionProposal>)>,
}

impl ScriptedEnv {
    pub fn new(script: &ScenarioScript) -> Self {
        Self {
            seed: script.seed,
            d: script.d,
            events: script.events.iter().map(|e| (e.step, e.clone())).collect(),
            applied: Vec::new(),
        }
    }

    /// Observation features at `t`, a pure function of `(seed, t)`.
    pub fn features(seed: u64, d: usize, t: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl Environment for ScriptedEnv {
    fn observe(&mut self, t: u64) -> Observation {
        let event = self.events.get(&t);
        Observation {
            features: Self::features(self.seed, self.d, t),
            fired: event.map(|e| e.triggers.clone()).unwrap_or_default(),
            emergency: event.is_some_and(|e| e.emergency),
        }
    }

    fn apply(&mut self, t: u64, actions: &[ActionProposal]) {
        self.applied.push((t, actions.to_vec()));
    }
}
