//! The per-step control loop: activation, message routing, policy
//! invocation, authority projection, arbitration and traffic accounting.

mod activation;
mod cache;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use activation::{can_parallel, is_active, ActivationConfig, Channel, MessageRouting, Trigger};
pub use cache::{Cached, MessageCache};

use crate::arbiter::{conflict_pairs, resolve_with_top, ArbiterError, Context, PriorityConfig, Resolution, TieBreak};
use crate::authority::{project_authority, within_authority, ActionProposal, AuthorityError, AuthorityTable};
use crate::hierarchy::{
    amax_gain, compute_mappings, normalize_state, propagate_layer, HierarchyError, LayeredState, MappingParams,
    DEFAULT_PROJECTION_MAX_ITER, DEFAULT_PROJECTION_TOL,
};
use crate::matrix::Matrix;
use crate::messages::{
    project_plan, project_policy, project_summary, Fallback, ForbiddenPatterns, MessageKind, Subgoal, ValidationStatus,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid runtime config: {0}")]
    Config(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error(transparent)]
    Arbiter(#[from] ArbiterError),
}

/// Which coordination regime a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Contracts, authority projection and arbitration.
    Ctha,
    /// Raw broadcast, every proposal reaches the environment.
    Unconstrained,
    /// Only the fastest layer runs.
    SingleScale,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ctha, Mode::Unconstrained, Mode::SingleScale];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ctha => "ctha",
            Mode::Unconstrained => "unconstrained",
            Mode::SingleScale => "single_scale",
        }
    }

    pub fn routing(self) -> MessageRouting {
        match self {
            Mode::Unconstrained => MessageRouting::Broadcast,
            _ => MessageRouting::Hierarchical,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ctha" => Ok(Mode::Ctha),
            "unconstrained" => Ok(Mode::Unconstrained),
            "single-scale" | "single_scale" => Ok(Mode::SingleScale),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// What the environment reports at the start of a step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub fired: BTreeSet<Trigger>,
    pub emergency: bool,
}

pub trait Environment {
    fn observe(&mut self, t: u64) -> Observation;
    fn apply(&mut self, t: u64, actions: &[ActionProposal]);
}

/// A message sitting in a layer's mailbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inbound {
    pub from: usize,
    pub kind: MessageKind,
    pub value: Value,
}

/// Immutable snapshot handed to a layer policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInput {
    pub layer: usize,
    pub t: u64,
    pub state_row: Vec<f64>,
    pub observation: Vec<f64>,
    pub inbox: Vec<Inbound>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerOutput {
    pub proposal: Option<ActionProposal>,
    /// Outbound messages, possibly malformed.
    pub messages: Vec<(MessageKind, Value)>,
}

/// A layer's decision procedure. Implementations must be pure functions of
/// their input so that layers can run concurrently.
pub trait LayerPolicy: Send + Sync {
    fn act(&self, input: &LayerInput) -> Result<LayerOutput, String>;

    /// Resources this layer may touch, used to decide concurrency.
    fn declared_resources(&self) -> BTreeSet<String> {
        BTreeSet::new()
    }
}

fn default_budgets() -> Vec<usize> {
    vec![256, 512, 1024, 2048]
}

fn default_true() -> bool {
    true
}

fn default_tol() -> f64 {
    DEFAULT_PROJECTION_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_PROJECTION_MAX_ITER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub mode: Mode,
    pub activation: ActivationConfig,
    /// Summary token budget per sending layer.
    #[serde(default = "default_budgets")]
    pub token_budgets: Vec<usize>,
    #[serde(default)]
    pub forbidden_patterns: ForbiddenPatterns,
    /// Overrides the arbiter's tie rule when set.
    #[serde(default)]
    pub tie_break: Option<TieBreak>,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default = "default_tol")]
    pub projection_tol: f64,
    #[serde(default = "default_max_iter")]
    pub projection_max_iter: usize,
}

impl RuntimeConfig {
    pub fn for_layers(n: usize, mode: Mode) -> Self {
        let mut token_budgets = default_budgets();
        while token_budgets.len() < n {
            let last = *token_budgets.last().expect("non-empty");
            token_budgets.push(last * 2);
        }
        token_budgets.truncate(n.max(1));
        Self {
            mode,
            activation: ActivationConfig::for_layers(n),
            token_budgets,
            forbidden_patterns: ForbiddenPatterns::default(),
            tie_break: None,
            parallel: true,
            projection_tol: DEFAULT_PROJECTION_TOL,
            projection_max_iter: DEFAULT_PROJECTION_MAX_ITER,
        }
    }

    pub fn layers(&self) -> usize {
        self.activation.layers()
    }

    pub fn check(&self) -> Result<(), RuntimeError> {
        self.activation.check()?;
        if self.token_budgets.len() < self.layers() {
            return Err(RuntimeError::Config("one token budget per layer required".into()));
        }
        if self.token_budgets.contains(&0) {
            return Err(RuntimeError::Config("token budgets must be positive".into()));
        }
        if !(self.projection_tol > 0.0) || self.projection_max_iter == 0 {
            return Err(RuntimeError::Config("projection needs tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RuntimeError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }
}

/// Everything recorded about one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub mode: Mode,
    pub active_layers: Vec<usize>,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub comparisons: u64,
    pub conflicts: u64,
    pub violations_blocked: u64,
    /// Emitted actions outside their layer's manifold.
    pub violations_emitted: u64,
    pub cache_hits: u64,
    pub messages_dropped: u64,
    pub messages_repaired: u64,
    pub messages_defaulted: u64,
    pub final_action: ActionProposal,
    /// Actions handed to the environment this step.
    pub emitted: Vec<ActionProposal>,
    pub resolution: Option<Resolution>,
    pub gain_fwd: f64,
    pub gain_bwd: f64,
    pub h_res: Matrix,
    pub anomalies: Vec<String>,
}

/// Per-step `(messages, comparisons)` under the accounting rules.
///
/// Contracted: one typed message per active non-top layer plus one
/// arbiter submission per active layer; one schema validation per active
/// layer plus one resolution. Unconstrained: all-pairs broadcast, with one
/// parse per (sender, receiver) including self and one conflict check per
/// unordered pair. Single-scale: no coordination traffic.
pub fn traffic_for(mode: Mode, n: usize, active: &[usize]) -> (u64, u64) {
    let a = active.len() as u64;
    match mode {
        Mode::Ctha => {
            let typed = active.iter().filter(|&&l| l < n).count() as u64;
            (typed + a, a + 1)
        }
        Mode::Unconstrained => (a * a.saturating_sub(1), a * a + a * a.saturating_sub(1) / 2),
        Mode::SingleScale => (0, 0),
    }
}

/// The trace's `(messages, comparisons)` totals.
pub fn count_traffic(trace: &StepTrace) -> (u64, u64) {
    (trace.messages_sent, trace.comparisons)
}

#[derive(Default)]
struct Counters {
    dropped: u64,
    repaired: u64,
    defaulted: u64,
    cache_hits: u64,
}

pub struct Runtime {
    cfg: RuntimeConfig,
    authority: AuthorityTable,
    priority: PriorityConfig,
    params: MappingParams,
    policies: Vec<Box<dyn LayerPolicy>>,
    state: LayeredState,
    t: u64,
    mailboxes: Vec<BTreeMap<Channel, Value>>,
    pending: Vec<(usize, MessageKind, Value)>,
    cache: MessageCache,
    last_rows: Vec<Option<Vec<u8>>>,
}

impl Runtime {
    pub fn new(
        cfg: RuntimeConfig,
        authority: AuthorityTable,
        mut priority: PriorityConfig,
        params: MappingParams,
        policies: Vec<Box<dyn LayerPolicy>>,
        dim: usize,
    ) -> Result<Self, RuntimeError> {
        cfg.check()?;
        authority.check()?;
        priority.check()?;
        let n = cfg.layers();
        if policies.len() != n {
            return Err(RuntimeError::Config(format!("{} policies for {n} layers", policies.len())));
        }
        if authority.layers.len() < n {
            return Err(RuntimeError::Config(format!("{} manifolds for {n} layers", authority.layers.len())));
        }
        params.check(n, dim)?;
        if let Some(tb) = cfg.tie_break {
            priority.tie_break = tb;
        }
        Ok(Self {
            state: LayeredState::zeros(n, dim)?,
            cfg,
            authority,
            priority,
            params,
            policies,
            t: 0,
            mailboxes: vec![BTreeMap::new(); n],
            pending: Vec::new(),
            cache: MessageCache::new(),
            last_rows: vec![None; n],
        })
    }

    pub fn layers(&self) -> usize {
        self.cfg.layers()
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn state(&self) -> &LayeredState {
        &self.state
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    /// Adds `eps` to the first feature of `layer`'s state row.
    pub fn perturb(&mut self, layer: usize, eps: f64) -> Result<(), RuntimeError> {
        let idx = layer
            .checked_sub(1)
            .filter(|i| *i < self.layers())
            .ok_or_else(|| RuntimeError::Config(format!("no layer {layer}")))?;
        let mut row = self.state.row(idx).to_vec();
        if let Some(first) = row.first_mut() {
            *first += eps;
        }
        self.state.set_row(idx, &row)?;
        Ok(())
    }

    pub fn step(&mut self, env: &mut dyn Environment) -> StepTrace {
        self.step_with(env, &BTreeSet::new())
    }

    /// Runs one step with `forced` layers active regardless of schedule.
    pub fn step_with(&mut self, env: &mut dyn Environment, forced: &BTreeSet<usize>) -> StepTrace {
        let t = self.t + 1;
        let n = self.layers();
        let mode = self.cfg.mode;
        let obs = env.observe(t);
        let mut anomalies = Vec::new();
        let mut counters = Counters::default();

        let active: Vec<usize> = match mode {
            Mode::SingleScale => vec![1],
            _ => (1..=n)
                .filter(|l| forced.contains(l) || is_active(*l, t, &obs.fired, &self.cfg.activation))
                .collect(),
        };

        let (h_res, gain_fwd, gain_bwd) = self.advance_state(&obs.features, &active, &mut anomalies);
        if mode != Mode::SingleScale {
            self.deliver();
        }

        let outputs = self.invoke(&active, t, &obs.features);
        let mut proposals = Vec::with_capacity(active.len());
        for (layer, result) in active.iter().copied().zip(outputs) {
            let changed = self.row_changed(layer);
            match result {
                Err(e) => {
                    anomalies.push(format!("layer {layer} policy failed: {e}"));
                    proposals.push(ActionProposal::noop(format!("noop:{layer}:{t}"), layer));
                }
                Ok(out) => {
                    if mode != Mode::SingleScale {
                        self.emit(layer, t, changed, out.messages, &mut counters);
                    }
                    if let Some(p) = out.proposal {
                        proposals.push(self.sanitize_proposal(p, layer, &mut anomalies));
                    }
                }
            }
            self.last_rows[layer - 1] = Some(row_bytes(self.state.row(layer - 1)));
        }

        let mut violations_blocked = 0;
        let mut resolution = None;
        let (emitted, conflicts) = match mode {
            Mode::Ctha => {
                let projected: Vec<ActionProposal> = proposals
                    .into_iter()
                    .map(|p| {
                        let out = self.enforce(&p);
                        if out != p {
                            violations_blocked += 1;
                        }
                        out
                    })
                    .filter(|p| !p.is_noop())
                    .collect();
                let ctx = Context {
                    emergency: obs.emergency,
                    step: t,
                };
                let res = resolve_with_top(&projected, &ctx, &self.priority, n);
                let conflicts = res.conflicts.len() as u64;
                let final_action = res.final_action.clone();
                resolution = Some(res);
                (vec![final_action], conflicts)
            }
            Mode::Unconstrained => {
                let emitted: Vec<ActionProposal> = proposals.into_iter().filter(|p| !p.is_noop()).collect();
                let conflicts = conflict_pairs(&emitted).len() as u64;
                (emitted, conflicts)
            }
            Mode::SingleScale => {
                let a = proposals
                    .into_iter()
                    .next()
                    .unwrap_or_else(|| ActionProposal::noop(format!("noop:1:{t}"), 1));
                (vec![a], 0)
            }
        };

        let violations_emitted: u64 = emitted.iter().map(|a| self.out_of_manifold(&components(a))).sum();

        let final_action = emitted
            .first()
            .cloned()
            .unwrap_or_else(|| ActionProposal::noop("noop", 1));
        env.apply(t, &emitted);

        let (messages, comparisons) = traffic_for(mode, n, &active);
        self.t = t;
        self.state = self.state.clone().with_step(t);
        StepTrace {
            step: t,
            mode,
            active_layers: active,
            messages_sent: messages,
            messages_received: messages,
            comparisons,
            conflicts,
            violations_blocked,
            violations_emitted,
            cache_hits: counters.cache_hits,
            messages_dropped: counters.dropped,
            messages_repaired: counters.repaired,
            messages_defaulted: counters.defaulted,
            final_action,
            emitted,
            resolution,
            gain_fwd,
            gain_bwd,
            h_res,
            anomalies,
        }
    }

    fn advance_state(&mut self, features: &[f64], active: &[usize], anomalies: &mut Vec<String>) -> (Matrix, f64, f64) {
        let d = self.state.dim();
        let mut obs_row: Vec<f64> = features.iter().copied().take(d).collect();
        obs_row.resize(d, 0.0);
        if obs_row.iter().any(|v| !v.is_finite()) {
            anomalies.push("non-finite observation replaced by zeros".into());
            obs_row = vec![0.0; d];
        }
        self.state.set_row(0, &obs_row).expect("row shape checked");
        if self.cfg.mode == Mode::SingleScale {
            return (Matrix::identity(1), 1.0, 1.0);
        }

        let n = self.layers();
        let identity = || (Matrix::identity(n), 1.0, 1.0);
        let mut mappings = match compute_mappings(&self.state, &self.params) {
            Ok(m) => m,
            Err(e) => {
                anomalies.push(format!("mapping synthesis failed: {e}"));
                return identity();
            }
        };
        if self.cfg.mode == Mode::Ctha {
            match mappings.constrained(self.cfg.projection_tol, self.cfg.projection_max_iter) {
                Ok((m, converged)) => {
                    if !converged {
                        anomalies.push("residual projection did not converge".into());
                    }
                    mappings = m;
                }
                Err(e) => {
                    anomalies.push(format!("residual projection failed: {e}"));
                    return identity();
                }
            }
        }
        let gain = amax_gain(&mappings.h_res).expect("non-empty mapping");
        let tanh = |v: &[f64]| v.iter().map(|x| x.tanh()).collect::<Vec<f64>>();
        match propagate_layer(&self.state, &mappings, &tanh) {
            Ok(next) => {
                let next = normalize_state(&next);
                for l in active {
                    self.state.set_row(l - 1, next.row(l - 1)).expect("row shape checked");
                }
            }
            Err(e) => anomalies.push(format!("propagation failed: {e}")),
        }
        (mappings.h_res, gain.fwd, gain.bwd)
    }

    fn deliver(&mut self) {
        let n = self.layers();
        let routing = self.cfg.mode.routing();
        for (from, kind, value) in std::mem::take(&mut self.pending) {
            for r in routing.receivers(from, kind, n) {
                self.mailboxes[r - 1].insert((from, kind), value.clone());
            }
        }
    }

    fn inbox(&self, layer: usize) -> Vec<Inbound> {
        self.mailboxes[layer - 1]
            .iter()
            .map(|(&(from, kind), value)| Inbound {
                from,
                kind,
                value: value.clone(),
            })
            .collect()
    }

    fn invoke(&self, active: &[usize], t: u64, observation: &[f64]) -> Vec<Result<LayerOutput, String>> {
        let inputs: Vec<LayerInput> = active
            .iter()
            .map(|&layer| LayerInput {
                layer,
                t,
                state_row: self.state.row(layer - 1).to_vec(),
                observation: observation.to_vec(),
                inbox: self.inbox(layer),
            })
            .collect();

        let n = self.layers();
        let routing = self.cfg.mode.routing();
        let resources: Vec<BTreeSet<String>> = self.policies.iter().map(|p| p.declared_resources()).collect();
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for (k, &layer) in active.iter().enumerate() {
            match batches.last_mut() {
                Some(batch)
                    if self.cfg.parallel
                        && batch
                            .iter()
                            .all(|&o| can_parallel(active[o], layer, routing, n, &resources)) =>
                {
                    batch.push(k)
                }
                _ => batches.push(vec![k]),
            }
        }

        let mut results: Vec<Option<Result<LayerOutput, String>>> = (0..active.len()).map(|_| None).collect();
        for batch in batches {
            if batch.len() == 1 {
                let k = batch[0];
                results[k] = Some(call_policy(self.policies[active[k] - 1].as_ref(), &inputs[k]));
                continue;
            }
            let outs: Vec<(usize, Result<LayerOutput, String>)> = std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|&k| {
                        let policy = self.policies[active[k] - 1].as_ref();
                        let input = &inputs[k];
                        (k, s.spawn(move || call_policy(policy, input)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|(k, h)| (k, h.join().unwrap_or_else(|_| Err("policy thread panicked".into()))))
                    .collect()
            });
            for (k, r) in outs {
                results[k] = Some(r);
            }
        }
        results.into_iter().map(|r| r.expect("every layer invoked")).collect()
    }

    fn row_changed(&self, layer: usize) -> bool {
        match &self.last_rows[layer - 1] {
            Some(prev) => *prev != row_bytes(self.state.row(layer - 1)),
            None => true,
        }
    }

    fn emit(&mut self, layer: usize, t: u64, changed: bool, messages: Vec<(MessageKind, Value)>, counters: &mut Counters) {
        let n = self.layers();
        let mode = self.cfg.mode;
        for (kind, raw) in messages {
            if mode.routing().receivers(layer, kind, n).is_empty() {
                counters.dropped += 1;
                continue;
            }
            let cfg = &self.cfg;
            let authority = &self.authority;
            let mut status = ValidationStatus::Valid;
            let cached = self.cache.lookup_or_insert(layer, kind, changed, || {
                if mode != Mode::Ctha {
                    return raw;
                }
                let (value, st) = project_outbound(cfg, authority, layer, kind, &raw, t);
                status = st;
                value
            });
            if cached.hit {
                counters.cache_hits += 1;
            }
            match status {
                ValidationStatus::Valid => {}
                ValidationStatus::Repaired => counters.repaired += 1,
                ValidationStatus::Defaulted => counters.defaulted += 1,
            }
            self.pending.push((layer, kind, cached.value));
        }
    }

    fn sanitize_proposal(&self, mut p: ActionProposal, layer: usize, anomalies: &mut Vec<String>) -> ActionProposal {
        if p.layer != layer {
            anomalies.push(format!("layer {layer} proposal `{}` claimed layer {}", p.id, p.layer));
            p.layer = layer;
        }
        if let Err(e) = p.check() {
            anomalies.push(format!("layer {layer}: {e}"));
            return ActionProposal::noop(p.id, layer);
        }
        p
    }

    /// Standing policy bans, then authority projection.
    fn enforce(&self, p: &ActionProposal) -> ActionProposal {
        if p.is_noop() {
            return p.clone();
        }
        if self.banned(p) {
            return ActionProposal::noop(p.id.clone(), p.layer);
        }
        match self.authority.manifold(p.layer) {
            Ok(man) => project_authority(p, man),
            Err(_) => ActionProposal::noop(p.id.clone(), p.layer),
        }
    }

    fn banned(&self, p: &ActionProposal) -> bool {
        self.mailboxes[p.layer - 1]
            .iter()
            .filter(|((_, kind), _)| *kind == MessageKind::Policy)
            .filter_map(|(_, v)| v.get("forbidden").and_then(Value::as_array))
            .flatten()
            .filter_map(Value::as_str)
            .any(|f| f == p.category.as_str() || p.resources.contains(f))
    }

    fn out_of_manifold(&self, actions: &[ActionProposal]) -> u64 {
        actions
            .iter()
            .filter(|a| match self.authority.manifold(a.layer) {
                Ok(man) => !within_authority(a, man),
                Err(_) => true,
            })
            .count() as u64
    }
}

/// Splits a composite action back into its component proposals.
pub fn components(a: &ActionProposal) -> Vec<ActionProposal> {
    if a.category != crate::authority::Category::Composite {
        return vec![a.clone()];
    }
    a.payload
        .as_array()
        .map(|items| {
            items
                .iter()
                .filter_map(|v| serde_json::from_value(v.clone()).ok())
                .collect()
        })
        .unwrap_or_default()
}

fn row_bytes(row: &[f64]) -> Vec<u8> {
    serde_json::to_vec(row).expect("finite rows serialize")
}

fn call_policy(policy: &dyn LayerPolicy, input: &LayerInput) -> Result<LayerOutput, String> {
    match catch_unwind(AssertUnwindSafe(|| policy.act(input))) {
        Ok(r) => r,
        Err(payload) => Err(payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "policy panicked".into())),
    }
}

fn subgoal_tau_min(g: &Subgoal) -> f64 {
    g.extra.get("tau_min").and_then(Value::as_f64).unwrap_or(0.0)
}

/// Applies the contract projection for a message on its fixed route.
fn project_outbound(
    cfg: &RuntimeConfig,
    authority: &AuthorityTable,
    from: usize,
    kind: MessageKind,
    raw: &Value,
    t: u64,
) -> (Value, ValidationStatus) {
    let fallback = Fallback {
        sender: from,
        now: t as f64,
    };
    let outcome = match kind {
        MessageKind::Summary => {
            let k = cfg.token_budgets[from - 1];
            project_summary(raw, k, &fallback, &cfg.forbidden_patterns).expect("budgets checked positive")
        }
        MessageKind::Plan => {
            let tau = authority.manifold(from - 1).map(|m| m.tau).expect("receiver exists");
            project_plan(raw, tau, &subgoal_tau_min, &fallback).expect("manifold taus are positive")
        }
        MessageKind::Policy => project_policy(raw, &fallback),
    };
    (outcome.message.to_value(), outcome.status)
}
