//! Pairwise conflict detection and priority-based resolution.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::authority::{ActionProposal, Category};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArbiterError {
    #[error("survivors {0} and {1} conflict")]
    ConflictingSurvivors(usize, usize),
    #[error("invalid arbiter config: {0}")]
    Config(String),
}

/// Which member of a tied pair is masked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Mask the higher index so the faster layer survives.
    #[default]
    FasterLayer,
    /// Mask `argmin(i, j)`.
    LowerIndex,
}

/// Context passed to the priority function.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    #[serde(default)]
    pub emergency: bool,
    #[serde(default)]
    pub step: u64,
}

/// Additive learned term of the priority function. Must be pure.
pub trait ScoringHook: Send + Sync {
    /// One score per proposal, in input order.
    fn scores(&self, actions: &[ActionProposal], ctx: &Context) -> Vec<f64>;
}

impl<F> ScoringHook for F
where
    F: Fn(&[ActionProposal], &Context) -> Vec<f64> + Send + Sync,
{
    fn scores(&self, actions: &[ActionProposal], ctx: &Context) -> Vec<f64> {
        self(actions, ctx)
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct PriorityConfig {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(skip)]
    pub learned_hook: Option<Arc<dyn ScoringHook>>,
}

impl fmt::Debug for PriorityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PriorityConfig")
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("gamma", &self.gamma)
            .field("epsilon", &self.epsilon)
            .field("tie_break", &self.tie_break)
            .field("learned_hook", &self.learned_hook.as_ref().map(|_| "<hook>"))
            .finish()
    }
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.1, 0.2, 0.3, 0.4],
            beta: 0.5,
            gamma: 0.2,
            epsilon: 0.05,
            tie_break: TieBreak::FasterLayer,
            learned_hook: None,
        }
    }
}

impl PriorityConfig {
    pub fn check(&self) -> Result<(), ArbiterError> {
        if self.alpha.is_empty() {
            return Err(ArbiterError::Config("alpha must not be empty".into()));
        }
        if self.alpha.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ArbiterError::Config("alpha must be strictly increasing".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(ArbiterError::Config("epsilon must be positive".into()));
        }
        if ![self.beta, self.gamma].iter().chain(&self.alpha).all(|x| x.is_finite()) {
            return Err(ArbiterError::Config("weights must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ArbiterError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ArbiterError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn with_hook(mut self, hook: Arc<dyn ScoringHook>) -> Self {
        self.learned_hook = Some(hook);
        self
    }

    /// Base priority for `layer`; layers past the configured range continue
    /// the last step of `alpha`.
    pub fn alpha_for(&self, layer: usize) -> f64 {
        let idx = layer.max(1) - 1;
        if let Some(&a) = self.alpha.get(idx) {
            return a;
        }
        let last = *self.alpha.last().expect("alpha is non-empty");
        let step = match self.alpha.len() {
            1 => 0.1,
            k => last - self.alpha[k - 2],
        };
        last + step * (idx + 1 - self.alpha.len()) as f64
    }
}

/// True iff the proposals share a resource or one negates an effect of the
/// other (`x` versus `!x`).
pub fn detect_conflict(a: &ActionProposal, b: &ActionProposal) -> bool {
    if a.resources.intersection(&b.resources).next().is_some() {
        return true;
    }
    let negates = |x: &BTreeSet<String>, y: &BTreeSet<String>| {
        x.iter().any(|e| !e.starts_with('!') && y.contains(&format!("!{e}")))
    };
    negates(&a.effects, &b.effects) || negates(&b.effects, &a.effects)
}

fn urgency(a: &ActionProposal, ctx: &Context) -> f64 {
    if ctx.emergency && a.layer == 1 {
        1.0
    } else {
        a.urgency
    }
}

fn rule_priority(a: &ActionProposal, ctx: &Context, cfg: &PriorityConfig) -> f64 {
    cfg.alpha_for(a.layer) + cfg.beta * urgency(a, ctx) + cfg.gamma * a.confidence
}

fn learned_term(scores: &[f64], i: usize) -> f64 {
    scores.get(i).copied().filter(|s| s.is_finite()).unwrap_or(0.0)
}

/// Priority of a single proposal. The learned hook, if any, sees the
/// proposal alone.
pub fn priority(a: &ActionProposal, ctx: &Context, cfg: &PriorityConfig) -> f64 {
    let learned = cfg
        .learned_hook
        .as_ref()
        .map_or(0.0, |h| learned_term(&h.scores(std::slice::from_ref(a), ctx), 0));
    rule_priority(a, ctx, cfg) + learned
}

/// Protection rank: a higher rank always wins a conflict regardless of
/// priority. Policy enforcement from the top layer outranks emergency
/// reflex safety, which outranks everything else.
fn protection(a: &ActionProposal, ctx: &Context, top_layer: usize) -> u8 {
    if a.layer == top_layer && top_layer >= 2 && a.category.is_policy_enforcement() {
        2
    } else if ctx.emergency && a.layer == 1 && a.category.is_safety() {
        1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    #[serde(rename = "final")]
    pub final_action: ActionProposal,
    pub mask: Vec<bool>,
    pub conflicts: Vec<(usize, usize)>,
    pub priorities: Vec<f64>,
}

impl Resolution {
    pub fn survivors<'a>(&'a self, actions: &'a [ActionProposal]) -> impl Iterator<Item = &'a ActionProposal> {
        actions.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(a, _)| a)
    }
}

/// All conflicting index pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn conflict_pairs(actions: &[ActionProposal]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..actions.len() {
        for j in i + 1..actions.len() {
            if detect_conflict(&actions[i], &actions[j]) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Resolves the proposals to exactly one conflict-free action.
///
/// The top layer, for policy-enforcement protection, is taken as the
/// highest configured layer in `alpha` or the highest proposing layer,
/// whichever is larger.
pub fn resolve(actions: &[ActionProposal], ctx: &Context, cfg: &PriorityConfig) -> Resolution {
    let top = actions.iter().map(|a| a.layer).max().unwrap_or(0).max(cfg.alpha.len());
    resolve_with_top(actions, ctx, cfg, top)
}

/// [`resolve`] with an explicit top layer.
pub fn resolve_with_top(actions: &[ActionProposal], ctx: &Context, cfg: &PriorityConfig, top_layer: usize) -> Resolution {
    let conflicts = conflict_pairs(actions);
    let mut mask = vec![true; actions.len()];
    if conflicts.is_empty() {
        return Resolution {
            final_action: compose(actions).expect("conflict-free by construction"),
            mask,
            conflicts,
            priorities: Vec::new(),
        };
    }

    let learned = cfg.learned_hook.as_ref().map(|h| h.scores(actions, ctx)).unwrap_or_default();
    let priorities: Vec<f64> = actions
        .iter()
        .enumerate()
        .map(|(i, a)| rule_priority(a, ctx, cfg) + learned_term(&learned, i))
        .collect();
    let ranks: Vec<u8> = actions.iter().map(|a| protection(a, ctx, top_layer)).collect();

    for &(i, j) in &conflicts {
        let (pi, pj) = (priorities[i], priorities[j]);
        let loser = if ranks[i] != ranks[j] {
            if ranks[i] > ranks[j] { j } else { i }
        } else if pi > pj + cfg.epsilon {
            j
        } else if pj > pi + cfg.epsilon {
            i
        } else {
            match cfg.tie_break {
                TieBreak::FasterLayer => j.max(i),
                TieBreak::LowerIndex => i.min(j),
            }
        };
        mask[loser] = false;
    }

    let survivors: Vec<ActionProposal> = actions
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(a, _)| a.clone())
        .collect();
    let final_action = compose(&survivors).expect("every conflicting pair loses a member");
    Resolution {
        final_action,
        mask,
        conflicts,
        priorities,
    }
}

/// Combines pairwise conflict-free proposals into one action.
pub fn compose(survivors: &[ActionProposal]) -> Result<ActionProposal, ArbiterError> {
    if let Some(&(i, j)) = conflict_pairs(survivors).first() {
        return Err(ArbiterError::ConflictingSurvivors(i, j));
    }
    match survivors {
        [] => Ok(ActionProposal::noop("noop", 1)),
        [single] => Ok(single.clone()),
        many => {
            let mut ordered: Vec<&ActionProposal> = many.iter().collect();
            ordered.sort_by_key(|a| a.layer);
            let fold = |init: f64, f: fn(f64, f64) -> f64, get: fn(&ActionProposal) -> f64| {
                ordered.iter().map(|a| get(a)).fold(init, f)
            };
            Ok(ActionProposal {
                id: ordered.iter().map(|a| a.id.as_str()).collect::<Vec<_>>().join("+"),
                layer: ordered[0].layer,
                category: Category::Composite,
                resources: ordered.iter().flat_map(|a| a.resources.iter().cloned()).collect(),
                effects: ordered.iter().flat_map(|a| a.effects.iter().cloned()).collect(),
                tau_min: fold(f64::INFINITY, f64::min, |a| a.tau_min),
                tau_max: fold(0.0, f64::max, |a| a.tau_max),
                confidence: fold(1.0, f64::min, |a| a.confidence),
                urgency: fold(0.0, f64::max, |a| a.urgency),
                payload: Value::Array(
                    ordered
                        .iter()
                        .map(|a| serde_json::to_value(a).expect("proposals serialize"))
                        .collect(),
                ),
            })
        }
    }
}
