//! Selective activation and the fixed message topology.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RuntimeError;
use crate::messages::MessageKind;

/// Named events that wake a layer outside its period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    GoalCompletion,
    Anomaly,
    SessionBoundary,
}

impl Trigger {
    pub fn as_str(self) -> &'static str {
        match self {
            Trigger::GoalCompletion => "goal_completion",
            Trigger::Anomaly => "anomaly",
            Trigger::SessionBoundary => "session_boundary",
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Trigger {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "goal_completion" => Ok(Trigger::GoalCompletion),
            "anomaly" => Ok(Trigger::Anomaly),
            "session_boundary" => Ok(Trigger::SessionBoundary),
            other => Err(format!("unknown trigger `{other}`")),
        }
    }
}

/// Per-layer activation periods (`None` = never by period) and triggers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationConfig {
    pub period: Vec<Option<u64>>,
    pub triggers: Vec<Vec<Trigger>>,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self::for_layers(4)
    }
}

impl ActivationConfig {
    /// Reflex every step, Tactical every third step or on anomaly,
    /// Strategic on goal completion, Institutional (and anything above) at
    /// session boundaries.
    pub fn for_layers(n: usize) -> Self {
        let mut period = vec![Some(1), Some(3), None, None];
        let mut triggers = vec![
            vec![],
            vec![Trigger::Anomaly],
            vec![Trigger::GoalCompletion],
            vec![Trigger::SessionBoundary],
        ];
        period.resize(n, None);
        triggers.resize(n, vec![Trigger::SessionBoundary]);
        Self { period, triggers }
    }

    pub fn layers(&self) -> usize {
        self.period.len()
    }

    pub fn check(&self) -> Result<(), RuntimeError> {
        if self.period.is_empty() {
            return Err(RuntimeError::Config("activation needs at least one layer".into()));
        }
        if self.period.len() != self.triggers.len() {
            return Err(RuntimeError::Config("period and triggers differ in length".into()));
        }
        if self.period[0] != Some(1) {
            return Err(RuntimeError::Config("the fastest layer must have period 1".into()));
        }
        if self.period.iter().any(|p| *p == Some(0)) {
            return Err(RuntimeError::Config("periods must be at least 1".into()));
        }
        Ok(())
    }
}

/// `t mod k_l == 0` or any of the layer's triggers fired. Layers are
/// 1-based; unknown layers are never active.
pub fn is_active(layer: usize, t: u64, fired: &BTreeSet<Trigger>, cfg: &ActivationConfig) -> bool {
    let Some(idx) = layer.checked_sub(1).filter(|i| *i < cfg.layers()) else {
        return false;
    };
    let by_period = cfg.period[idx].is_some_and(|k| t % k == 0);
    by_period || cfg.triggers[idx].iter().any(|tr| fired.contains(tr))
}

/// A directed channel, identified by its sender and message kind.
pub type Channel = (usize, MessageKind);

/// Which channels reach which layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRouting {
    /// Summaries one level up, plans one level down, policies broadcast
    /// from the top layer.
    Hierarchical,
    /// Every layer hears every other layer on every kind.
    Broadcast,
}

impl MessageRouting {
    /// Receivers of a message of `kind` sent by `from` in an `n`-layer
    /// stack. Empty when the message is off-route.
    pub fn receivers(self, from: usize, kind: MessageKind, n: usize) -> Vec<usize> {
        if from == 0 || from > n {
            return Vec::new();
        }
        match self {
            MessageRouting::Broadcast => (1..=n).filter(|&l| l != from).collect(),
            MessageRouting::Hierarchical => match kind {
                MessageKind::Summary if from < n => vec![from + 1],
                MessageKind::Plan if from > 1 => vec![from - 1],
                MessageKind::Policy if from == n && n > 1 => (1..n).collect(),
                _ => Vec::new(),
            },
        }
    }

    /// Channels whose messages can reach `layer`.
    pub fn inbound(self, layer: usize, n: usize) -> BTreeSet<Channel> {
        let mut out = BTreeSet::new();
        for from in 1..=n {
            for kind in MessageKind::ALL {
                if self.receivers(from, kind, n).contains(&layer) {
                    out.insert((from, kind));
                }
            }
        }
        out
    }
}

/// Layers `i` and `j` may run concurrently when they share no inbound
/// channel and no declared resource.
pub fn can_parallel(
    i: usize,
    j: usize,
    routes: MessageRouting,
    n: usize,
    resources: &[BTreeSet<String>],
) -> bool {
    let disjoint_routes = routes.inbound(i, n).is_disjoint(&routes.inbound(j, n));
    let empty = BTreeSet::new();
    let res = |l: usize| l.checked_sub(1).and_then(|k| resources.get(k)).unwrap_or(&empty);
    disjoint_routes && res(i).is_disjoint(res(j))
}
