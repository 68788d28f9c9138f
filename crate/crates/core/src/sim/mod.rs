//! Scripted runs and the stability, overhead and activation experiments.

mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scenario::{
    seeded_params, EventLine, Fault, FaultKind, ScenarioScript, ScriptLine, ScriptMessage, ScriptedEnv, ScriptedPolicy,
};

use crate::arbiter::PriorityConfig;
use crate::authority::AuthorityTable;
use crate::hierarchy::{
    amax_gain, composite_mapping, project_doubly_stochastic, propagate_error, ErrorVector, HierarchyError,
    DEFAULT_PROJECTION_MAX_ITER, DEFAULT_PROJECTION_TOL,
};
use crate::matrix::Matrix;
use crate::runtime::{count_traffic, LayerPolicy, Mode, Runtime, RuntimeConfig, RuntimeError, StepTrace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid experiment parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Summary statistics derived from a run's traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub steps: u64,
    pub conflicts: u64,
    pub conflict_rate: f64,
    pub violations_blocked: u64,
    pub violations_blocked_rate: f64,
    pub violations_emitted: u64,
    pub actions_emitted: u64,
    pub cache_hits: u64,
    pub anomalies: u64,
    pub messages: u64,
    pub comparisons: u64,
    /// Forward gain of the composite of the first `k` recorded residual
    /// mappings, for `k = 1..=min(n, steps)`.
    pub gain_curve: Vec<f64>,
    /// Output error per unit error injected at the fastest layer, over the
    /// same composite.
    pub error_amplification: f64,
    /// Number of steps with exactly `k` active layers, keyed by `k`.
    pub active_histogram: BTreeMap<usize, u64>,
}

impl Aggregates {
    pub fn from_traces(traces: &[StepTrace], n: usize) -> Self {
        let steps = traces.len() as u64;
        let sum = |f: fn(&StepTrace) -> u64| traces.iter().map(f).sum::<u64>();
        let rate = |x: u64| if steps == 0 { 0.0 } else { x as f64 / steps as f64 };
        let conflicts = sum(|t| t.conflicts);
        let violations_blocked = sum(|t| t.violations_blocked);
        let chain: Vec<Matrix> = traces.iter().take(n).map(|t| t.h_res.clone()).collect();
        let gain_curve = (1..=chain.len())
            .map(|k| {
                composite_mapping(&chain, 0, k)
                    .and_then(|c| amax_gain(&c))
                    .map_or(f64::NAN, |g| g.fwd)
            })
            .collect();
        let error_amplification = if chain.is_empty() {
            1.0
        } else {
            amplification_experiment(1.0, &chain).unwrap_or(f64::NAN)
        };
        let mut active_histogram = BTreeMap::new();
        for t in traces {
            *active_histogram.entry(t.active_layers.len()).or_insert(0) += 1;
        }
        Self {
            steps,
            conflicts,
            conflict_rate: rate(conflicts),
            violations_blocked,
            violations_blocked_rate: rate(violations_blocked),
            violations_emitted: sum(|t| t.violations_emitted),
            actions_emitted: sum(|t| t.emitted.len() as u64),
            cache_hits: sum(|t| t.cache_hits),
            anomalies: traces.iter().map(|t| t.anomalies.len() as u64).sum(),
            messages: traces.iter().map(|t| count_traffic(t).0).sum(),
            comparisons: traces.iter().map(|t| count_traffic(t).1).sum(),
            gain_curve,
            error_amplification,
            active_histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub seed: u64,
    pub horizon: u64,
    pub n: usize,
    pub aggregates: Aggregates,
    pub traces: Vec<StepTrace>,
}

/// Builds the runtime a scenario runs on.
pub fn build_runtime(script: &ScenarioScript, mode: Mode) -> Result<Runtime, SimError> {
    script.check()?;
    let n = script.n;
    let table = AuthorityTable::for_layers(n);
    let policies: Vec<Box<dyn LayerPolicy>> = (1..=n)
        .map(|l| Box::new(ScriptedPolicy::new(l, script, &table)) as Box<dyn LayerPolicy>)
        .collect();
    let rt = Runtime::new(
        RuntimeConfig::for_layers(n, mode),
        table,
        PriorityConfig::default(),
        seeded_params(n, script.d, script.seed),
        policies,
        script.d,
    )?;
    Ok(rt)
}

/// Runs `script` for its horizon, applying faults at their steps.
pub fn run_scenario(script: &ScenarioScript, mode: Mode) -> Result<ExperimentReport, SimError> {
    let rt = build_runtime(script, mode)?;
    run_with(rt, script)
}

/// [`run_scenario`] on a caller-built runtime.
pub fn run_with(mut rt: Runtime, script: &ScenarioScript) -> Result<ExperimentReport, SimError> {
    let mut env = ScriptedEnv::new(script);
    let mut traces = Vec::with_capacity(script.horizon as usize);
    for step in 1..=script.horizon {
        for f in script.fault_plan.iter().filter(|f| f.step == step) {
            if let FaultKind::Perturb { eps } = f.kind {
                rt.perturb(f.layer, eps)?;
            }
        }
        let forced = script.forced_at(step);
        traces.push(rt.step_with(&mut env, &forced));
    }
    let n = rt.layers();
    Ok(ExperimentReport {
        mode: rt.mode(),
        seed: script.seed,
        horizon: script.horizon,
        n,
        aggregates: Aggregates::from_traces(&traces, n),
        traces,
    })
}

/// Entry distribution of sampled residual mappings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Uniform {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub depth: usize,
    pub unconstrained_q10: f64,
    pub unconstrained_median: f64,
    pub unconstrained_q90: f64,
    pub constrained_median: f64,
    pub constrained_fwd_min: f64,
    pub constrained_fwd_max: f64,
    pub constrained_bwd_min: f64,
    pub constrained_bwd_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub distribution: Uniform,
    pub rows: Vec<GainRow>,
}

/// Residual chain of one trial, a pure function of `(seed, trial)`.
pub fn sample_chain(n: usize, depth: usize, seed: u64, trial: u64, dist: Uniform) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    (0..depth)
        .map(|_| Matrix::from_fn(n, n, |_, _| dist.lo + (dist.hi - dist.lo) * rng.random::<f64>()))
        .collect()
}

/// Projects every matrix of a chain onto the doubly stochastic set.
pub fn constrain_chain(chain: &[Matrix]) -> Result<Vec<Matrix>, HierarchyError> {
    chain
        .iter()
        .map(|h| project_doubly_stochastic(h, DEFAULT_PROJECTION_TOL, DEFAULT_PROJECTION_MAX_ITER).map(|p| p.matrix))
        .collect()
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Composite-gain statistics per depth for random chains and their
/// projected counterparts.
pub fn gain_experiment(depth: usize, trials: usize, seed: u64, n: usize, dist: Uniform) -> Result<GainCurve, SimError> {
    if depth == 0 || trials == 0 || n == 0 {
        return Err(SimError::Params("depth, trials and n must be at least 1".into()));
    }
    if !(dist.lo <= dist.hi) || !dist.lo.is_finite() || !dist.hi.is_finite() {
        return Err(SimError::Params("distribution bounds must be finite with lo <= hi".into()));
    }
    let mut free = vec![Vec::with_capacity(trials); depth];
    let mut fwd = vec![Vec::with_capacity(trials); depth];
    let mut bwd = vec![Vec::with_capacity(trials); depth];
    for trial in 0..trials as u64 {
        let chain = sample_chain(n, depth, seed, trial, dist);
        let constrained = constrain_chain(&chain)?;
        let (mut acc_free, mut acc_con) = (Matrix::identity(n), Matrix::identity(n));
        for k in 0..depth {
            acc_free = chain[k].matmul(&acc_free);
            acc_con = constrained[k].matmul(&acc_con);
            free[k].push(amax_gain(&acc_free)?.fwd);
            let g = amax_gain(&acc_con)?;
            fwd[k].push(g.fwd);
            bwd[k].push(g.bwd);
        }
    }
    let rows = (0..depth)
        .map(|k| {
            for v in [&mut free[k], &mut fwd[k], &mut bwd[k]] {
                v.sort_by(f64::total_cmp);
            }
            GainRow {
                depth: k + 1,
                unconstrained_q10: quantile(&free[k], 0.1),
                unconstrained_median: median(&free[k]),
                unconstrained_q90: quantile(&free[k], 0.9),
                constrained_median: median(&fwd[k]),
                constrained_fwd_min: fwd[k][0],
                constrained_fwd_max: fwd[k][trials - 1],
                constrained_bwd_min: bwd[k][0],
                constrained_bwd_max: bwd[k][trials - 1],
            }
        })
        .collect();
    Ok(GainCurve {
        n,
        trials,
        seed,
        distribution: dist,
        rows,
    })
}

/// Output error per unit of error injected at the fastest layer only.
pub fn amplification_experiment(eps0: f64, chain: &[Matrix]) -> Result<f64, SimError> {
    if !(eps0 > 0.0) || !eps0.is_finite() {
        return Err(SimError::Params("eps0 must be positive".into()));
    }
    if chain.is_empty() {
        return Err(SimError::Params("chain must not be empty".into()));
    }
    let mut eps = vec![0.0; chain.len()];
    eps[0] = eps0;
    let total = propagate_error(&ErrorVector::new(eps)?, chain)?;
    Ok(total / eps0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub n: usize,
    pub mode: Mode,
    pub messages: u64,
    pub comparisons: u64,
}

/// One all-active step per `n` and mode, tabulating traffic.
pub fn overhead_experiment(n_range: &[usize]) -> Result<Vec<OverheadRow>, SimError> {
    let mut rows = Vec::new();
    for &n in n_range {
        if n == 0 {
            return Err(SimError::Params("n must be at least 1".into()));
        }
        let script = ScenarioScript::benign(42, 1, n);
        for mode in Mode::ALL {
            let mut rt = build_runtime(&script, mode)?;
            let mut env = ScriptedEnv::new(&script);
            let all: BTreeSet<usize> = (1..=n).collect();
            let trace = rt.step_with(&mut env, &all);
            let (messages, comparisons) = count_traffic(&trace);
            rows.push(OverheadRow {
                n,
                mode,
                messages,
                comparisons,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub horizon: u64,
    /// Active layers at each step, in step order.
    pub pattern: Vec<Vec<usize>>,
    pub histogram: BTreeMap<usize, u64>,
    pub mean_active: f64,
}

/// Activation pattern of `script` run for `horizon` steps in contracted
/// mode.
pub fn activation_experiment(script: &ScenarioScript, horizon: u64) -> Result<ActivationReport, SimError> {
    if horizon == 0 {
        return Err(SimError::Params("horizon must be at least 1".into()));
    }
    let mut script = script.clone();
    script.horizon = horizon;
    script.fault_plan.retain(|f| f.step <= horizon);
    let report = run_scenario(&script, Mode::Ctha)?;
    let pattern: Vec<Vec<usize>> = report.traces.iter().map(|t| t.active_layers.clone()).collect();
    let total: usize = pattern.iter().map(Vec::len).sum();
    Ok(ActivationReport {
        horizon,
        mean_active: total as f64 / horizon as f64,
        histogram: report.aggregates.active_histogram,
        pattern,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplification_of_doubling_chain() {
        let chain = vec![Matrix::scaled_identity(3, 2.0); 4];
        assert_eq!(amplification_experiment(1e-3, &chain).unwrap(), 16.0);
        let ident = vec![Matrix::identity(3); 5];
        assert_eq!(amplification_experiment(0.5, &ident).unwrap(), 1.0);
        assert!(amplification_experiment(0.0, &ident).is_err());
    }

    #[test]
    fn chains_are_pure_in_seed_and_trial() {
        let d = Uniform::default();
        assert_eq!(sample_chain(4, 3, 7, 11, d), sample_chain(4, 3, 7, 11, d));
        assert_ne!(sample_chain(4, 3, 7, 11, d), sample_chain(4, 3, 7, 12, d));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn overhead_small() {
        let rows = overhead_experiment(&[2]).unwrap();
        let get = |m| rows.iter().find(|r| r.mode == m).map(|r| (r.messages, r.comparisons)).unwrap();
        assert_eq!(get(Mode::Ctha), (3, 3));
        assert_eq!(get(Mode::Unconstrained), (2, 5));
        assert_eq!(get(Mode::SingleScale), (0, 0));
    }

    #[test]
    fn benign_run_is_clean() {
        let script = ScenarioScript::benign(1, 30, 4);
        let r = run_scenario(&script, Mode::Ctha).unwrap();
        assert_eq!(r.aggregates.conflicts, 0);
        assert_eq!(r.aggregates.violations_blocked, 0);
        assert_eq!(r.aggregates.anomalies, 0);
    }

    #[test]
    fn invalid_scripts_rejected() {
        let mut s = ScenarioScript::benign(1, 10, 4);
        s.fault_plan.push(Fault {
            step: 11,
            layer: 1,
            kind: FaultKind::InvalidMessage,
        });
        assert!(s.check().is_err());
        assert!(ScenarioScript::benign(1, 0, 4).check().is_err());
    }
}
