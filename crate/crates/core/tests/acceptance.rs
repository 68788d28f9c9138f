//! Acceptance gate: one line per criterion, all must pass.
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::RngExt;
use serde_json::json;
use stratum_core::arbiter::{resolve, Context, PriorityConfig};
use stratum_core::authority::{project_authority, within_authority, ActionProposal, AuthorityTable, Category};
use stratum_core::matrix::Matrix;
use stratum_core::messages::{validate, MessageKind, ValidationStatus};
use stratum_core::runtime::{
    Environment, LayerInput, LayerOutput, LayerPolicy, Mode, Runtime, RuntimeConfig, Trigger,
};
use stratum_core::sim::{
    activation_experiment, amplification_experiment, constrain_chain, gain_experiment, overhead_experiment,
    sample_chain, seeded_params, EventLine, ScenarioScript, ScriptedEnv, Uniform,
};

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Outcome {
    let took = start.elapsed();
    ensure(took < budget, || format!("took {took:?}, budget {budget:?}"))
}

fn c1_gain_boundedness() -> Outcome {
    let start = Instant::now();
    let curve = gain_experiment(8, 1000, 42, 4, Uniform::default()).map_err(|e| e.to_string())?;
    within_budget(start, Duration::from_secs(10))?;
    ensure(curve.rows.len() == 8, || "expected 8 depths".into())?;
    let (lo, hi) = (1.0 - 1e-6, 1.0 + 1e-6);
    for r in &curve.rows {
        for v in [r.constrained_fwd_min, r.constrained_fwd_max, r.constrained_bwd_min, r.constrained_bwd_max] {
            ensure((lo..=hi).contains(&v), || format!("depth {}: constrained gain {v}", r.depth))?;
        }
    }
    let d4 = curve.rows[3].unconstrained_median;
    ensure(d4 >= 10.0, || format!("depth-4 unconstrained median {d4} < 10"))?;
    let medians: Vec<f64> = curve.rows.iter().map(|r| r.unconstrained_median).collect();
    ensure(medians.windows(2).all(|w| w[0] <= w[1]), || format!("medians not monotone: {medians:?}"))
}

fn naive_chain_gain(chain: &[Matrix]) -> f64 {
    let n = chain[0].rows();
    let mut acc: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for h in chain {
        let h = h.to_rows();
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = (0..n).map(|k| h[i][k] * acc[k][j]).sum();
            }
        }
        acc = next;
    }
    acc.iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn c2_error_amplification() -> Outcome {
    for trial in 0..1000 {
        let chain = constrain_chain(&sample_chain(4, 4, 42, trial, Uniform::default())).map_err(|e| e.to_string())?;
        let ratio = amplification_experiment(1e-3, &chain).map_err(|e| e.to_string())?;
        ensure(ratio <= 1.0 + 1e-6, || format!("trial {trial}: ratio {ratio}"))?;
        let naive = naive_chain_gain(&chain);
        ensure((ratio - naive).abs() <= 1e-9, || format!("trial {trial}: ratio {ratio} vs loop {naive}"))?;
    }
    for depth in 1..=8usize {
        let chain = vec![Matrix::scaled_identity(4, 2.0); depth];
        let ratio = amplification_experiment(1.0, &chain).map_err(|e| e.to_string())?;
        let exact = (1u64 << depth) as f64;
        ensure(ratio == exact, || format!("2I chain depth {depth}: {ratio} != {exact}"))?;
    }
    Ok(())
}

fn c3_traffic() -> Outcome {
    let start = Instant::now();
    let ns: Vec<usize> = (1..=8).collect();
    let rows = overhead_experiment(&ns).map_err(|e| e.to_string())?;
    within_budget(start, Duration::from_secs(1))?;
    for n in 1..=8u64 {
        let get = |m: Mode| {
            rows.iter()
                .find(|r| r.n as u64 == n && r.mode == m)
                .map(|r| (r.messages, r.comparisons))
                .ok_or_else(|| format!("missing row n={n} {m:?}"))
        };
        let ctha = get(Mode::Ctha)?;
        ensure(ctha == (2 * n - 1, n + 1), || format!("ctha n={n}: {ctha:?}"))?;
        let free = get(Mode::Unconstrained)?;
        let want = (n * (n - 1), n * n + n * (n - 1) / 2);
        ensure(free == want, || format!("unconstrained n={n}: {free:?} != {want:?}"))?;
        let single = get(Mode::SingleScale)?;
        ensure(single == (0, 0), || format!("single-scale n={n}: {single:?}"))?;
        if n == 4 {
            ensure(ctha == (7, 5) && free == (12, 22), || "n=4 totals differ from the reference totals".into())?;
        }
    }
    Ok(())
}

fn conflict_oracle(a: &ActionProposal, b: &ActionProposal) -> bool {
    a.resources.intersection(&b.resources).next().is_some()
        || a.effects.iter().any(|e| b.effects.contains(&format!("!{e}")))
        || b.effects.iter().any(|e| a.effects.contains(&format!("!{e}")))
}

fn c4_arbiter() -> Outcome {
    let start = Instant::now();
    let cfg = PriorityConfig::default();
    let enforce = [Category::PolicyUpdate, Category::ThresholdTuning, Category::ConstraintModification];
    let mut enforced = 0u64;
    for i in 0..100_000u64 {
        let mut r = common::rng(i, 40);
        let per_layer = i % 4 != 0;
        let mut ps = common::proposals(&mut r, 4, per_layer);
        if per_layer && r.random_bool(0.5) {
            let cat = enforce[r.random_range(0..enforce.len())];
            match ps.iter_mut().find(|p| p.layer == 4) {
                Some(p) => p.category = cat,
                None => ps.push(ActionProposal::new("inst", 4, cat, 1.0, 1e6).with_resources(["db"])),
            }
        }
        let ctx = Context { emergency: r.random_bool(0.2), step: i };
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let a = resolve(&ps, &ctx, &cfg);
            let b = resolve(&ps, &ctx, &cfg);
            (a, b)
        }));
        let (a, b) = outcome.map_err(|_| format!("set {i}: resolution panicked"))?;
        ensure(a.final_action.check().is_ok(), || format!("set {i}: invalid final action"))?;
        let sa = serde_json::to_vec(&a).map_err(|e| e.to_string())?;
        let sb = serde_json::to_vec(&b).map_err(|e| e.to_string())?;
        ensure(sa == sb, || format!("set {i}: non-deterministic bytes"))?;
        let survivors: Vec<&ActionProposal> = ps.iter().zip(&a.mask).filter(|(_, k)| **k).map(|(p, _)| p).collect();
        for (x, p) in survivors.iter().enumerate() {
            for q in &survivors[x + 1..] {
                ensure(!conflict_oracle(p, q), || format!("set {i}: survivors {} and {} conflict", p.id, q.id))?;
            }
        }
        if per_layer {
            for (k, p) in ps.iter().enumerate() {
                if p.layer == 4 && p.category.is_policy_enforcement() {
                    enforced += 1;
                    ensure(a.mask[k], || format!("set {i}: enforcement proposal {} masked", p.id))?;
                }
            }
        }
    }
    ensure(enforced > 10_000, || format!("only {enforced} enforcement proposals exercised"))?;
    within_budget(start, Duration::from_secs(60))
}

fn c5_messages() -> Outcome {
    let start = Instant::now();
    let oracle = common::Oracle::new();
    for kind in MessageKind::ALL {
        for i in 0..100_000u64 {
            let raw = common::candidate(&mut common::rng(i, 50 + kind as u64), kind);
            let out = validate(&raw, kind);
            let v = out.message.to_value();
            ensure(oracle.is_valid(kind, &v), || format!("{kind:?} #{i}: {raw} -> {v} fails schema"))?;
            let again = validate(&v, kind);
            ensure(again.status == ValidationStatus::Valid && again.message == out.message, || {
                format!("{kind:?} #{i}: not idempotent")
            })?;
        }
    }
    within_budget(start, Duration::from_secs(60))
}

/// Boundary table of forbidden decisions, one phrase group per comment.
fn reference_forbidden() -> BTreeMap<usize, Vec<&'static str>> {
    BTreeMap::from([
        // goal modification, plan changes, resource reallocation, policy updates
        (1, vec!["goal_decomposition", "plan_revision", "resource_allocation", "policy_update"]),
        // strategic commitments, safety rule changes, long-term resource binding
        (
            2,
            vec![
                "plan_revision",
                "goal_decomposition",
                "deadline_setting",
                "policy_update",
                "constraint_modification",
                "resource_allocation",
            ],
        ),
        // immediate tool calls, policy modifications, constitutional changes
        (
            3,
            vec![
                "tool_invocation",
                "immediate_response",
                "policy_update",
                "threshold_tuning",
                "constraint_modification",
                "meta_learning",
            ],
        ),
        // direct task execution, tactical decisions, immediate responses
        (
            4,
            vec![
                "tool_invocation",
                "parameter_selection",
                "error_retry",
                "step_ordering",
                "local_optimization",
                "subtask_split",
                "memory_update",
                "immediate_response",
            ],
        ),
    ])
}

fn c6_authority() -> Outcome {
    let start = Instant::now();
    let table = AuthorityTable::reference();
    let bounds = [0.0, 1e-3, 0.05, 0.1, 1.0, 5.0, 10.0, 100.0, 600.0, 3600.0, 86_400.0, 1e6, f64::INFINITY];
    let mut checked = 0u64;
    for layer in 1..=4 {
        let man = table.manifold(layer).map_err(|e| e.to_string())?;
        for cat in Category::proposable() {
            for &lo in &bounds {
                for &hi in bounds.iter().filter(|&&hi| hi >= lo && lo.is_finite()) {
                    let a = ActionProposal::new(format!("{cat}-{lo}-{hi}"), layer, cat, lo, hi);
                    let p = project_authority(&a, man);
                    ensure(within_authority(&p, man), || format!("layer {layer}: {a:?} projected outside"))?;
                    checked += 1;
                }
            }
        }
        for name in &reference_forbidden()[&layer] {
            let cat: Category = name.parse().map_err(|_| format!("unknown category {name}"))?;
            ensure(man.forbidden.contains(&cat), || format!("layer {layer} does not list {name} as forbidden"))?;
            for &lo in &bounds {
                for &hi in bounds.iter().filter(|&&hi| hi >= lo && lo.is_finite()) {
                    let a = ActionProposal::new("f", layer, cat, lo, hi);
                    ensure(!within_authority(&a, man), || format!("layer {layer} accepts {name}"))?;
                    let p = project_authority(&a, man);
                    ensure(p.category != cat, || format!("layer {layer} lets {name} through projection"))?;
                }
            }
        }
    }
    ensure(checked > 1000, || "too few variants".into())?;
    within_budget(start, Duration::from_secs(1))
}

fn c7_activation() -> Outcome {
    let script = ScenarioScript::benign(42, 12, 4);
    let report = activation_experiment(&script, 12).map_err(|e| e.to_string())?;
    let mut expected_hist = BTreeMap::new();
    for t in 1..=12u64 {
        let k = 1 + usize::from(t % 3 == 0);
        *expected_hist.entry(k).or_insert(0u64) += 1;
        let want: Vec<usize> = if t % 3 == 0 { vec![1, 2] } else { vec![1] };
        ensure(report.pattern[t as usize - 1] == want, || {
            format!("step {t}: {:?} != {want:?}", report.pattern[t as usize - 1])
        })?;
    }
    ensure(report.histogram == expected_hist, || format!("histogram {:?}", report.histogram))?;
    ensure(expected_hist == BTreeMap::from([(1, 8), (2, 4)]), || "enumeration drifted".into())?;

    let mut triggered = script.clone();
    triggered.events.push(EventLine {
        step: 6,
        triggers: BTreeSet::from([Trigger::GoalCompletion]),
        emergency: false,
    });
    let report = activation_experiment(&triggered, 12).map_err(|e| e.to_string())?;
    ensure(report.pattern[5].contains(&3), || format!("step 6 active {:?}", report.pattern[5]))?;
    let elsewhere = report.pattern.iter().enumerate().any(|(k, p)| k != 5 && p.contains(&3));
    ensure(!elsewhere, || "strategic active without a trigger".into())
}

/// A memory-free reflex policy: a pure function of observation and step.
fn reflex_pi(observation: &[f64], t: u64) -> ActionProposal {
    let s: f64 = observation.iter().sum();
    let (cat, lo, hi) = if t % 17 == 0 {
        (Category::PlanRevision, 0.01, 1.0)
    } else if s >= 0.0 {
        (Category::ToolInvocation, 0.01, 1.0)
    } else {
        (Category::ParameterSelection, 0.01, 1.0)
    };
    ActionProposal::new(format!("a{t}"), 1, cat, lo, hi)
        .with_resources([format!("slot:{}", (s.abs() * 10.0) as i64 % 5)])
        .with_confidence(observation[0].abs().min(1.0))
        .with_payload(json!({"sum": s}))
}

struct Reflex;

impl LayerPolicy for Reflex {
    fn act(&self, input: &LayerInput) -> Result<LayerOutput, String> {
        if input.t % 23 == 0 {
            return Ok(LayerOutput::default());
        }
        Ok(LayerOutput {
            proposal: Some(reflex_pi(&input.observation, input.t)),
            messages: vec![(MessageKind::Summary, json!({"layer_id": 1, "timestamp": 0, "state_digest": "x"}))],
        })
    }
}

struct Silent;

impl LayerPolicy for Silent {
    fn act(&self, _: &LayerInput) -> Result<LayerOutput, String> {
        Err("upper layers must not run in single-scale mode".into())
    }
}

fn c8_degeneracy() -> Outcome {
    let script = ScenarioScript::benign(7, 100, 4);
    let policies: Vec<Box<dyn LayerPolicy>> = vec![Box::new(Reflex), Box::new(Silent), Box::new(Silent), Box::new(Silent)];
    let mut rt = Runtime::new(
        RuntimeConfig::for_layers(4, Mode::SingleScale),
        AuthorityTable::reference(),
        PriorityConfig::default(),
        seeded_params(4, script.d, script.seed),
        policies,
        script.d,
    )
    .map_err(|e| e.to_string())?;
    let mut env = ScriptedEnv::new(&script);
    let traces: Vec<_> = (0..100).map(|_| rt.step(&mut env)).collect();

    // Standalone loop: observe, act, apply.
    let mut oracle_env = ScriptedEnv::new(&script);
    for t in 1..=100u64 {
        let o = oracle_env.observe(t).features;
        let a = if t % 23 == 0 {
            ActionProposal::noop(format!("noop:1:{t}"), 1)
        } else {
            reflex_pi(&o, t)
        };
        oracle_env.apply(t, &[a]);
    }

    ensure(env.applied == oracle_env.applied, || "applied action streams differ".into())?;
    for (tr, (t, acts)) in traces.iter().zip(&oracle_env.applied) {
        ensure(tr.step == *t && tr.emitted == *acts && tr.final_action == acts[0], || {
            format!("step {t}: trace differs from loop")
        })?;
        ensure(tr.active_layers == vec![1] && tr.anomalies.is_empty(), || format!("step {t}: extra activity"))?;
        ensure(tr.messages_sent == 0 && tr.comparisons == 0 && tr.conflicts == 0, || format!("step {t}: traffic"))?;
    }
    let overreach = traces.iter().filter(|t| t.final_action.category == Category::PlanRevision).count();
    ensure(overreach == 5, || format!("expected 5 pass-through overreaches, saw {overreach}"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gain boundedness", c1_gain_boundedness),
        ("error amplification", c2_error_amplification),
        ("traffic accounting", c3_traffic),
        ("arbiter guarantees", c4_arbiter),
        ("message-contract safety", c5_messages),
        ("authority closure", c6_authority),
        ("activation pattern", c7_activation),
        ("single-scale degeneracy", c8_degeneracy),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match &outcome {
            Ok(()) => println!("criterion {} {name}: PASS ({took:.2?})", k + 1),
            Err(why) => {
                println!("criterion {} {name}: FAIL ({took:.2?}) {why}", k + 1);
                failed.push(k + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
