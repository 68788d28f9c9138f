//! Seeded generators shared by the integration tests.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use stratum_core::authority::{ActionProposal, Category};
use stratum_core::messages::MessageKind;

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const WORDS: &[&str] = &[
    "alpha", "beta", "ok", "rm -rf /", "secret:key", "ERROR", "Warning", "unexpected", "RETRY", "escalate", "Abort",
    "allow", "DENY", "log", "Log", "x y z", "", "noop", "deny ", "  spaced  out  ",
];

const KEYS: &[&str] = &[
    "layer_id", "timestamp", "state_digest", "observations", "anomalies", "resources", "type", "description",
    "tokens_used", "api_calls", "elapsed_seconds", "goal_id", "subgoals", "constraints", "priority", "deadline",
    "rollback", "id", "success_criteria", "dependencies", "condition", "action", "rules", "thresholds", "forbidden",
    "valid_until", "extra", "tau_min",
];

pub fn string(r: &mut ChaCha8Rng) -> String {
    match r.random_range(0..5) {
        0 => {
            let len = r.random_range(0..400);
            (0..len).map(|i| if i % 7 == 6 { ' ' } else { (b'a' + (i % 26) as u8) as char }).collect()
        }
        1 => "é✓".repeat(r.random_range(0..80)),
        _ => WORDS[r.random_range(0..WORDS.len())].to_string(),
    }
}

pub fn number(r: &mut ChaCha8Rng) -> Value {
    match r.random_range(0..6) {
        0 => json!(r.random_range(-300i64..300)),
        1 => json!(r.random_range(-300i64..300) as f64),
        2 => json!(r.random_range(-2.0..2.0f64)),
        3 => json!(r.random_range(-1e4..1e4f64)),
        4 => json!(r.random_range(0i64..5)),
        _ => json!(r.random_range(0.0..1.0f64)),
    }
}

pub fn any_value(r: &mut ChaCha8Rng, depth: u32) -> Value {
    let top = if depth == 0 { 4 } else { 6 };
    match r.random_range(0..top) {
        0 => Value::Null,
        1 => Value::Bool(r.random_bool(0.5)),
        2 => number(r),
        3 => Value::String(string(r)),
        4 => Value::Array((0..r.random_range(0..9)).map(|_| any_value(r, depth - 1)).collect()),
        _ => {
            let mut m = Map::new();
            for _ in 0..r.random_range(0..6) {
                let k = if r.random_bool(0.8) {
                    KEYS[r.random_range(0..KEYS.len())].to_string()
                } else {
                    string(r)
                };
                m.insert(k, any_value(r, depth - 1));
            }
            Value::Object(m)
        }
    }
}

/// Usually well-typed, sometimes not.
fn field(r: &mut ChaCha8Rng, good: impl FnOnce(&mut ChaCha8Rng) -> Value) -> Value {
    if r.random_bool(0.8) {
        good(r)
    } else {
        any_value(r, 2)
    }
}

fn maybe(r: &mut ChaCha8Rng, m: &mut Map<String, Value>, key: &str, p: f64, good: impl FnOnce(&mut ChaCha8Rng) -> Value) {
    if r.random_bool(p) {
        let v = field(r, good);
        m.insert(key.to_string(), v);
    }
}

fn list<F: FnMut(&mut ChaCha8Rng) -> Value>(r: &mut ChaCha8Rng, max: usize, mut item: F) -> Value {
    Value::Array((0..r.random_range(0..=max)).map(|_| item(r)).collect())
}

fn enum_word(r: &mut ChaCha8Rng, options: &[&str]) -> Value {
    let w = options[r.random_range(0..options.len())];
    let w = match r.random_range(0..3) {
        0 => w.to_uppercase(),
        1 => w.to_string(),
        _ => format!("{w}x"),
    };
    Value::String(w)
}

fn summary(r: &mut ChaCha8Rng) -> Value {
    let mut m = Map::new();
    maybe(r, &mut m, "layer_id", 0.95, number);
    maybe(r, &mut m, "timestamp", 0.95, number);
    maybe(r, &mut m, "state_digest", 0.95, |r| Value::String(string(r)));
    maybe(r, &mut m, "observations", 0.6, |r| list(r, 9, |r| Value::String(string(r))));
    maybe(r, &mut m, "anomalies", 0.5, |r| {
        list(r, 6, |r| {
            let mut a = Map::new();
            maybe(r, &mut a, "type", 0.8, |r| enum_word(r, &["error", "warning", "unexpected"]));
            maybe(r, &mut a, "description", 0.8, |r| Value::String(string(r)));
            maybe(r, &mut a, "extra", 0.2, |r| any_value(r, 1));
            Value::Object(a)
        })
    });
    maybe(r, &mut m, "resources", 0.5, |r| {
        let mut a = Map::new();
        maybe(r, &mut a, "tokens_used", 0.7, number);
        maybe(r, &mut a, "api_calls", 0.7, number);
        maybe(r, &mut a, "elapsed_seconds", 0.7, number);
        maybe(r, &mut a, "other", 0.2, |r| any_value(r, 1));
        Value::Object(a)
    });
    maybe(r, &mut m, "bogus", 0.1, |r| any_value(r, 2));
    Value::Object(m)
}

fn plan(r: &mut ChaCha8Rng) -> Value {
    let mut m = Map::new();
    maybe(r, &mut m, "goal_id", 0.95, |r| Value::String(string(r)));
    maybe(r, &mut m, "priority", 0.95, number);
    maybe(r, &mut m, "subgoals", 0.95, |r| {
        list(r, 14, |r| {
            let mut g = Map::new();
            maybe(r, &mut g, "id", 0.95, |r| Value::String(format!("g{}", r.random_range(0..12))));
            maybe(r, &mut g, "description", 0.95, |r| Value::String(string(r)));
            maybe(r, &mut g, "success_criteria", 0.95, |r| Value::String(string(r)));
            maybe(r, &mut g, "dependencies", 0.5, |r| {
                list(r, 4, |r| Value::String(format!("g{}", r.random_range(0..12))))
            });
            maybe(r, &mut g, "tau_min", 0.5, |r| json!(r.random_range(0.0..1000.0f64)));
            Value::Object(g)
        })
    });
    maybe(r, &mut m, "constraints", 0.5, |r| list(r, 8, |r| Value::String(string(r))));
    maybe(r, &mut m, "deadline", 0.4, |r| if r.random_bool(0.3) { Value::Null } else { number(r) });
    maybe(r, &mut m, "rollback", 0.4, |r| {
        let mut a = Map::new();
        maybe(r, &mut a, "condition", 0.8, |r| Value::String(string(r)));
        maybe(r, &mut a, "action", 0.8, |r| enum_word(r, &["retry", "escalate", "abort"]));
        Value::Object(a)
    });
    maybe(r, &mut m, "bogus", 0.1, |r| any_value(r, 2));
    Value::Object(m)
}

fn policy(r: &mut ChaCha8Rng) -> Value {
    let mut m = Map::new();
    maybe(r, &mut m, "rules", 0.95, |r| {
        list(r, 30, |r| {
            let mut g = Map::new();
            maybe(r, &mut g, "id", 0.95, |r| Value::String(format!("r{}", r.random_range(0..40))));
            maybe(r, &mut g, "condition", 0.95, |r| Value::String(string(r)));
            maybe(r, &mut g, "action", 0.95, |r| enum_word(r, &["allow", "deny", "escalate", "log"]));
            maybe(r, &mut g, "priority", 0.7, number);
            Value::Object(g)
        })
    });
    maybe(r, &mut m, "thresholds", 0.5, |r| {
        let mut t = Map::new();
        for _ in 0..r.random_range(0..4) {
            t.insert(string(r), field(r, number));
        }
        Value::Object(t)
    });
    maybe(r, &mut m, "forbidden", 0.5, |r| list(r, 60, |r| Value::String(string(r))));
    maybe(r, &mut m, "valid_until", 0.4, |r| if r.random_bool(0.3) { Value::Null } else { number(r) });
    maybe(r, &mut m, "bogus", 0.1, |r| any_value(r, 2));
    Value::Object(m)
}

/// A structured candidate for `kind`: schema-shaped most of the time,
/// arbitrary JSON otherwise.
pub fn candidate(r: &mut ChaCha8Rng, kind: MessageKind) -> Value {
    if r.random_bool(0.05) {
        return any_value(r, 3);
    }
    match kind {
        MessageKind::Summary => summary(r),
        MessageKind::Plan => plan(r),
        MessageKind::Policy => policy(r),
    }
}

/// Independent schema check backed by a third-party validator.
pub struct Oracle {
    validators: Vec<(MessageKind, jsonschema::Validator)>,
}

impl Oracle {
    pub fn new() -> Self {
        let validators = MessageKind::ALL
            .iter()
            .map(|&k| {
                let schema: Value = serde_json::from_str(k.schema_text()).expect("schema parses");
                (k, jsonschema::validator_for(&schema).expect("schema compiles"))
            })
            .collect();
        Self { validators }
    }

    pub fn is_valid(&self, kind: MessageKind, v: &Value) -> bool {
        self.validators
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, val)| val.is_valid(v))
            .expect("every kind has a validator")
    }
}

const RESOURCES: &[&str] = &["file:auth.py", "file:views.py", "db", "net", "gpu", "env"];
const EFFECTS: &[&str] = &["opt_A", "!opt_A", "opt_B", "!opt_B", "cache", "!cache"];

/// A random, individually valid proposal set with at most one proposal per
/// layer (in layer order), or arbitrary layers when `per_layer` is false.
pub fn proposals(r: &mut ChaCha8Rng, n: usize, per_layer: bool) -> Vec<ActionProposal> {
    let cats: Vec<Category> = Category::proposable().collect();
    let layers: Vec<usize> = if per_layer {
        (1..=n).filter(|_| r.random_bool(0.8)).collect()
    } else {
        (0..r.random_range(1..=n)).map(|_| r.random_range(1..=n)).collect()
    };
    layers
        .into_iter()
        .enumerate()
        .map(|(i, layer)| {
            let res: Vec<&str> = RESOURCES.iter().copied().filter(|_| r.random_bool(0.25)).collect();
            let mut effects: Vec<&str> = Vec::new();
            for e in EFFECTS {
                if r.random_bool(0.2) && !effects.contains(&format!("!{e}").as_str()) && !e.starts_with('!') {
                    effects.push(e);
                } else if r.random_bool(0.1) && e.starts_with('!') && !effects.contains(&&e[1..]) {
                    effects.push(e);
                }
            }
            let lo = r.random_range(0.0..10.0f64);
            ActionProposal::new(format!("p{i}"), layer, cats[r.random_range(0..cats.len())], lo, lo + r.random_range(0.0..1e5))
                .with_resources(res)
                .with_effects(effects)
                .with_confidence(r.random_range(0.0..=1.0))
                .with_urgency(if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..=1.0) })
        })
        .collect()
}
