//! Reuse of inter-layer messages whose sender state has not changed.

use std::collections::HashMap;

use serde_json::Value;

use crate::messages::{to_canonical_bytes, MessageKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Cached {
    pub value: Value,
    pub bytes: Vec<u8>,
    pub hit: bool,
}

/// Last message per `(sender layer, kind)`.
#[derive(Debug, Clone, Default)]
pub struct MessageCache {
    entries: HashMap<(usize, MessageKind), (Value, Vec<u8>)>,
    hits: u64,
}

impl MessageCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the stored message when the sender's state is unchanged and
    /// an entry exists; otherwise stores and returns `fresh`.
    pub fn cached_message(&mut self, layer: usize, kind: MessageKind, state_changed: bool, fresh: Value) -> Cached {
        self.lookup_or_insert(layer, kind, state_changed, || fresh)
    }

    /// Like [`cached_message`](Self::cached_message) but only builds the
    /// fresh message on a miss.
    pub fn lookup_or_insert(
        &mut self,
        layer: usize,
        kind: MessageKind,
        state_changed: bool,
        fresh: impl FnOnce() -> Value,
    ) -> Cached {
        if !state_changed {
            if let Some((value, bytes)) = self.entries.get(&(layer, kind)) {
                self.hits += 1;
                return Cached {
                    value: value.clone(),
                    bytes: bytes.clone(),
                    hit: true,
                };
            }
        }
        let value = fresh();
        let bytes = to_canonical_bytes(&value);
        self.entries.insert((layer, kind), (value.clone(), bytes.clone()));
        Cached { value, bytes, hit: false }
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn cold_start_stores_fresh() {
        let mut c = MessageCache::new();
        let out = c.cached_message(4, MessageKind::Policy, false, json!({"rules": []}));
        assert!(!out.hit);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn unchanged_state_replays_bytes() {
        let mut c = MessageCache::new();
        let first = c.cached_message(1, MessageKind::Summary, true, json!({"a": 1}));
        let second = c.cached_message(1, MessageKind::Summary, false, json!({"a": 2}));
        assert!(second.hit);
        assert_eq!(first.bytes, second.bytes);
        let third = c.cached_message(1, MessageKind::Summary, true, json!({"a": 3}));
        assert!(!third.hit);
        assert_eq!(third.value, json!({"a": 3}));
    }

    #[test]
    fn unchanged_policy_over_hundred_steps() {
        let mut c = MessageCache::new();
        let policy = json!({"rules": [{"id": "r", "condition": "c", "action": "log"}]});
        let mut prev = None;
        for t in 0..100 {
            let out = c.cached_message(4, MessageKind::Policy, t == 0, policy.clone());
            if let Some(p) = prev {
                assert_eq!(p, out.bytes);
            }
            prev = Some(out.bytes);
        }
        assert_eq!(c.hits(), 99);
    }

    #[test]
    fn keys_are_sender_and_kind() {
        let mut c = MessageCache::new();
        c.cached_message(1, MessageKind::Summary, true, json!(1));
        assert!(!c.cached_message(2, MessageKind::Summary, false, json!(2)).hit);
        assert!(!c.cached_message(1, MessageKind::Plan, false, json!(3)).hit);
    }
}
