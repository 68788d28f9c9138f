//! Interpreter for the draft-07 keyword subset used by the wire schemas.
//!
//! Supported keywords: `$schema` (ignored), `type`, `enum`, `required`,
//! `properties`, `additionalProperties` (boolean or schema), `items`,
//! `maxItems`, `maxLength`, `minimum`, `maximum`. Loading a schema that uses
//! anything else fails, so the subset stays explicit.
//!
//! `integer` is checked strictly: the JSON number must be stored as a signed
//! 64-bit integer. Integral floats such as `1.0` are rejected by validation
//! and converted by repair.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{Map, Number, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsonType {
    Object,
    Array,
    String,
    Number,
    Integer,
    Boolean,
    Null,
}

impl JsonType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "object" => Self::Object,
            "array" => Self::Array,
            "string" => Self::String,
            "number" => Self::Number,
            "integer" => Self::Integer,
            "boolean" => Self::Boolean,
            "null" => Self::Null,
            _ => return None,
        })
    }

    fn matches(self, v: &Value) -> bool {
        match self {
            Self::Object => v.is_object(),
            Self::Array => v.is_array(),
            Self::String => v.is_string(),
            Self::Number => v.is_number(),
            Self::Integer => v.as_i64().is_some(),
            Self::Boolean => v.is_boolean(),
            Self::Null => v.is_null(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Object => "object",
            Self::Array => "array",
            Self::String => "string",
            Self::Number => "number",
            Self::Integer => "integer",
            Self::Boolean => "boolean",
            Self::Null => "null",
        }
    }
}

#[derive(Debug, Clone)]
enum Additional {
    Allowed,
    Forbidden,
    Schema(Box<SchemaNode>),
}

#[derive(Debug, Clone)]
pub struct SchemaNode {
    types: Option<Vec<JsonType>>,
    enum_values: Option<Vec<Value>>,
    required: Vec<String>,
    properties: BTreeMap<String, SchemaNode>,
    additional: Additional,
    items: Option<Box<SchemaNode>>,
    max_items: Option<usize>,
    max_length: Option<usize>,
    minimum: Option<f64>,
    maximum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaLoadError(pub String);

impl fmt::Display for SchemaLoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unsupported schema: {}", self.0)
    }
}

impl std::error::Error for SchemaLoadError {}

impl SchemaNode {
    pub fn load(schema: &Value) -> Result<Self, SchemaLoadError> {
        let obj = schema
            .as_object()
            .ok_or_else(|| SchemaLoadError("schema node is not an object".into()))?;
        let mut node = SchemaNode {
            types: None,
            enum_values: None,
            required: Vec::new(),
            properties: BTreeMap::new(),
            additional: Additional::Allowed,
            items: None,
            max_items: None,
            max_length: None,
            minimum: None,
            maximum: None,
        };
        let bad = |k: &str| SchemaLoadError(format!("malformed `{k}`"));
        for (key, val) in obj {
            match key.as_str() {
                "$schema" => {}
                "type" => {
                    let names: Vec<&Value> = match val {
                        Value::String(_) => vec![val],
                        Value::Array(a) => a.iter().collect(),
                        _ => return Err(bad(key)),
                    };
                    let types = names
                        .into_iter()
                        .map(|n| n.as_str().and_then(JsonType::parse).ok_or_else(|| bad(key)))
                        .collect::<Result<Vec<_>, _>>()?;
                    node.types = Some(types);
                }
                "enum" => node.enum_values = Some(val.as_array().ok_or_else(|| bad(key))?.clone()),
                "required" => {
                    node.required = val
                        .as_array()
                        .ok_or_else(|| bad(key))?
                        .iter()
                        .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| bad(key)))
                        .collect::<Result<_, _>>()?;
                }
                "properties" => {
                    for (name, sub) in val.as_object().ok_or_else(|| bad(key))? {
                        node.properties.insert(name.clone(), SchemaNode::load(sub)?);
                    }
                }
                "additionalProperties" => {
                    node.additional = match val {
                        Value::Bool(true) => Additional::Allowed,
                        Value::Bool(false) => Additional::Forbidden,
                        Value::Object(_) => Additional::Schema(Box::new(SchemaNode::load(val)?)),
                        _ => return Err(bad(key)),
                    }
                }
                "items" => node.items = Some(Box::new(SchemaNode::load(val)?)),
                "maxItems" => node.max_items = Some(val.as_u64().ok_or_else(|| bad(key))? as usize),
                "maxLength" => node.max_length = Some(val.as_u64().ok_or_else(|| bad(key))? as usize),
                "minimum" => node.minimum = Some(val.as_f64().ok_or_else(|| bad(key))?),
                "maximum" => node.maximum = Some(val.as_f64().ok_or_else(|| bad(key))?),
                other => return Err(SchemaLoadError(format!("keyword `{other}`"))),
            }
        }
        Ok(node)
    }

    pub fn property(&self, name: &str) -> Option<&SchemaNode> {
        self.properties.get(name)
    }

    pub fn max_items(&self) -> Option<usize> {
        self.max_items
    }

    fn type_ok(&self, v: &Value) -> bool {
        self.types
            .as_ref()
            .is_none_or(|ts| ts.iter().any(|t| t.matches(v)))
    }

    fn type_names(&self) -> String {
        self.types
            .as_ref()
            .map(|ts| ts.iter().map(|t| t.name()).collect::<Vec<_>>().join("|"))
            .unwrap_or_default()
    }

    fn wants_integer(&self) -> bool {
        self.types
            .as_ref()
            .is_some_and(|ts| ts.contains(&JsonType::Integer) && !ts.contains(&JsonType::Number))
    }

    fn child_for(&self, key: &str) -> Option<&SchemaNode> {
        match self.properties.get(key) {
            Some(n) => Some(n),
            None => match &self.additional {
                Additional::Schema(s) => Some(s),
                _ => None,
            },
        }
    }

    /// Collects every violation of `v` against this node.
    pub fn violations(&self, v: &Value) -> Vec<Violation> {
        let mut out = Vec::new();
        self.collect(v, "", &mut out);
        out
    }

    pub fn is_valid(&self, v: &Value) -> bool {
        self.violations(v).is_empty()
    }

    fn collect(&self, v: &Value, path: &str, out: &mut Vec<Violation>) {
        let mut push = |kind| {
            out.push(Violation {
                path: if path.is_empty() { "/".into() } else { path.into() },
                kind,
            })
        };
        if !self.type_ok(v) {
            push(ViolationKind::Type(self.type_names()));
            return;
        }
        if let Some(allowed) = &self.enum_values {
            if !allowed.contains(v) {
                push(ViolationKind::Enum);
            }
        }
        if let Value::Number(n) = v {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if self.minimum.is_some_and(|m| x < m) || self.maximum.is_some_and(|m| x > m) {
                push(ViolationKind::Range);
            }
        }
        if let (Value::String(s), Some(max)) = (v, self.max_length) {
            if s.chars().count() > max {
                push(ViolationKind::MaxLength(max));
            }
        }
        match v {
            Value::Object(map) => {
                for req in &self.required {
                    if !map.contains_key(req) {
                        push(ViolationKind::MissingRequired(req.clone()));
                    }
                }
                for (key, child) in map {
                    let child_path = format!("{path}/{key}");
                    match self.child_for(key) {
                        Some(node) => node.collect(child, &child_path, out),
                        None => {
                            if matches!(self.additional, Additional::Forbidden) {
                                out.push(Violation {
                                    path: child_path,
                                    kind: ViolationKind::UnknownField,
                                });
                            }
                        }
                    }
                }
            }
            Value::Array(items) => {
                if let Some(max) = self.max_items {
                    if items.len() > max {
                        out.push(Violation {
                            path: if path.is_empty() { "/".into() } else { path.into() },
                            kind: ViolationKind::MaxItems(max),
                        });
                    }
                }
                if let Some(node) = &self.items {
                    for (i, item) in items.iter().enumerate() {
                        node.collect(item, &format!("{path}/{i}"), out);
                    }
                }
            }
            _ => {}
        }
    }

    // ---- repair passes -------------------------------------------------

    /// Pass 1: drops fields the schema forbids and values of the wrong type,
    /// converts integral floats where an integer is required, and drops
    /// nested objects that lack a required field.
    pub(crate) fn drop_unknown(&self, v: &mut Value) -> Fate {
        if self.wants_integer() {
            if let Some(i) = integral(v) {
                *v = Value::Number(Number::from(i));
            }
        }
        if !self.type_ok(v) {
            return Fate::Drop;
        }
        match v {
            Value::Object(map) => {
                let keys: Vec<String> = map.keys().cloned().collect();
                for key in keys {
                    let fate = match self.child_for(&key) {
                        Some(node) => node.drop_unknown(map.get_mut(&key).expect("key present")),
                        None if matches!(self.additional, Additional::Forbidden) => Fate::Drop,
                        None => Fate::Keep,
                    };
                    if fate == Fate::Drop {
                        map.remove(&key);
                    }
                }
                self.required_fate(map)
            }
            Value::Array(items) => {
                if let Some(node) = &self.items {
                    items.retain_mut(|item| node.drop_unknown(item) == Fate::Keep);
                }
                Fate::Keep
            }
            _ => Fate::Keep,
        }
    }

    /// Pass 2: clamps numbers into `[minimum, maximum]`.
    pub(crate) fn clamp(&self, v: &mut Value) {
        self.walk(v, &mut |node, v| {
            if let Value::Number(n) = v {
                let x = n.as_f64().unwrap_or(0.0);
                let lo = node.minimum.unwrap_or(f64::NEG_INFINITY);
                let hi = node.maximum.unwrap_or(f64::INFINITY);
                if x < lo || x > hi {
                    let c = x.clamp(lo, hi);
                    *v = if n.is_f64() {
                        Number::from_f64(c).map_or(Value::Null, Value::Number)
                    } else {
                        Value::Number(Number::from(c as i64))
                    };
                }
            }
        });
    }

    /// Pass 3: cuts strings to `maxLength` characters.
    pub(crate) fn truncate_strings(&self, v: &mut Value) {
        self.walk(v, &mut |node, v| {
            if let (Value::String(s), Some(max)) = (v, node.max_length) {
                if let Some((cut, _)) = s.char_indices().nth(max) {
                    s.truncate(cut);
                }
            }
        });
    }

    /// Pass 4: cuts arrays to `maxItems`, keeping the leading items.
    pub(crate) fn truncate_lists(&self, v: &mut Value) {
        self.walk(v, &mut |node, v| {
            if let (Value::Array(items), Some(max)) = (v, node.max_items) {
                items.truncate(max);
            }
        });
    }

    /// Pass 5: maps enum mismatches onto a case-insensitive exact match;
    /// values with no match are dropped, and objects that thereby lose a
    /// required field are dropped with them.
    pub(crate) fn coerce_enums(&self, v: &mut Value) -> Fate {
        if let Some(allowed) = &self.enum_values {
            if !allowed.contains(v) {
                let hit = v.as_str().and_then(|s| {
                    allowed
                        .iter()
                        .find(|a| a.as_str().is_some_and(|a| a.eq_ignore_ascii_case(s)))
                        .cloned()
                });
                match hit {
                    Some(h) => *v = h,
                    None => return Fate::Drop,
                }
            }
        }
        match v {
            Value::Object(map) => {
                let keys: Vec<String> = map.keys().cloned().collect();
                for key in keys {
                    if let Some(node) = self.child_for(&key) {
                        if node.coerce_enums(map.get_mut(&key).expect("key present")) == Fate::Drop {
                            map.remove(&key);
                        }
                    }
                }
                self.required_fate(map)
            }
            Value::Array(items) => {
                if let Some(node) = &self.items {
                    items.retain_mut(|item| node.coerce_enums(item) == Fate::Keep);
                }
                Fate::Keep
            }
            _ => Fate::Keep,
        }
    }

    fn required_fate(&self, map: &Map<String, Value>) -> Fate {
        if self.required.iter().all(|r| map.contains_key(r)) {
            Fate::Keep
        } else {
            Fate::Drop
        }
    }

    /// Visits `v` and every schema-covered descendant, children first.
    fn walk(&self, v: &mut Value, f: &mut dyn FnMut(&SchemaNode, &mut Value)) {
        match v {
            Value::Object(map) => {
                for (key, child) in map.iter_mut() {
                    if let Some(node) = self.child_for(key) {
                        node.walk(child, f);
                    }
                }
            }
            Value::Array(items) => {
                if let Some(node) = &self.items {
                    for item in items.iter_mut() {
                        node.walk(item, f);
                    }
                }
            }
            _ => {}
        }
        f(self, v);
    }
}

fn integral(v: &Value) -> Option<i64> {
    let f = v.as_number().filter(|n| n.is_f64())?.as_f64()?;
    (f.fract() == 0.0 && f >= i64::MIN as f64 && f < i64::MAX as f64).then_some(f as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Fate {
    Keep,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    Type(String),
    Enum,
    Range,
    MaxLength(usize),
    MaxItems(usize),
    MissingRequired(String),
    UnknownField,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::Type(t) => write!(f, "{}: expected type {t}", self.path),
            ViolationKind::Enum => write!(f, "{}: value not in enum", self.path),
            ViolationKind::Range => write!(f, "{}: number out of range", self.path),
            ViolationKind::MaxLength(m) => write!(f, "{}: string longer than {m}", self.path),
            ViolationKind::MaxItems(m) => write!(f, "{}: more than {m} items", self.path),
            ViolationKind::MissingRequired(r) => write!(f, "{}: missing required `{r}`", self.path),
            ViolationKind::UnknownField => write!(f, "{}: field not permitted", self.path),
        }
    }
}
