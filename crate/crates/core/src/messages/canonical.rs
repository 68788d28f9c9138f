//! Canonical text encoding: object keys in lexicographic byte order, no
//! insignificant whitespace, UTF-8.

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

/// Encodes a JSON value canonically.
pub fn to_canonical_bytes(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_value(v, &mut out);
    out
}

pub fn to_canonical_string(v: &Value) -> String {
    String::from_utf8(to_canonical_bytes(v)).expect("canonical output is UTF-8")
}

/// Encodes any serializable value canonically.
pub fn encode<T: Serialize + ?Sized>(v: &T) -> Vec<u8> {
    let value = serde_json::to_value(v).expect("in-memory values always serialize");
    to_canonical_bytes(&value)
}

fn write_value(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_scalar(&Value::String(k.clone()), out);
                out.push(b':');
                write_value(&map[k], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        scalar => write_scalar(scalar, out),
    }
}

fn write_scalar(v: &Value, out: &mut Vec<u8>) {
    serde_json::to_writer(&mut *out, v).expect("writing to a Vec cannot fail");
}

/// Parses text into a structured value, reporting the byte offset of the
/// first error.
pub fn parse(bytes: &[u8]) -> Result<Value, ParseError> {
    serde_json::from_slice(bytes).map_err(|e| ParseError {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_no_whitespace() {
        let v = json!({"b": [1, {"z": null, "a": "x y"}], "a": 1.5});
        assert_eq!(to_canonical_string(&v), r#"{"a":1.5,"b":[1,{"a":"x y","z":null}]}"#);
    }

    #[test]
    fn parse_error_offset() {
        let err = parse(b"{\"a\":1,}").unwrap_err();
        assert_eq!(err.offset, 7);
        let err = parse(b"{\n\"a\": tru}").unwrap_err();
        assert!(err.offset >= 7 && err.offset <= 10, "{err:?}");
    }

    #[test]
    fn escapes_control_characters() {
        let v = json!({"s": "line\nbreak\ttab"});
        assert_eq!(to_canonical_string(&v), r#"{"s":"line\nbreak\ttab"}"#);
    }
}
