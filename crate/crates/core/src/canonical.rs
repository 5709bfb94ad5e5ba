//! Canonical JSON: object keys sorted, floats printed with nine decimals,
//! no insignificant whitespace. Identical values always serialize to
//! identical bytes.

use serde::Serialize;
use serde_json::Value;

pub const FLOAT_DECIMALS: usize = 9;

pub fn to_canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&value, &mut out);
    Ok(out)
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().unwrap_or(0.0);
                let s = format!("{f:.FLOAT_DECIMALS$}");
                // -0.000000000 and 0.000000000 are the same value
                if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
                    out.push_str(&format!("{:.FLOAT_DECIMALS$}", 0.0));
                } else {
                    out.push_str(&s);
                }
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("keys serialize"));
                out.push(':');
                write_value(v, out);
            }
            out.push('}');
        }
    }
}
