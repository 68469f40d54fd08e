//! Minimal JSON-schema validator covering the subset the report schema
//! uses: `type`, `properties`, `required`, `additionalProperties`
//! (boolean or schema), `items`, and `enum`. Errors carry a JSON-pointer
//! path to the offending value.

use serde_json::Value;

pub fn validate(schema: &Value, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, value, "", &mut errors);
    errors
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(expected: &str, v: &Value) -> bool {
    match expected {
        "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
        "number" => v.is_number(),
        other => type_name(v) == other,
    }
}

fn check(schema: &Value, value: &Value, path: &str, errors: &mut Vec<String>) {
    let Some(schema) = schema.as_object() else {
        // `true` permits anything; `false` permits nothing.
        if schema == &Value::Bool(false) {
            errors.push(format!("{}: schema forbids this value", pointer(path)));
        }
        return;
    };

    if let Some(expected) = schema.get("type").and_then(Value::as_str) {
        if !type_matches(expected, value) {
            errors.push(format!(
                "{}: expected {expected}, got {}",
                pointer(path),
                type_name(value)
            ));
            return;
        }
    }

    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            errors.push(format!("{}: value not in enum", pointer(path)));
        }
    }

    if let Some(obj) = value.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for name in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(name) {
                    errors.push(format!("{}: missing required '{name}'", pointer(path)));
                }
            }
        }
        for (key, val) in obj {
            let child = format!("{path}/{key}");
            if let Some(sub) = props.and_then(|p| p.get(key)) {
                check(sub, val, &child, errors);
            } else {
                match schema.get("additionalProperties") {
                    Some(Value::Bool(false)) => {
                        errors.push(format!("{}: unexpected property", pointer(&child)));
                    }
                    Some(sub @ Value::Object(_)) => check(sub, val, &child, errors),
                    _ => {}
                }
            }
        }
    }

    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, val) in arr.iter().enumerate() {
            check(items, val, &format!("{path}/{i}"), errors);
        }
    }
}

fn pointer(path: &str) -> &str {
    if path.is_empty() {
        "/"
    } else {
        path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn report_schema() -> Value {
        serde_json::from_str(include_str!("../report.schema.json")).unwrap()
    }

    fn good_report() -> Value {
        json!({
            "kind": "simulate",
            "provenance": {
                "config_digest": "abc",
                "inputs": {"in": "deadbeef"},
                "seed": 7,
                "tool_version": "0.1.0"
            },
            "payload": {"frames": 5}
        })
    }

    #[test]
    fn accepts_well_formed_report() {
        assert!(validate(&report_schema(), &good_report()).is_empty());
    }

    #[test]
    fn rejects_with_pointer_paths() {
        let schema = report_schema();

        let mut bad = good_report();
        bad["kind"] = json!("unknown_kind");
        let errs = validate(&schema, &bad);
        assert!(errs.iter().any(|e| e.starts_with("/kind:")), "{errs:?}");

        let mut bad = good_report();
        bad["provenance"]["seed"] = json!(1.5);
        let errs = validate(&schema, &bad);
        assert!(
            errs.iter().any(|e| e.starts_with("/provenance/seed:")),
            "{errs:?}"
        );

        let mut bad = good_report();
        bad["provenance"].as_object_mut().unwrap().remove("seed");
        let errs = validate(&schema, &bad);
        assert!(errs.iter().any(|e| e.contains("missing required 'seed'")));

        let mut bad = good_report();
        bad["extra"] = json!(1);
        let errs = validate(&schema, &bad);
        assert!(errs.iter().any(|e| e.starts_with("/extra:")), "{errs:?}");

        let mut bad = good_report();
        bad["provenance"]["inputs"]["in"] = json!(42);
        let errs = validate(&schema, &bad);
        assert!(
            errs.iter().any(|e| e.starts_with("/provenance/inputs/in:")),
            "{errs:?}"
        );
    }

    #[test]
    fn integer_accepts_large_seeds() {
        let mut report = good_report();
        report["provenance"]["seed"] = json!(u64::MAX);
        assert!(validate(&report_schema(), &report).is_empty());
    }
}
