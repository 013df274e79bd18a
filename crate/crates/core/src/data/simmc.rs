//! Adapter for the published SIMMC Fashion JSON layout.
//!
//! Catalog (fashion metadata): a top-level object keyed by item id, each
//! item an object of attribute name → scalar or list of scalars. Numbers and
//! booleans are rendered as strings, nested objects are flattened one level
//! (their keys become attribute names), nulls and empty values are dropped.
//! Attribute names are kept verbatim (`availableSizes` stays
//! `availableSizes`).
//!
//! Dialogues: `dialogue_data[]` with `dialogue_idx` and `dialogue[]`; each
//! turn maps `transcript` → user utterance, `system_transcript` → true
//! response, `turn_idx` → turn index (position when absent). The referred
//! object is taken from the turn's `object_id` (or `referred_object_id`),
//! falling back to the first entry of the dialogue's `dialogue_coref_map`.

use serde_json::Value;

use super::{Catalog, CatalogObject, DataError, Turn};

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn values_of(v: &Value) -> Vec<String> {
    match v {
        Value::Array(items) => items.iter().filter_map(scalar).collect(),
        other => scalar(other).into_iter().collect(),
    }
}

fn invalid(origin: &str, location: String, msg: &str) -> DataError {
    DataError::Invalid {
        path: origin.to_string(),
        location,
        msg: msg.to_string(),
    }
}

pub(crate) fn catalog_from_value(value: &Value, origin: &str) -> Result<Catalog, DataError> {
    let items = value
        .as_object()
        .ok_or_else(|| invalid(origin, "$".into(), "expected an object keyed by item id"))?;
    let mut catalog = Catalog::default();
    for (id, item) in items {
        let fields = item
            .as_object()
            .ok_or_else(|| invalid(origin, format!("{id:?}"), "item is not an object"))?;
        let mut object = CatalogObject::new(id.clone());
        for (name, v) in fields {
            if let Value::Object(inner) = v {
                for (inner_name, iv) in inner {
                    let vals = values_of(iv);
                    if !vals.is_empty() {
                        object.attributes.insert(inner_name.clone(), vals);
                    }
                }
            } else {
                let vals = values_of(v);
                if !vals.is_empty() {
                    object.attributes.insert(name.clone(), vals);
                }
            }
        }
        catalog.insert(object, origin)?;
    }
    Ok(catalog)
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub(crate) fn turns_from_value(value: &Value, origin: &str) -> Result<Vec<Turn>, DataError> {
    let dialogues = value["dialogue_data"]
        .as_array()
        .ok_or_else(|| invalid(origin, "dialogue_data".into(), "expected an array"))?;
    let mut turns = Vec::new();
    for (d_pos, dialogue) in dialogues.iter().enumerate() {
        let at = format!("dialogue_data[{d_pos}]");
        let dialogue_id = dialogue
            .get("dialogue_idx")
            .and_then(id_string)
            .unwrap_or_else(|| d_pos.to_string());
        let fallback_object = dialogue
            .get("dialogue_coref_map")
            .and_then(Value::as_object)
            .and_then(|m| m.values().next())
            .and_then(id_string);
        let exchanges = dialogue["dialogue"]
            .as_array()
            .ok_or_else(|| invalid(origin, format!("{at}.dialogue"), "expected an array"))?;
        for (t_pos, turn) in exchanges.iter().enumerate() {
            let t_at = format!("{at}.dialogue[{t_pos}]");
            let text = |key: &str| {
                turn.get(key)
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(|| invalid(origin, format!("{t_at}.{key}"), "missing string field"))
            };
            let object = turn
                .get("object_id")
                .or_else(|| turn.get("referred_object_id"))
                .and_then(id_string)
                .or_else(|| fallback_object.clone())
                .ok_or_else(|| invalid(origin, t_at.clone(), "no referred object"))?;
            turns.push(Turn {
                dialogue_id: dialogue_id.clone(),
                turn_index: turn
                    .get("turn_idx")
                    .and_then(Value::as_u64)
                    .map_or(t_pos, |i| i as usize),
                user_utterance: text("transcript")?,
                referred_object_id: object,
                true_response: text("system_transcript")?,
            });
        }
    }
    Ok(turns)
}
