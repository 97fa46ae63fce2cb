//! Entity and role-edge extraction for one experience.

use serde_json::{json, Map, Value};

use super::sampling::REPAIR_RETRIES;
use super::ConstructionError;
use crate::model::{normalize_entity, normalize_text, Entity, EntityRole, Experience, RoleEdge};
use crate::prompts;
use crate::providers::{call_parsed, parse_json_object, CallError, ChatProvider, DETERMINISTIC_TEMPERATURE};

fn entity_list(obj: &Map<String, Value>) -> Result<Vec<Value>, String> {
    match obj.get("core_entities") {
        Some(Value::Array(items)) => Ok(items.clone()),
        _ => Err("missing \"core_entities\" array".into()),
    }
}

/// Valid, distinct entities out of a raw `core_entities` list.
pub fn entities_from(items: &[Value]) -> Vec<Entity> {
    let mut out: Vec<Entity> = Vec::new();
    for item in items {
        let (Some(raw), Some(role)) = (
            item.get("entity").and_then(Value::as_str),
            item.get("role").and_then(Value::as_str).and_then(EntityRole::parse),
        ) else {
            log::warn!("dropping malformed entity item {item}");
            continue;
        };
        match normalize_entity(raw, role) {
            Ok(e) if !out.contains(&e) => out.push(e),
            Ok(_) => {}
            Err(rej) => log::warn!("dropping entity: {rej}"),
        }
    }
    out
}

fn parse_edge_label(label: &str) -> Option<(EntityRole, EntityRole)> {
    let (f, t) = label.split_once("->").or_else(|| label.split_once('→'))?;
    Some((EntityRole::parse(f)?, EntityRole::parse(t)?))
}

fn resolve(entities: &[Entity], surface: &str, role: Option<EntityRole>) -> Option<Entity> {
    let s = normalize_text(surface);
    entities.iter().find(|e| e.surface == s && role.is_none_or(|r| e.role == r)).cloned()
}

/// Grammar-valid role edges grounded on `entities`.
pub fn role_edges_from(items: &[Value], entities: &[Entity]) -> Vec<RoleEdge> {
    let mut out: Vec<RoleEdge> = Vec::new();
    for item in items {
        let label = item.get("edge").and_then(Value::as_str).and_then(parse_edge_label);
        let from = item.get("from_entity").and_then(Value::as_str);
        let to = item.get("to_entity").and_then(Value::as_str);
        let (Some(from), Some(to)) = (from, to) else {
            log::warn!("dropping malformed role edge {item}");
            continue;
        };
        let ends = (resolve(entities, from, label.map(|l| l.0)), resolve(entities, to, label.map(|l| l.1)));
        let (Some(f), Some(t)) = ends else {
            log::warn!("dropping role edge with an unknown endpoint: {item}");
            continue;
        };
        match RoleEdge::new(f, t) {
            Some(edge) if !out.contains(&edge) => out.push(edge),
            Some(_) => {}
            None => log::warn!("dropping role edge outside the allowed transitions: {item}"),
        }
    }
    out
}

/// Two calls: entities, then role edges grounded on those entities.
/// Items that fail validation are dropped; only an unusable reply is an error.
pub fn parse_entities_and_edges(
    e: &Experience,
    provider: &dyn ChatProvider,
) -> Result<(Vec<Entity>, Vec<RoleEdge>), ConstructionError> {
    let wrap = |stage, source: CallError| ConstructionError::Call { stage, source };
    let req = prompts::ENTITY
        .request(&[("condition", &e.condition), ("content", &e.content)])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    let items = call_parsed(provider, &req, REPAIR_RETRIES, |r| entity_list(&parse_json_object(r)?))
        .map_err(|s| wrap("entity extraction", s))?;
    let entities = entities_from(&items);
    if entities.is_empty() {
        log::warn!("{}: no valid entities", e.id);
        return Ok((entities, Vec::new()));
    }
    let listing: Vec<Value> = entities.iter().map(|x| json!({"entity": x.surface, "role": x.role.as_str()})).collect();
    let listing = serde_json::to_string_pretty(&json!({ "core_entities": listing })).expect("json");
    let req = prompts::ROLE_EDGE
        .request(&[("core_entities_json", &listing), ("condition", &e.condition), ("content", &e.content)])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    let raw_edges = call_parsed(provider, &req, REPAIR_RETRIES, |r| {
        match parse_json_object(r)?.get("entity_edges") {
            Some(Value::Array(items)) => Ok(items.clone()),
            _ => Err("missing \"entity_edges\" array".to_string()),
        }
    })
    .map_err(|s| wrap("role-edge extraction", s))?;
    let edges = role_edges_from(&raw_edges, &entities);
    Ok((entities, edges))
}
