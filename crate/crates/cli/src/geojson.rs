//! GeoJSON reading and writing for region geometry.
//!
//! Input: a FeatureCollection of Polygon/MultiPolygon features whose
//! properties carry `id` (string or integer) and optionally `population`.
//! Output is hand-assembled so the `metadata` member comes first (the JSON
//! equivalent of the comment block on text outputs) and coordinates use the
//! shortest round-trip float rendering — re-reading an emitted file
//! reproduces every vertex bit for bit, which keeps contiguity recoverable.

use std::path::Path;

use serde_json::Value;
use stareal_core::lattice::{Region, Ring};

use crate::error::{io_input, CliError, CliResult};
use crate::io::{Meta, TOOL};

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

fn property_id(feature: &Value) -> Option<String> {
    let candidate = feature
        .get("properties")
        .and_then(|p| p.get("id"))
        .or_else(|| feature.get("id"))?;
    match candidate {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn property_population(feature: &Value) -> CliResult<u64> {
    let Some(value) = feature.get("properties").and_then(|p| p.get("population")) else {
        return Ok(0);
    };
    value
        .as_u64()
        .ok_or_else(|| CliError::input(format_args!("population must be a non-negative integer, got {value}")))
}

fn parse_ring(raw: &Value, what: &str) -> CliResult<Ring> {
    let points = raw
        .as_array()
        .ok_or_else(|| CliError::input(format_args!("{what}: ring is not an array")))?;
    let mut ring = Vec::with_capacity(points.len());
    for point in points {
        let pair = point
            .as_array()
            .filter(|p| p.len() >= 2)
            .ok_or_else(|| CliError::input(format_args!("{what}: position is not [x, y]")))?;
        let x = pair[0]
            .as_f64()
            .ok_or_else(|| CliError::input(format_args!("{what}: non-numeric coordinate")))?;
        let y = pair[1]
            .as_f64()
            .ok_or_else(|| CliError::input(format_args!("{what}: non-numeric coordinate")))?;
        ring.push([x, y]);
    }
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(CliError::input(format_args!(
            "{what}: rings must be closed (first position repeated) with at least 4 positions"
        )));
    }
    Ok(ring)
}

fn parse_polygon(coords: &Value, what: &str, rings: &mut Vec<Ring>) -> CliResult<()> {
    let raw_rings = coords
        .as_array()
        .ok_or_else(|| CliError::input(format_args!("{what}: polygon coordinates are not an array")))?;
    if raw_rings.is_empty() {
        return Err(CliError::input(format_args!("{what}: polygon has no rings")));
    }
    for raw in raw_rings {
        rings.push(parse_ring(raw, what)?);
    }
    Ok(())
}

/// Read the region set from a GeoJSON FeatureCollection.
pub fn read_regions(path: &Path) -> CliResult<Vec<Region>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_input(path, e))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| io_input(path, format_args!("invalid JSON: {e}")))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(io_input(path, "expected a FeatureCollection"));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| io_input(path, "FeatureCollection has no features array"))?;

    let mut regions = Vec::with_capacity(features.len());
    for (k, feature) in features.iter().enumerate() {
        let id = property_id(feature)
            .ok_or_else(|| io_input(path, format_args!("feature {k} has no usable id")))?;
        let what = format!("feature {k} (id {id:?})");
        let population = property_population(feature)
            .map_err(|e| io_input(path, format_args!("{what}: {e}")))?;
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| io_input(path, format_args!("{what}: missing geometry")))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| io_input(path, format_args!("{what}: missing coordinates")))?;
        let mut rings = Vec::new();
        match geometry.get("type").and_then(Value::as_str) {
            Some("Polygon") => {
                parse_polygon(coords, &what, &mut rings).map_err(|e| io_input(path, e))?
            }
            Some("MultiPolygon") => {
                let polys = coords.as_array().ok_or_else(|| {
                    io_input(path, format_args!("{what}: coordinates are not an array"))
                })?;
                for poly in polys {
                    parse_polygon(poly, &what, &mut rings).map_err(|e| io_input(path, e))?;
                }
            }
            other => {
                return Err(io_input(
                    path,
                    format_args!("{what}: unsupported geometry type {other:?}"),
                ))
            }
        }
        regions.push(Region {
            id,
            rings,
            population,
        });
    }
    if regions.is_empty() {
        return Err(io_input(path, "no features"));
    }
    Ok(regions)
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialise")
}

fn json_num(v: f64) -> CliResult<String> {
    let n = serde_json::Number::from_f64(v)
        .ok_or_else(|| CliError::internal(format_args!("non-finite value {v} in GeoJSON output")))?;
    Ok(n.to_string())
}

fn push_meta(out: &mut String, meta: &Meta) {
    out.push_str("  \"metadata\": {\n");
    out.push_str(&format!("    \"tool\": {},\n", json_str(TOOL)));
    out.push_str(&format!("    \"command\": {},\n", json_str(&meta.command)));
    out.push_str(&format!(
        "    \"config-sha256\": {},\n",
        json_str(&meta.config_hash)
    ));
    out.push_str(&format!("    \"seeds\": {}", json_str(&meta.seeds)));
    for (key, value) in &meta.extras {
        out.push_str(&format!(",\n    {}: {}", json_str(key), json_str(value)));
    }
    out.push_str("\n  },\n");
}

fn push_geometry(out: &mut String, rings: &[Ring]) -> CliResult<()> {
    out.push_str("\"geometry\": {\"type\": \"Polygon\", \"coordinates\": [");
    for (r, ring) in rings.iter().enumerate() {
        if r > 0 {
            out.push_str(", ");
        }
        out.push('[');
        for (k, point) in ring.iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            out.push('[');
            out.push_str(&json_num(point[0])?);
            out.push_str(", ");
            out.push_str(&json_num(point[1])?);
            out.push(']');
        }
        out.push(']');
    }
    out.push_str("]}");
    Ok(())
}

/// Serialise regions as a FeatureCollection. `extras(i)` supplies additional
/// numeric properties for region `i` (used for relative-risk maps); the
/// `id` property is always present, `population` only when `with_population`.
pub fn feature_collection(
    meta: &Meta,
    regions: &[Region],
    with_population: bool,
    extras: impl Fn(usize) -> Vec<(&'static str, f64)>,
) -> CliResult<String> {
    let mut out = String::from("{\n");
    push_meta(&mut out, meta);
    out.push_str("  \"type\": \"FeatureCollection\",\n");
    out.push_str("  \"features\": [\n");
    for (i, region) in regions.iter().enumerate() {
        out.push_str("    {\"type\": \"Feature\", \"properties\": {\"id\": ");
        out.push_str(&json_str(&region.id));
        if with_population {
            out.push_str(&format!(", \"population\": {}", region.population));
        }
        for (key, value) in extras(i) {
            out.push_str(&format!(", {}: {}", json_str(key), json_num(value)?));
        }
        out.push_str("}, ");
        push_geometry(&mut out, &region.rings)?;
        out.push('}');
        if i + 1 < regions.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ]\n}\n");
    Ok(out)
}
