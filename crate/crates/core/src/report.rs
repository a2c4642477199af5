//! Analysis reports: JSON document, per-capillary CSV series, and schema
//! validation.
//!
//! The JSON layout is pinned by `schema/report.schema.json` (embedded into
//! the library at build time). Every report is checked against that schema
//! before it is written, so consumers can rely on the published contract.

use crate::error::{Error, Result};
use crate::metrics::{CapillaryRecord, VelocityClass};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Version stamped into every report; bump alongside the schema file.
pub const SCHEMA_VERSION: u32 = 1;

/// The published report schema, embedded verbatim.
pub const REPORT_SCHEMA: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../schema/report.schema.json"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    /// Caller-chosen identifier, usually the input directory name.
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    /// Fraction of the frame covered by any detected vessel.
    pub total: f32,
    /// Same, restricted to vessels with measurable flow.
    pub functional: f32,
}

/// Per-vessel scalar summary; `null` marks metrics that were undefined for
/// the record (for example direction of a stalled vessel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapillarySummary {
    pub id: usize,
    pub first_frame: usize,
    pub last_frame: usize,
    pub frames_observed: usize,
    pub velocity_class: Option<VelocityClass>,
    /// Time-averaged flow magnitude, px/frame.
    pub mean_velocity: Option<f32>,
    pub heterogeneity_std: Option<f32>,
    pub heterogeneity_cv: Option<f32>,
    pub mean_hematocrit: Option<f32>,
    pub direction_radians: Option<f32>,
}

/// Wall-clock cost of each stage, normalized per analyzed frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingSummary {
    pub preprocess_s_per_frame: f64,
    pub proposals_s_per_frame: f64,
    pub classification_s_per_frame: f64,
    pub masks_s_per_frame: f64,
    pub flow_s_per_frame: f64,
    pub metrics_s_per_frame: f64,
    pub total_s_per_frame: f64,
}

/// The complete analysis result for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub video: VideoSummary,
    pub density: DensitySummary,
    pub capillaries: Vec<CapillarySummary>,
    pub timing: TimingSummary,
}

impl AnalysisReport {
    /// Serialize to pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parse a report back from JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("report: {e}")))
    }

    /// Check this report against the embedded schema and its own
    /// invariants (densities in range, unique ids).
    pub fn validate(&self) -> Result<()> {
        let value = serde_json::to_value(self).expect("report serializes");
        let schema: Value = serde_json::from_str(REPORT_SCHEMA)
            .map_err(|e| Error::format(format!("embedded schema is not valid JSON: {e}")))?;
        validate_value(&value, &schema, "$")?;
        let mut ids: Vec<usize> = self.capillaries.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.capillaries.len() {
            return Err(Error::format("report: capillary ids are not unique"));
        }
        Ok(())
    }
}

/// Summarize one record for the report. `first/last_frame` span the
/// observed interval; scalar metrics come from the record's computed
/// fields, with hematocrit averaged over observed frames.
pub fn summarize_record(record: &CapillaryRecord) -> CapillarySummary {
    let observed: Vec<usize> =
        (0..record.boxes.len()).filter(|&f| record.boxes[f].is_some()).collect();
    let (first, last) = match (observed.first(), observed.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, 0),
    };
    let mean_hematocrit = if record.area_px.iter().any(|&a| a > 0) {
        let vals: Vec<f32> = observed
            .iter()
            .filter(|&&f| f < record.hematocrit.len())
            .map(|&f| record.hematocrit[f])
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f32>() / vals.len() as f32)
        }
    } else {
        None
    };
    CapillarySummary {
        id: record.id,
        first_frame: first,
        last_frame: last,
        frames_observed: observed.len().max(1),
        velocity_class: record.velocity_class,
        mean_velocity: record.mean_speed(),
        heterogeneity_std: record.heterogeneity.map(|h| h.std),
        heterogeneity_cv: record.heterogeneity.and_then(|h| h.cv),
        mean_hematocrit,
        direction_radians: record.direction,
    }
}

/// Render one record's time series as CSV. Frames where the track was not
/// observed keep their zero areas; the angle column is empty where no flow
/// was measurable.
pub fn capillary_csv(record: &CapillaryRecord) -> String {
    let mut out = String::from("frame,area_px,hematocrit,mean_magnitude,angle\n");
    let frames = record.boxes.len().max(record.area_px.len());
    for f in 0..frames {
        let area = record.area_px.get(f).copied().unwrap_or(0);
        let hema = record.hematocrit.get(f).copied().unwrap_or(0.0);
        let mag = record.mean_magnitude.get(f).copied().unwrap_or(0.0);
        let angle = record
            .angle
            .get(f)
            .copied()
            .flatten()
            .map(|a| format!("{a}"))
            .unwrap_or_default();
        out.push_str(&format!("{f},{area},{hema},{mag},{angle}\n"));
    }
    out
}

/// Minimal JSON-Schema checker covering the keywords the report schema
/// uses: type (single or list), required, properties, additionalProperties
/// (boolean), items, enum, minimum, maximum.
pub fn validate_value(value: &Value, schema: &Value, path: &str) -> Result<()> {
    let fail = |msg: String| Err(Error::format(format!("{path}: {msg}")));

    if let Some(types) = schema.get("type") {
        let allowed: Vec<&str> = match types {
            Value::String(s) => vec![s.as_str()],
            Value::Array(list) => list.iter().filter_map(Value::as_str).collect(),
            _ => return fail("schema 'type' must be a string or array".into()),
        };
        let actual = json_type(value);
        // JSON Schema treats integers as a refinement of numbers.
        let matches = allowed.iter().any(|&t| {
            t == actual || (t == "number" && actual == "integer")
        });
        if !matches {
            return fail(format!("expected type {allowed:?}, got {actual}"));
        }
    }

    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return fail(format!("value {value} not in enum"));
        }
    }

    if let Some(num) = value.as_f64() {
        if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
            if num < min {
                return fail(format!("{num} below minimum {min}"));
            }
        }
        if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
            if num > max {
                return fail(format!("{num} above maximum {max}"));
            }
        }
    }

    if let Value::Object(map) = value {
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for key in required.iter().filter_map(Value::as_str) {
                if !map.contains_key(key) {
                    return fail(format!("missing required key '{key}'"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        if let Some(props) = props {
            for (key, sub) in props {
                if let Some(v) = map.get(key) {
                    validate_value(v, sub, &format!("{path}.{key}"))?;
                }
            }
        }
        if schema.get("additionalProperties").and_then(Value::as_bool) == Some(false) {
            for key in map.keys() {
                if !props.is_some_and(|p| p.contains_key(key)) {
                    return fail(format!("unexpected key '{key}'"));
                }
            }
        }
    }

    if let (Value::Array(items), Some(item_schema)) = (value, schema.get("items")) {
        for (i, item) in items.iter().enumerate() {
            validate_value(item, item_schema, &format!("{path}[{i}]"))?;
        }
    }

    Ok(())
}

fn json_type(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
