//! EHR entity model and line-delimited JSON ingestion.
//!
//! Events and admissions come from two separate files. Every line is one
//! JSON object; malformed lines are collected with their line numbers
//! instead of aborting the whole read.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub type Instant = DateTime<Utc>;

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("unreadable input at line 1: {0}")]
    FatalFormat(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line_no: usize,
    pub reason: String,
}

impl fmt::Display for MalformedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line_no, self.reason)
    }
}

/// Good items plus the lines that could not be read.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    pub errors: Vec<MalformedLine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entity {
    Personal,
    Problem,
    Encounter,
    Diagnosis,
    Order,
    ClinicalNote,
    Form,
}

impl Entity {
    pub const ALL: [Entity; 7] = [
        Entity::Personal,
        Entity::Problem,
        Entity::Encounter,
        Entity::Diagnosis,
        Entity::Order,
        Entity::ClinicalNote,
        Entity::Form,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Entity::Personal => "personal",
            Entity::Problem => "problem",
            Entity::Encounter => "encounter",
            Entity::Diagnosis => "diagnosis",
            Entity::Order => "order",
            Entity::ClinicalNote => "clinical_note",
            Entity::Form => "form",
        }
    }
}

impl FromStr for Entity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Entity::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown entity {s:?}"))
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One timestamped atom of patient history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub patient_id: String,
    pub entity: Entity,
    /// Required for everything except `personal`.
    pub timestamp: Option<Instant>,
    /// Flattened field path → value. Nested input objects are joined with dots.
    pub payload: BTreeMap<String, String>,
    /// `Some` iff `entity == Form`.
    pub form_pairs: Option<Vec<(String, String)>>,
    pub encounter_id: Option<String>,
}

impl EventRecord {
    /// Ordering key inside a history: static personal data first, then time.
    pub fn sort_key(&self) -> Option<Instant> {
        match self.entity {
            Entity::Personal => None,
            _ => self.timestamp,
        }
    }

    pub fn is_static(&self) -> bool {
        self.entity == Entity::Personal
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("patient_id".into(), json!(self.patient_id));
        obj.insert("entity".into(), json!(self.entity.as_str()));
        if let Some(ts) = self.timestamp {
            obj.insert("timestamp".into(), json!(format_instant(ts)));
        }
        if let Some(enc) = &self.encounter_id {
            obj.insert("encounter_id".into(), json!(enc));
        }
        if !self.payload.is_empty() || self.form_pairs.is_none() {
            obj.insert("payload".into(), json!(self.payload));
        }
        if let Some(pairs) = &self.form_pairs {
            let arr: Vec<Value> = pairs.iter().map(|(k, v)| json!([k, v])).collect();
            obj.insert("form_pairs".into(), Value::Array(arr));
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub patient_id: String,
    pub admission_id: String,
    pub start: Instant,
    pub end: Instant,
    pub died: bool,
    pub against_medical_advice: bool,
    pub transferred: bool,
    pub prereg_created_at: Option<Instant>,
    /// When the hospitalization record itself was created.
    pub created_at: Instant,
}

impl Admission {
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("patient_id".into(), json!(self.patient_id));
        obj.insert("admission_id".into(), json!(self.admission_id));
        obj.insert("start".into(), json!(format_instant(self.start)));
        obj.insert("end".into(), json!(format_instant(self.end)));
        obj.insert("created_at".into(), json!(format_instant(self.created_at)));
        obj.insert("died".into(), json!(self.died));
        obj.insert(
            "against_medical_advice".into(),
            json!(self.against_medical_advice),
        );
        obj.insert("transferred".into(), json!(self.transferred));
        if let Some(p) = self.prereg_created_at {
            obj.insert("prereg_created_at".into(), json!(format_instant(p)));
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientHistory {
    pub patient_id: String,
    /// Sorted by [`EventRecord::sort_key`], stable on input order.
    pub events: Vec<EventRecord>,
    /// Sorted by start.
    pub admissions: Vec<Admission>,
}

/// RFC 3339, UTC, whole seconds.
pub fn format_instant(t: Instant) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Parses RFC 3339 and truncates to whole seconds.
pub fn parse_instant(s: &str) -> Result<Instant, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc).trunc_subsecs(0))
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

fn required_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s),
        Some(Value::String(_)) => Err(format!("empty {key}")),
        Some(_) => Err(format!("{key} must be a string")),
        None => Err(format!("missing {key}")),
    }
}

fn optional_instant(obj: &Map<String, Value>, key: &str) -> Result<Option<Instant>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => parse_instant(s).map(Some),
        Some(_) => Err(format!("{key} must be an RFC 3339 string")),
    }
}

fn required_bool(obj: &Map<String, Value>, key: &str) -> Result<bool, String> {
    match obj.get(key) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(format!("{key} must be a boolean")),
        None => Err(format!("missing {key}")),
    }
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().filter_map(scalar_text).collect();
            Some(parts.join(" "))
        }
        Value::Object(_) => None,
    }
}

fn flatten_payload(prefix: &str, obj: &Map<String, Value>, out: &mut BTreeMap<String, String>) {
    for (k, v) in obj {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Object(inner) => flatten_payload(&key, inner, out),
            other => {
                if let Some(text) = scalar_text(other) {
                    out.insert(key, text);
                }
            }
        }
    }
}

fn parse_form_pairs(v: &Value) -> Result<Vec<(String, String)>, String> {
    let Value::Array(items) = v else {
        return Err("form_pairs must be an array".into());
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| match item {
            Value::Array(kv) if kv.len() == 2 => {
                let k = scalar_text(&kv[0]).unwrap_or_default();
                let v = scalar_text(&kv[1]).unwrap_or_default();
                Ok((k, v))
            }
            _ => Err(format!("form_pairs[{i}] must be a [key, value] pair")),
        })
        .collect()
}

pub fn event_from_json(v: &Value) -> Result<EventRecord, String> {
    let Value::Object(obj) = v else {
        return Err("line is not a JSON object".into());
    };
    let patient_id = required_str(obj, "patient_id")?.to_string();
    let entity: Entity = required_str(obj, "entity")?.parse()?;
    let timestamp = optional_instant(obj, "timestamp")?;
    if timestamp.is_none() && entity != Entity::Personal {
        return Err(format!("{entity} record without timestamp"));
    }
    let encounter_id = match obj.get("encounter_id") {
        None | Some(Value::Null) => None,
        Some(v) => Some(scalar_text(v).ok_or("encounter_id must be a scalar")?),
    };
    let mut payload = BTreeMap::new();
    match obj.get("payload") {
        None | Some(Value::Null) => {}
        Some(Value::Object(p)) => flatten_payload("", p, &mut payload),
        Some(_) => return Err("payload must be an object".into()),
    }
    let form_pairs = match (entity, obj.get("form_pairs")) {
        (Entity::Form, Some(v)) => Some(parse_form_pairs(v)?),
        (Entity::Form, None) => return Err("form record without form_pairs".into()),
        (_, None) | (_, Some(Value::Null)) => None,
        (e, Some(_)) => return Err(format!("form_pairs on a non-form ({e}) record")),
    };
    Ok(EventRecord {
        patient_id,
        entity,
        timestamp,
        payload,
        form_pairs,
        encounter_id,
    })
}

pub fn admission_from_json(v: &Value) -> Result<Admission, String> {
    let Value::Object(obj) = v else {
        return Err("line is not a JSON object".into());
    };
    let need = |key: &str| -> Result<Instant, String> {
        optional_instant(obj, key)?.ok_or_else(|| format!("missing {key}"))
    };
    let adm = Admission {
        patient_id: required_str(obj, "patient_id")?.to_string(),
        admission_id: required_str(obj, "admission_id")?.to_string(),
        start: need("start")?,
        end: need("end")?,
        created_at: need("created_at")?,
        died: required_bool(obj, "died")?,
        against_medical_advice: required_bool(obj, "against_medical_advice")?,
        transferred: required_bool(obj, "transferred")?,
        prereg_created_at: optional_instant(obj, "prereg_created_at")?,
    };
    if adm.start > adm.end {
        return Err(format!(
            "admission {} starts after it ends",
            adm.admission_id
        ));
    }
    Ok(adm)
}

/// Generic JSON-lines reader. Blank lines are skipped. A first line that is
/// not valid UTF-8 JSON is fatal; later bad lines are collected.
pub fn parse_lines<R, T>(
    reader: R,
    convert: impl Fn(&Value) -> Result<T, String>,
) -> Result<Parsed<T>, RecordsError>
where
    R: BufRead,
{
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.split(b'\n').enumerate() {
        let line_no = idx + 1;
        let bytes = line?;
        let text = match std::str::from_utf8(&bytes) {
            Ok(t) => t.trim(),
            Err(e) if line_no == 1 => return Err(RecordsError::FatalFormat(e.to_string())),
            Err(e) => {
                errors.push(MalformedLine {
                    line_no,
                    reason: format!("invalid UTF-8: {e}"),
                });
                continue;
            }
        };
        if text.is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) if line_no == 1 => return Err(RecordsError::FatalFormat(e.to_string())),
            Err(e) => {
                errors.push(MalformedLine {
                    line_no,
                    reason: format!("invalid JSON: {e}"),
                });
                continue;
            }
        };
        match convert(&value) {
            Ok(item) => items.push(item),
            Err(reason) => errors.push(MalformedLine { line_no, reason }),
        }
    }
    Ok(Parsed { items, errors })
}

pub fn parse_records<R: BufRead>(reader: R) -> Result<Parsed<EventRecord>, RecordsError> {
    parse_lines(reader, event_from_json)
}

pub fn parse_admissions<R: BufRead>(reader: R) -> Result<Parsed<Admission>, RecordsError> {
    parse_lines(reader, admission_from_json)
}

pub fn write_records<W: Write>(mut w: W, records: &[EventRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json())?;
    }
    Ok(())
}

pub fn write_admissions<W: Write>(mut w: W, admissions: &[Admission]) -> std::io::Result<()> {
    for a in admissions {
        writeln!(w, "{}", a.to_json())?;
    }
    Ok(())
}

/// One history per distinct patient id (sorted by id). Events are stably
/// sorted by [`EventRecord::sort_key`], admissions by start (then id).
pub fn group_by_patient(records: Vec<EventRecord>, admissions: Vec<Admission>) -> Vec<PatientHistory> {
    let mut by_patient: BTreeMap<String, PatientHistory> = BTreeMap::new();
    let entry = |map: &mut BTreeMap<String, PatientHistory>, id: &str| {
        if !map.contains_key(id) {
            map.insert(
                id.to_string(),
                PatientHistory {
                    patient_id: id.to_string(),
                    events: Vec::new(),
                    admissions: Vec::new(),
                },
            );
        }
    };
    for r in records {
        entry(&mut by_patient, &r.patient_id);
        by_patient.get_mut(&r.patient_id).expect("inserted").events.push(r);
    }
    for a in admissions {
        entry(&mut by_patient, &a.patient_id);
        by_patient.get_mut(&a.patient_id).expect("inserted").admissions.push(a);
    }
    by_patient
        .into_values()
        .map(|mut h| {
            h.events.sort_by_key(EventRecord::sort_key);
            h.admissions
                .sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.admission_id.cmp(&b.admission_id)));
            h
        })
        .collect()
}
