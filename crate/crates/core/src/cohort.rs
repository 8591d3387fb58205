//! Valid-admission and unplanned-readmission rules, example extraction and
//! patient-level splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::records::{
    event_from_json, format_instant, parse_instant, parse_lines, Admission, EventRecord, Instant,
    Parsed, PatientHistory, RecordsError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("admission {admission_id}: pre-registration created after the hospitalization record")]
    InvalidChronology { admission_id: String },
    #[error("training set has no positive examples to oversample")]
    NoPositives,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Which instant closes an example's visible history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    #[default]
    Admission,
    Discharge,
}

impl FromStr for Anchor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "admission" => Ok(Anchor::Admission),
            "discharge" => Ok(Anchor::Discharge),
            other => Err(format!("unknown anchor {other:?} (expected admission|discharge)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub horizon_days: i64,
    pub prereg_window_hours: i64,
    pub anchor: Anchor,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            horizon_days: 30,
            prereg_window_hours: 24,
            anchor: Anchor::Admission,
        }
    }
}

/// Patient survived, was not discharged against medical advice and was not
/// transferred.
pub fn is_valid_admission(a: &Admission) -> bool {
    !a.died && !a.against_medical_advice && !a.transferred
}

/// Unplanned with the default 24-hour pre-registration window.
pub fn is_unplanned(a: &Admission) -> Result<bool, CohortError> {
    is_unplanned_within(a, Duration::hours(24))
}

/// No pre-registration, or one created at most `window` before the
/// hospitalization record (closed interval).
pub fn is_unplanned_within(a: &Admission, window: Duration) -> Result<bool, CohortError> {
    match a.prereg_created_at {
        None => Ok(true),
        Some(p) if p > a.created_at => Err(CohortError::InvalidChronology {
            admission_id: a.admission_id.clone(),
        }),
        Some(p) => Ok(a.created_at - p <= window),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub patient_id: String,
    pub anchor_admission_id: String,
    pub anchor_time: Instant,
    /// Static records plus every event at or before `anchor_time`.
    pub history: Vec<EventRecord>,
    pub label: u8,
}

impl Example {
    pub fn to_json(&self) -> Value {
        json!({
            "patient_id": self.patient_id,
            "anchor_admission_id": self.anchor_admission_id,
            "anchor_time": format_instant(self.anchor_time),
            "label": self.label,
            "events": self.history.iter().map(EventRecord::to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let obj = v.as_object().ok_or("example is not a JSON object")?;
        let get_str = |k: &str| -> Result<String, String> {
            obj.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("missing {k}"))
        };
        let label = match obj.get("label").and_then(Value::as_u64) {
            Some(l @ (0 | 1)) => l as u8,
            _ => return Err("label must be 0 or 1".into()),
        };
        let events = obj
            .get("events")
            .and_then(Value::as_array)
            .ok_or("missing events")?
            .iter()
            .map(event_from_json)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Example {
            patient_id: get_str("patient_id")?,
            anchor_admission_id: get_str("anchor_admission_id")?,
            anchor_time: parse_instant(&get_str("anchor_time")?)?,
            history: events,
            label,
        })
    }
}

pub fn write_examples<W: Write>(mut w: W, examples: &[Example]) -> std::io::Result<()> {
    for e in examples {
        writeln!(w, "{}", e.to_json())?;
    }
    Ok(())
}

pub fn parse_examples<R: BufRead>(reader: R) -> Result<Parsed<Example>, RecordsError> {
    parse_lines(reader, Example::from_json)
}

/// Examples of one patient plus the admissions excluded for corrupt
/// chronology.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientExamples {
    pub examples: Vec<Example>,
    pub rejected: Vec<CohortError>,
}

/// One example per valid admission. The label is 1 iff some other valid,
/// unplanned admission starts within `(end, end + horizon]`.
pub fn build_examples(h: &PatientHistory, cfg: &CohortConfig) -> PatientExamples {
    let window = Duration::hours(cfg.prereg_window_hours);
    let horizon = Duration::days(cfg.horizon_days);
    let mut rejected = Vec::new();
    // (admission, valid, unplanned); corrupt admissions drop out entirely.
    let usable: Vec<(&Admission, bool, bool)> = h
        .admissions
        .iter()
        .filter_map(|a| match is_unplanned_within(a, window) {
            Ok(unplanned) => Some((a, is_valid_admission(a), unplanned)),
            Err(e) => {
                rejected.push(e);
                None
            }
        })
        .collect();

    let mut examples = Vec::new();
    for &(a, valid, _) in &usable {
        if !valid {
            continue;
        }
        let readmitted = usable.iter().any(|&(b, b_valid, b_unplanned)| {
            let gap = b.start - a.end;
            b_valid && b_unplanned && gap > Duration::zero() && gap <= horizon
        });
        let anchor_time = match cfg.anchor {
            Anchor::Admission => a.start,
            Anchor::Discharge => a.end,
        };
        let history = h
            .events
            .iter()
            .filter(|e| e.sort_key().is_none_or(|t| t <= anchor_time))
            .cloned()
            .collect();
        examples.push(Example {
            patient_id: h.patient_id.clone(),
            anchor_admission_id: a.admission_id.clone(),
            anchor_time,
            history,
            label: u8::from(readmitted),
        });
    }
    PatientExamples { examples, rejected }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    pub fn get(&self, patient_id: &str) -> Option<Split> {
        self.assignment.get(patient_id).copied()
    }

    /// `patient_id<TAB>split` lines, sorted by patient id.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for (pid, split) in &self.assignment {
            out.push_str(pid);
            out.push('\t');
            out.push_str(split.as_str());
            out.push('\n');
        }
        out
    }

    pub fn parse_manifest(text: &str, seed: u64, ratios: [f64; 3]) -> Result<Self, String> {
        let mut assignment = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (pid, split) = line
                .split_once('\t')
                .ok_or_else(|| format!("split manifest line {}: missing tab", i + 1))?;
            assignment.insert(pid.to_string(), split.parse()?);
        }
        Ok(Self {
            assignment,
            seed,
            ratios,
        })
    }
}

/// Position of a patient in `[0, 1)` under a seeded SHA-256 hash.
pub fn patient_unit_hash(patient_id: &str, seed: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(patient_id.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    // 53 high bits give an exactly representable fraction.
    (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn split_of(patient_id: &str, seed: u64, ratios: [f64; 3]) -> Split {
    let u = patient_unit_hash(patient_id, seed);
    if u < ratios[0] {
        Split::Train
    } else if u < ratios[0] + ratios[1] {
        Split::Validation
    } else {
        Split::Test
    }
}

/// Assigns every patient with at least one example to exactly one split.
/// Depends only on (patient id, seed, ratios), so adding patients never
/// moves existing ones.
pub fn split_by_patient(
    examples: &[Example],
    seed: u64,
    ratios: [f64; 3],
) -> Result<SplitAssignment, CohortError> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
        return Err(CohortError::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let assignment = examples
        .iter()
        .map(|e| (e.patient_id.clone(), split_of(&e.patient_id, seed, ratios)))
        .collect();
    Ok(SplitAssignment {
        assignment,
        seed,
        ratios,
    })
}

/// Appends uniformly drawn copies of positives until the positive rate
/// reaches `target_rate`. Negatives are never touched.
pub fn oversample_positives(
    train: &[Example],
    target_rate: f64,
    seed: u64,
) -> Result<Vec<Example>, CohortError> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(CohortError::InvalidArgument(format!(
            "target rate {target_rate} outside (0, 1)"
        )));
    }
    let positives: Vec<&Example> = train.iter().filter(|e| e.label == 1).collect();
    if positives.is_empty() {
        return Err(CohortError::NoPositives);
    }
    let negatives = train.len() - positives.len();
    let mut n_pos = positives.len();
    let mut out = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while (n_pos as f64) < target_rate * ((n_pos + negatives) as f64) {
        out.push(positives[rng.random_range(0..positives.len())].clone());
        n_pos += 1;
    }
    Ok(out)
}

pub fn positive_rate(examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples.iter().filter(|e| e.label == 1).count() as f64 / examples.len() as f64
}
