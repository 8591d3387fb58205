//! Deterministic synthetic EHR generator with plantable label signals, and
//! a checker that replays the cohort rules against the generator's intent.
//!
//! Admissions are generated as a chain per patient. Every valid admission
//! draws its intended label first; a positive forces the next admission to
//! be a valid unplanned one inside the horizon, and a negative opens a
//! quiet period in which only planned or invalid admissions may start.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{Duration, TimeZone, Utc};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{build_examples, CohortConfig};
use crate::records::{
    format_instant, group_by_patient, parse_lines, Admission, Entity, EventRecord, Instant, Parsed,
    RecordsError,
};
use crate::mix_seed;

/// Marker planted by the token signal.
pub const MARKER_TOKEN: &str = "sigmarker";
/// The pair whose order carries the temporal signal.
pub const TEMPORAL_TOKENS: [&str; 2] = ["sigalpha", "sigbeta"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    #[default]
    None,
    /// Positives carry a marker token shortly before admission.
    Token,
    /// Every index admission carries both temporal tokens; their order
    /// gives the label.
    Temporal,
}

impl FromStr for SignalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "token" => Ok(Self::Token),
            "temporal" => Ok(Self::Temporal),
            other => Err(format!("unknown signal {other:?} (expected none|token|temporal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Mean number of background events per patient (uniform on
    /// `[mean/2, 3*mean/2]`).
    pub events_per_patient: f64,
    /// Relative weights of problem, encounter, diagnosis, order,
    /// clinical_note and form background events.
    pub entity_weights: [f64; 6],
    pub token_pool: usize,
    /// Intended fraction of index admissions labelled 1.
    pub positive_rate: f64,
    pub signal: SignalKind,
    /// Per-slot probability that a positive's pre-admission slot holds the
    /// marker (token signal only).
    pub q: f64,
    /// Pre-admission slots per index admission (token signal only).
    pub signal_slots: usize,
    /// Probability of another admission after an unforced one.
    pub continue_prob: f64,
    pub max_admissions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            events_per_patient: 30.0,
            entity_weights: [1.0, 2.0, 2.0, 3.0, 2.0, 3.0],
            token_pool: 400,
            positive_rate: 0.0618,
            signal: SignalKind::None,
            q: 0.9,
            signal_slots: 3,
            continue_prob: 0.45,
            max_admissions: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(format!("positive_rate {} outside (0, 1)", self.positive_rate));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(format!("q {} outside (0, 1]", self.q));
        }
        if !(0.0..1.0).contains(&self.continue_prob) {
            return Err(format!("continue_prob {} outside [0, 1)", self.continue_prob));
        }
        if self.token_pool < 10 {
            return Err("token_pool must be at least 10".into());
        }
        if self.max_admissions == 0 {
            return Err("max_admissions must be positive".into());
        }
        if self.entity_weights.iter().any(|w| w.is_nan() || *w < 0.0) || self.entity_weights.iter().sum::<f64>() <= 0.0 {
            return Err("entity_weights must be non-negative with a positive sum".into());
        }
        if self.events_per_patient.is_nan() || self.events_per_patient < 0.0 {
            return Err("events_per_patient must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionKind {
    ValidUnplanned,
    ValidPlanned,
    AgainstMedicalAdvice,
    Transferred,
    Died,
    CorruptChronology,
}

impl AdmissionKind {
    fn is_valid(self) -> bool {
        matches!(self, Self::ValidUnplanned | Self::ValidPlanned)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub admission_id: String,
    pub kind: AdmissionKind,
    /// `None` for admissions that never become examples.
    pub intended_label: Option<u8>,
    /// Timestamps of planted signal records.
    pub signal_positions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub events: Vec<EventRecord>,
    pub admissions: Vec<Admission>,
    pub manifest: Vec<ManifestEntry>,
}

impl SynthOutput {
    pub fn write_manifest<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for m in &self.manifest {
            writeln!(w, "{}", serde_json::to_string(m).expect("manifest entry serializes"))?;
        }
        Ok(())
    }
}

pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Parsed<ManifestEntry>, RecordsError> {
    parse_lines(reader, |v| serde_json::from_value(v.clone()).map_err(|e| e.to_string()))
}

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "ra", "su", "te", "vi", "do", "pa", "ri", "zo", "be", "chu", "fa", "ll", "mo", "ni", "que", "ta",
];

fn token_pool(size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let mut seen = BTreeSet::new();
    let mut pool = Vec::with_capacity(size);
    let reserved: BTreeSet<&str> = TEMPORAL_TOKENS.iter().chain([&MARKER_TOKEN]).copied().collect();
    while pool.len() < size {
        let n = rng.random_range(2..=4);
        let w: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            pool.push(w);
        }
    }
    pool
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    pool: &'a [String],
    patient_id: String,
    events: Vec<EventRecord>,
    n_encounters: usize,
}

impl Gen<'_> {
    /// Skewed draw: low pool indices are much more frequent.
    fn word(&mut self) -> String {
        let u: f64 = self.rng.random();
        let i = ((u * u * u) * self.pool.len() as f64) as usize;
        self.pool[i.min(self.pool.len() - 1)].clone()
    }

    fn words(&mut self, lo: usize, hi: usize) -> String {
        let n = self.rng.random_range(lo..=hi);
        (0..n).map(|_| self.word()).collect::<Vec<_>>().join(" ")
    }

    fn record(&mut self, entity: Entity, t: Option<Instant>, payload: &[(&str, String)]) -> &mut EventRecord {
        self.events.push(EventRecord {
            patient_id: self.patient_id.clone(),
            entity,
            timestamp: t,
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            form_pairs: (entity == Entity::Form).then(Vec::new),
            encounter_id: None,
        });
        self.events.last_mut().expect("just pushed")
    }

    fn order(&mut self, t: Instant, medication: String) {
        let dose = format!("{} mg", self.rng.random_range(1..=50) * 5);
        self.record(
            Entity::Order,
            Some(t),
            &[("medication.categorical_text", medication), ("dose", dose)],
        );
    }

    fn background(&mut self, entity: Entity, t: Instant) {
        match entity {
            Entity::Problem => {
                let status = if self.rng.random_bool(0.7) { "active" } else { "resolved" };
                let d = self.words(1, 3);
                self.record(entity, Some(t), &[("description", d), ("status", status.into())]);
            }
            Entity::Encounter | Entity::Diagnosis => {
                self.n_encounters += 1;
                let enc = format!("{}-E{:03}", self.patient_id, self.n_encounters);
                let payload = if entity == Entity::Encounter {
                    let kind = ["ambulatory", "emergency", "telemedicine"][self.rng.random_range(0..3)];
                    vec![("type", kind.to_string()), ("specialty", self.word())]
                } else {
                    let code = format!("{}{:02}", (b'A' + self.rng.random_range(0..26u8)) as char, self.rng.random_range(0..100));
                    vec![("code", code), ("description", self.words(1, 3))]
                };
                self.record(entity, Some(t), &payload).encounter_id = Some(enc);
            }
            Entity::Order => {
                let m = self.word();
                self.order(t, m);
            }
            Entity::ClinicalNote => {
                let text = self.words(4, 14);
                self.record(entity, Some(t), &[("content.text", text)]);
            }
            Entity::Form => {
                let n = self.rng.random_range(1..=4);
                let pairs: Vec<(String, String)> = (0..n)
                    .map(|_| {
                        let key = self.words(1, 2);
                        let value = if self.rng.random_bool(0.3) {
                            format!("{}", self.rng.random_range(30..200))
                        } else {
                            self.words(1, 3)
                        };
                        (key, value)
                    })
                    .collect();
                self.record(entity, Some(t), &[]).form_pairs = Some(pairs);
            }
            Entity::Personal => unreachable!("personal records are static"),
        }
    }
}

fn seconds(rng: &mut ChaCha8Rng, lo: Duration, hi: Duration) -> Duration {
    Duration::seconds(rng.random_range(lo.num_seconds()..=hi.num_seconds()))
}

const BACKGROUND: [Entity; 6] = [
    Entity::Problem,
    Entity::Encounter,
    Entity::Diagnosis,
    Entity::Order,
    Entity::ClinicalNote,
    Entity::Form,
];

struct PlannedAdmission {
    kind: AdmissionKind,
    start: Instant,
    end: Instant,
    label: Option<u8>,
}

/// Chain of admissions satisfying the label intent under the default
/// cohort rules (30-day horizon, 24-hour pre-registration window).
fn admission_chain(cfg: &SynthConfig, rng: &mut ChaCha8Rng, first_start: Instant) -> Vec<PlannedAdmission> {
    let horizon = Duration::days(30);
    let one_sec = Duration::seconds(1);
    let kinds = [
        AdmissionKind::ValidUnplanned,
        AdmissionKind::ValidPlanned,
        AdmissionKind::AgainstMedicalAdvice,
        AdmissionKind::Transferred,
        AdmissionKind::Died,
        AdmissionKind::CorruptChronology,
    ];
    let kind_dist = WeightedIndex::new([70.0, 14.0, 5.0, 5.0, 3.0, 1.0]).expect("static weights");
    let mut out: Vec<PlannedAdmission> = Vec::new();
    let mut quiet_until: Option<Instant> = None;
    let mut forced = false;
    loop {
        let prev_end = out.last().map(|a| a.end);
        let kind;
        let start;
        if forced {
            kind = AdmissionKind::ValidUnplanned;
            let prev_end = prev_end.expect("forced admissions follow another");
            let lo = quiet_until.map_or(prev_end, |q| q.max(prev_end));
            let hi = prev_end + horizon;
            start = match rng.random_range(0..10) {
                0 => hi,
                1 => lo + one_sec,
                _ => lo + seconds(rng, one_sec, hi - lo),
            };
        } else {
            kind = if out.is_empty() {
                // The first admission is always an index so every patient
                // contributes an example.
                if rng.random_bool(0.8) { AdmissionKind::ValidUnplanned } else { AdmissionKind::ValidPlanned }
            } else {
                kinds[kind_dist.sample(rng)]
            };
            start = match prev_end {
                None => first_start,
                Some(prev_end) if kind == AdmissionKind::ValidUnplanned => {
                    let lo = quiet_until.map_or(prev_end, |q| q.max(prev_end));
                    if rng.random_range(0..8) == 0 {
                        lo + one_sec
                    } else {
                        lo + seconds(rng, Duration::days(1), Duration::days(200))
                    }
                }
                Some(prev_end) => prev_end + seconds(rng, Duration::hours(1), Duration::days(90)),
            };
        }
        // At least two days so pre-admission signal records of the next
        // admission never precede this one's start.
        let end = start + seconds(rng, Duration::days(2), Duration::days(15));
        let label = kind.is_valid().then(|| u8::from(rng.random_bool(cfg.positive_rate)));
        match label {
            Some(1) => forced = true,
            Some(_) => {
                forced = false;
                let q = end + horizon;
                quiet_until = Some(quiet_until.map_or(q, |old| old.max(q)));
            }
            None => forced = false,
        }
        out.push(PlannedAdmission { kind, start, end, label });
        if kind == AdmissionKind::Died {
            break;
        }
        if !forced && (out.len() >= cfg.max_admissions || !rng.random_bool(cfg.continue_prob)) {
            break;
        }
    }
    out
}

fn materialize(p: &PlannedAdmission, patient_id: &str, idx: usize, rng: &mut ChaCha8Rng) -> Admission {
    let created_at = p.start - seconds(rng, Duration::zero(), Duration::hours(3));
    let day = Duration::hours(24);
    let prereg_created_at = match p.kind {
        AdmissionKind::ValidPlanned => Some(match rng.random_range(0..4) {
            0 => created_at - day - Duration::seconds(1),
            _ => created_at - seconds(rng, Duration::days(2), Duration::days(40)),
        }),
        AdmissionKind::CorruptChronology => Some(created_at + seconds(rng, Duration::seconds(1), Duration::hours(6))),
        _ => match rng.random_range(0..6) {
            0 => Some(created_at - day),
            1 => Some(created_at - seconds(rng, Duration::zero(), day)),
            _ => None,
        },
    };
    Admission {
        patient_id: patient_id.to_string(),
        admission_id: format!("{patient_id}-A{:02}", idx + 1),
        start: p.start,
        end: p.end,
        died: p.kind == AdmissionKind::Died,
        against_medical_advice: p.kind == AdmissionKind::AgainstMedicalAdvice,
        transferred: p.kind == AdmissionKind::Transferred,
        prereg_created_at,
        created_at,
    }
}

fn base_time() -> Instant {
    Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).single().expect("valid base date")
}

fn generate_patient(cfg: &SynthConfig, pool: &[String], index: usize, out: &mut SynthOutput) {
    let patient_id = format!("P{index:06}");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let first_start = base_time() + Duration::days(365) + seconds(&mut rng, Duration::zero(), Duration::days(365));
    let chain = admission_chain(cfg, &mut rng, first_start);
    let mut g = Gen {
        rng,
        pool,
        patient_id: patient_id.clone(),
        events: Vec::new(),
        n_encounters: 0,
    };

    let sex = if g.rng.random_bool(0.5) { "f" } else { "m" };
    let birth = format!("{}", g.rng.random_range(1930..2010));
    let commune = g.word();
    g.record(
        Entity::Personal,
        None,
        &[("sex", sex.into()), ("birth_year", birth), ("commune", commune)],
    );

    let span_start = first_start - Duration::days(365);
    let span_end = chain.last().expect("non-empty chain").end;
    let mean = cfg.events_per_patient;
    let n_bg = if mean > 0.0 { g.rng.random_range((mean * 0.5) as usize..=(mean * 1.5) as usize) } else { 0 };
    let entity_dist = WeightedIndex::new(cfg.entity_weights).expect("validated weights");
    for _ in 0..n_bg {
        let t = span_start + seconds(&mut g.rng, Duration::zero(), span_end - span_start);
        let e = BACKGROUND[entity_dist.sample(&mut g.rng)];
        g.background(e, t);
    }

    for (i, p) in chain.iter().enumerate() {
        let adm = materialize(p, &patient_id, i, &mut g.rng);
        // Every admission gets an emergency encounter and a note in the two
        // days before it starts.
        for e in [Entity::Encounter, Entity::ClinicalNote] {
            let t = p.start - seconds(&mut g.rng, Duration::minutes(30), Duration::hours(48));
            g.background(e, t);
        }
        let mut signal_positions = Vec::new();
        if p.kind.is_valid() {
            match cfg.signal {
                SignalKind::None => {}
                SignalKind::Token => {
                    for _ in 0..cfg.signal_slots {
                        let t = p.start - seconds(&mut g.rng, Duration::hours(1), Duration::hours(11));
                        let marked = p.label == Some(1) && g.rng.random_bool(cfg.q);
                        let med = if marked { MARKER_TOKEN.to_string() } else { g.word() };
                        g.order(t, med);
                        if marked {
                            signal_positions.push(format_instant(t));
                        }
                    }
                }
                SignalKind::Temporal => {
                    let older = p.start - seconds(&mut g.rng, Duration::hours(26), Duration::hours(34));
                    let newer = p.start - seconds(&mut g.rng, Duration::hours(2), Duration::hours(10));
                    let [a, b] = TEMPORAL_TOKENS;
                    let (first, second) = if p.label == Some(1) { (a, b) } else { (b, a) };
                    g.order(older, first.to_string());
                    g.order(newer, second.to_string());
                    signal_positions.push(format_instant(older));
                    signal_positions.push(format_instant(newer));
                }
            }
        }
        out.manifest.push(ManifestEntry {
            patient_id: patient_id.clone(),
            admission_id: adm.admission_id.clone(),
            kind: p.kind,
            intended_label: p.label,
            signal_positions,
        });
        out.admissions.push(adm);
    }

    g.events.sort_by_key(EventRecord::sort_key);
    out.events.append(&mut g.events);
}

/// Deterministic in `cfg` (including its seed).
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, String> {
    cfg.validate()?;
    let pool = token_pool(cfg.token_pool, cfg.seed);
    let mut out = SynthOutput {
        events: Vec::new(),
        admissions: Vec::new(),
        manifest: Vec::new(),
    };
    for i in 0..cfg.n_patients {
        generate_patient(cfg, &pool, i, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub admission_id: String,
    pub intended: Option<u8>,
    pub derived: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelReport {
    pub admissions_checked: usize,
    pub examples: usize,
    pub discrepancies: Vec<Discrepancy>,
}

/// Runs the cohort rules over generated data and diffs derived labels
/// (`None` when an admission yields no example) against the manifest.
pub fn verify_labels(
    events: &[EventRecord],
    admissions: &[Admission],
    manifest: &[ManifestEntry],
    cohort: &CohortConfig,
) -> LabelReport {
    let mut derived: BTreeMap<String, u8> = BTreeMap::new();
    for h in group_by_patient(events.to_vec(), admissions.to_vec()) {
        for e in build_examples(&h, cohort).examples {
            derived.insert(e.anchor_admission_id, e.label);
        }
    }
    let mut report = LabelReport {
        admissions_checked: manifest.len(),
        examples: derived.len(),
        discrepancies: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for m in manifest {
        seen.insert(m.admission_id.as_str());
        let got = derived.get(&m.admission_id).copied();
        if got != m.intended_label {
            report.discrepancies.push(Discrepancy {
                admission_id: m.admission_id.clone(),
                intended: m.intended_label,
                derived: got,
            });
        }
    }
    for (id, label) in &derived {
        if !seen.contains(id.as_str()) {
            report.discrepancies.push(Discrepancy {
                admission_id: id.clone(),
                intended: None,
                derived: Some(*label),
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, signal: SignalKind) -> SynthConfig {
        SynthConfig {
            n_patients: 60,
            events_per_patient: 8.0,
            positive_rate: 0.3,
            signal,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(3, SignalKind::Token)).unwrap();
        let b = generate(&small(3, SignalKind::Token)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&small(4, SignalKind::Token)).unwrap());
    }

    #[test]
    fn labels_match_intent() {
        for signal in [SignalKind::None, SignalKind::Token, SignalKind::Temporal] {
            let out = generate(&small(9, signal)).unwrap();
            let r = verify_labels(&out.events, &out.admissions, &out.manifest, &CohortConfig::default());
            assert!(r.discrepancies.is_empty(), "{:?}", r.discrepancies);
            assert!(r.examples > 0);
        }
    }

    #[test]
    fn corrupted_manifest_yields_one_discrepancy() {
        let mut out = generate(&small(5, SignalKind::None)).unwrap();
        let m = out.manifest.iter_mut().find(|m| m.intended_label.is_some()).unwrap();
        m.intended_label = Some(1 - m.intended_label.unwrap());
        let r = verify_labels(&out.events, &out.admissions, &out.manifest, &CohortConfig::default());
        assert_eq!(r.discrepancies.len(), 1);
    }

    #[test]
    fn every_entity_kind_appears() {
        let out = generate(&small(1, SignalKind::None)).unwrap();
        for e in Entity::ALL {
            assert!(out.events.iter().any(|r| r.entity == e), "{e}");
        }
        let kinds: BTreeSet<_> = out.manifest.iter().map(|m| format!("{:?}", m.kind)).collect();
        assert!(kinds.len() >= 4, "{kinds:?}");
    }

    #[test]
    fn temporal_tokens_are_balanced() {
        let out = generate(&small(2, SignalKind::Temporal)).unwrap();
        let count = |tok: &str| {
            out.events
                .iter()
                .filter(|r| r.payload.get("medication.categorical_text").map(String::as_str) == Some(tok))
                .count()
        };
        assert_eq!(count(TEMPORAL_TOKENS[0]), count(TEMPORAL_TOKENS[1]));
        assert!(count(TEMPORAL_TOKENS[0]) > 0);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let bad = SynthConfig { positive_rate: 1.0, ..SynthConfig::default() };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig { q: 0.0, ..SynthConfig::default() };
        assert!(generate(&bad).is_err());
    }
}
