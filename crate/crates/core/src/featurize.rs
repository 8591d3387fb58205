//! Encoding of event histories into (feature, token) pairs and form
//! (keys, values) pairs, and bucketing into fixed windows before the anchor.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::Example;
use crate::records::{format_instant, EventRecord, Instant};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
const VOCAB_HEADER: &str = "RDMT-VOCAB 1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeaturizeError {
    #[error("training corpus contains no tokens")]
    EmptyCorpus,
    #[error("event at {event} is after the anchor {anchor}")]
    FutureEvent { event: String, anchor: String },
    #[error("vocabulary file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturizeConfig {
    pub min_token_count: usize,
    pub max_features: usize,
    pub window_hours: i64,
    pub max_windows: usize,
    pub max_time_buckets: usize,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            min_token_count: 5,
            max_features: 64,
            window_hours: 12,
            max_windows: 256,
            max_time_buckets: 512,
        }
    }
}

/// Lowercased runs of letters and digits; everything else separates.
pub fn tokenize_text(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// `<entity>.<field>`, lowercased. Whitespace and control characters become
/// `_` so paths stay single tab-free tokens in the vocabulary file.
pub fn feature_path(r: &EventRecord, field: &str) -> String {
    let raw = format!("{}.{}", r.entity.as_str(), field);
    raw.to_lowercase()
        .chars()
        .map(|c| if c.is_whitespace() || c.is_control() { '_' } else { c })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    features: Vec<String>,
    feature_to_id: HashMap<String, usize>,
    pub min_token_count: usize,
}

/// Raw text view of one record: flat (path, tokens) fields and form pairs.
struct RawRecord {
    flat: Vec<(String, Vec<String>)>,
    form: Vec<(Vec<String>, Vec<String>)>,
}

fn raw_record(r: &EventRecord) -> RawRecord {
    let flat = r
        .payload
        .iter()
        .map(|(field, value)| (feature_path(r, field), tokenize_text(value)))
        .filter(|(_, toks)| !toks.is_empty())
        .collect();
    let form = r
        .form_pairs
        .iter()
        .flatten()
        .map(|(k, v)| (tokenize_text(k), tokenize_text(v)))
        .filter(|(k, v)| !(k.is_empty() && v.is_empty()))
        .collect();
    RawRecord { flat, form }
}

/// The latest example of each patient; its history covers every earlier one.
pub fn latest_per_patient(examples: &[Example]) -> Vec<&Example> {
    let mut latest: BTreeMap<&str, &Example> = BTreeMap::new();
    for e in examples {
        let slot = latest.entry(&e.patient_id).or_insert(e);
        if (e.anchor_time, &e.anchor_admission_id) > (slot.anchor_time, &slot.anchor_admission_id) {
            *slot = e;
        }
    }
    latest.into_values().collect()
}

fn ranked(counts: HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

impl Vocabulary {
    /// Counts every record once per patient (examples of one patient share
    /// history). Call with training examples only.
    pub fn build(
        train: &[Example],
        min_token_count: usize,
        max_features: usize,
    ) -> Result<Self, FeaturizeError> {
        let mut token_counts: HashMap<String, usize> = HashMap::new();
        let mut feature_counts: HashMap<String, usize> = HashMap::new();
        for e in latest_per_patient(train) {
            for r in &e.history {
                let raw = raw_record(r);
                for (path, toks) in raw.flat {
                    *feature_counts.entry(path).or_default() += toks.len();
                    for t in toks {
                        *token_counts.entry(t).or_default() += 1;
                    }
                }
                for (k, v) in raw.form {
                    for t in k.into_iter().chain(v) {
                        *token_counts.entry(t).or_default() += 1;
                    }
                }
            }
        }
        if token_counts.is_empty() {
            return Err(FeaturizeError::EmptyCorpus);
        }
        let tokens = ranked(token_counts)
            .into_iter()
            .filter(|(_, c)| *c >= min_token_count)
            .map(|(t, _)| t);
        let mut features: Vec<String> = ranked(feature_counts)
            .into_iter()
            .take(max_features)
            .map(|(f, _)| f)
            .collect();
        features.sort();
        Ok(Self::from_parts(tokens.collect(), features, min_token_count))
    }

    fn from_parts(tokens: Vec<String>, features: Vec<String>, min_token_count: usize) -> Self {
        let mut all = vec!["[PAD]".to_string(), "[OOV]".to_string()];
        all.extend(tokens);
        let token_to_id = all.iter().enumerate().skip(2).map(|(i, t)| (t.clone(), i)).collect();
        let feature_to_id = features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        Self {
            tokens: all,
            token_to_id,
            features,
            feature_to_id,
            min_token_count,
        }
    }

    /// Size of the token id space, including PAD and OOV.
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(OOV)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn feature_id(&self, path: &str) -> Option<usize> {
        self.feature_to_id.get(path).copied()
    }

    pub fn feature(&self, id: usize) -> Option<&str> {
        self.features.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{VOCAB_HEADER}\n# min_token_count {}\n", self.min_token_count);
        for (i, t) in self.tokens.iter().enumerate().skip(2) {
            let _ = writeln!(out, "T\t{t}\t{i}");
        }
        for (i, f) in self.features.iter().enumerate() {
            let _ = writeln!(out, "F\t{f}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FeaturizeError> {
        let bad = |msg: String| FeaturizeError::Format(msg);
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(bad(format!("missing {VOCAB_HEADER:?} header")));
        }
        let mut min_token_count = 0;
        let mut tokens = Vec::new();
        let mut features = Vec::new();
        for (n, line) in lines.enumerate() {
            if let Some(rest) = line.strip_prefix("# min_token_count ") {
                min_token_count = rest.trim().parse().map_err(|_| bad(format!("line {}: bad count", n + 2)))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [kind, name, id] = parts[..] else {
                return Err(bad(format!("line {}: expected 3 tab-separated fields", n + 2)));
            };
            let id: usize = id.parse().map_err(|_| bad(format!("line {}: bad id", n + 2)))?;
            let (expected, list) = match kind {
                "T" => (tokens.len() + 2, &mut tokens),
                "F" => (features.len(), &mut features),
                other => return Err(bad(format!("line {}: unknown kind {other:?}", n + 2))),
            };
            if id != expected {
                return Err(bad(format!("line {}: id {id} is not dense (expected {expected})", n + 2)));
            }
            list.push(name.to_string());
        }
        Ok(Self::from_parts(tokens, features, min_token_count))
    }

    /// SHA-256 of the serialized vocabulary; binds checkpoints to it.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Datum {
    Flat { feature_id: usize, token_id: usize },
    Form { key_ids: Vec<usize>, value_ids: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDatum {
    pub timestamp: Instant,
    pub datum: Datum,
}

fn side_ids(tokens: &[String], v: &Vocabulary) -> Vec<usize> {
    if tokens.is_empty() {
        // A form with only a key or only a value still contributes.
        return vec![OOV];
    }
    tokens.iter().map(|t| v.token_id(t)).collect()
}

/// Time-ordered encoded history. Static records take the anchor time.
pub fn encode_example(e: &Example, v: &Vocabulary) -> Vec<EncodedDatum> {
    let mut out = Vec::new();
    for r in &e.history {
        let timestamp = r.sort_key().unwrap_or(e.anchor_time);
        let raw = raw_record(r);
        for (path, toks) in raw.flat {
            let Some(feature_id) = v.feature_id(&path) else {
                continue;
            };
            out.extend(toks.iter().map(|t| EncodedDatum {
                timestamp,
                datum: Datum::Flat {
                    feature_id,
                    token_id: v.token_id(t),
                },
            }));
        }
        for (k, val) in raw.form {
            out.push(EncodedDatum {
                timestamp,
                datum: Datum::Form {
                    key_ids: side_ids(&k, v),
                    value_ids: side_ids(&val, v),
                },
            });
        }
    }
    out.sort_by_key(|d| d.timestamp);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Window {
    /// 0 is the window ending at the anchor.
    pub bucket_index: usize,
    pub flat: BTreeMap<usize, Vec<usize>>,
    pub forms: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Window {
    pub fn is_empty(&self) -> bool {
        self.flat.is_empty() && self.forms.is_empty()
    }
}

/// Windows ordered oldest to newest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WindowSequence {
    pub windows: Vec<Window>,
}

/// `floor((anchor - t) / window)`; `None` for events after the anchor.
pub fn bucket_of(t: Instant, anchor: Instant, window_hours: i64) -> Option<usize> {
    let age = (anchor - t).num_seconds();
    if age < 0 {
        return None;
    }
    Some((age / (window_hours * 3600)) as usize)
}

/// Groups data into `window_hours` buckets before `anchor`, keeping at most
/// the newest `max_windows` non-empty ones. Contents of each window are put
/// in canonical order so tied timestamps cannot change the result.
pub fn windowize(
    data: &[EncodedDatum],
    anchor: Instant,
    window_hours: i64,
    max_windows: usize,
) -> Result<WindowSequence, FeaturizeError> {
    let mut buckets: BTreeMap<usize, Window> = BTreeMap::new();
    for d in data {
        let j = bucket_of(d.timestamp, anchor, window_hours).ok_or_else(|| {
            FeaturizeError::FutureEvent {
                event: format_instant(d.timestamp),
                anchor: format_instant(anchor),
            }
        })?;
        let w = buckets.entry(j).or_insert_with(|| Window {
            bucket_index: j,
            ..Window::default()
        });
        match &d.datum {
            Datum::Flat { feature_id, token_id } => w.flat.entry(*feature_id).or_default().push(*token_id),
            Datum::Form { key_ids, value_ids } => w.forms.push((key_ids.clone(), value_ids.clone())),
        }
    }
    // Ascending bucket index is newest first; keep the head, then reverse.
    let mut windows: Vec<Window> = buckets.into_values().take(max_windows).collect();
    windows.reverse();
    for w in &mut windows {
        w.flat.values_mut().for_each(|toks| toks.sort_unstable());
        w.forms.sort();
    }
    Ok(WindowSequence { windows })
}

pub fn time_bucket_embedding_index(bucket_index: usize, max_time_buckets: usize) -> usize {
    bucket_index.min(max_time_buckets.saturating_sub(1))
}

/// Encoded, windowed example ready for the sequence model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedExample {
    pub patient_id: String,
    pub anchor_admission_id: String,
    pub label: u8,
    pub windows: WindowSequence,
}

pub fn featurize_example(
    e: &Example,
    v: &Vocabulary,
    cfg: &FeaturizeConfig,
) -> Result<FeaturizedExample, FeaturizeError> {
    let data = encode_example(e, v);
    let windows = windowize(&data, e.anchor_time, cfg.window_hours, cfg.max_windows)?;
    Ok(FeaturizedExample {
        patient_id: e.patient_id.clone(),
        anchor_admission_id: e.anchor_admission_id.clone(),
        label: e.label,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{parse_instant, Entity};
    use chrono::Duration;
    use proptest::prelude::*;

    fn anchor() -> Instant {
        parse_instant("2017-03-10T12:00:00Z").unwrap()
    }

    fn flat_rec(entity: Entity, field: &str, value: &str, t: Option<Instant>) -> EventRecord {
        EventRecord {
            patient_id: "p".into(),
            entity,
            timestamp: t,
            payload: BTreeMap::from([(field.to_string(), value.to_string())]),
            form_pairs: None,
            encounter_id: None,
        }
    }

    fn form_rec(pairs: &[(&str, &str)], t: Instant) -> EventRecord {
        EventRecord {
            patient_id: "p".into(),
            entity: Entity::Form,
            timestamp: Some(t),
            payload: BTreeMap::new(),
            form_pairs: Some(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()),
            encounter_id: None,
        }
    }

    fn example(history: Vec<EventRecord>) -> Example {
        Example {
            patient_id: "p".into(),
            anchor_admission_id: "a".into(),
            anchor_time: anchor(),
            history,
            label: 0,
        }
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            tokenize_text("patient arrived with injuries"),
            ["patient", "arrived", "with", "injuries"]
        );
        assert!(tokenize_text("").is_empty());
        assert_eq!(
            tokenize_text("Dolor torácico, fiebre 38.5"),
            ["dolor", "torácico", "fiebre", "38", "5"]
        );
        assert!(tokenize_text(" ,.;- ").is_empty());
    }

    #[test]
    fn paths() {
        let t = Some(anchor());
        assert_eq!(
            feature_path(&flat_rec(Entity::Order, "x", "y", t), "medication.categorical_text"),
            "order.medication.categorical_text"
        );
        assert_eq!(
            feature_path(&flat_rec(Entity::ClinicalNote, "x", "y", t), "content.text"),
            "clinical_note.content.text"
        );
        assert_eq!(feature_path(&flat_rec(Entity::Diagnosis, "x", "y", t), "Code"), "diagnosis.code");
        assert_eq!(feature_path(&flat_rec(Entity::Diagnosis, "x", "y", t), "a b\tc"), "diagnosis.a_b_c");
    }

    #[test]
    fn vocab_thresholds_and_ties() {
        let t = Some(anchor());
        let one = example(vec![flat_rec(Entity::Order, "m", "x", t)]);
        let v = Vocabulary::build(&[one], 1, 64).unwrap();
        assert_eq!(v.token_id("x"), 2);
        assert_eq!(v.n_tokens(), 3);

        let hist = vec![
            flat_rec(Entity::Order, "m", "beta alpha alpha beta gamma", t),
            flat_rec(Entity::Order, "m", "delta delta delta", t),
        ];
        let v = Vocabulary::build(&[example(hist)], 2, 64).unwrap();
        assert_eq!(v.token_id("delta"), 2);
        assert_eq!(v.token_id("alpha"), 3);
        assert_eq!(v.token_id("beta"), 4);
        assert_eq!(v.token_id("gamma"), OOV);

        let empty = example(vec![]);
        assert_eq!(Vocabulary::build(&[empty], 1, 64), Err(FeaturizeError::EmptyCorpus));
    }

    #[test]
    fn feature_cap_keeps_most_frequent() {
        let t = Some(anchor());
        let hist = vec![
            flat_rec(Entity::Order, "zeta", "a a a", t),
            flat_rec(Entity::Order, "alpha", "a", t),
            flat_rec(Entity::Diagnosis, "code", "b b", t),
        ];
        let v = Vocabulary::build(&[example(hist)], 1, 2).unwrap();
        assert_eq!(v.n_features(), 2);
        assert_eq!(v.feature(0), Some("diagnosis.code"));
        assert_eq!(v.feature(1), Some("order.zeta"));
        assert_eq!(v.feature_id("order.alpha"), None);
    }

    #[test]
    fn vocab_round_trip() {
        let t = Some(anchor());
        let hist = vec![
            flat_rec(Entity::Order, "m", "levetiracetam clonazepam", t),
            form_rec(&[("vital signs", "hr 80")], anchor()),
        ];
        let v = Vocabulary::build(&[example(hist)], 1, 64).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("RDMT-VOCAB 1\n"));
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocabulary::from_text("nope").is_err());
        assert!(Vocabulary::from_text("RDMT-VOCAB 1\nT\tx\t5\n").is_err());
    }

    #[test]
    fn encoding() {
        let t = anchor() - Duration::hours(3);
        let hist = vec![
            flat_rec(Entity::ClinicalNote, "content.text", "patient arrived", Some(t)),
            form_rec(&[("vital signs", "hr 80"), ("", "free")], t),
            flat_rec(Entity::Order, "medication", "levetiracetam", Some(t)),
        ];
        let ex = example(hist);
        let v = Vocabulary::build(std::slice::from_ref(&ex), 1, 64).unwrap();
        let data = encode_example(&ex, &v);
        let note = v.feature_id("clinical_note.content.text").unwrap();
        let notes: Vec<_> = data
            .iter()
            .filter(|d| matches!(d.datum, Datum::Flat { feature_id, .. } if feature_id == note))
            .collect();
        assert_eq!(notes.len(), 2);
        let forms: Vec<_> = data
            .iter()
            .filter_map(|d| match &d.datum {
                Datum::Form { key_ids, value_ids } => Some((key_ids.clone(), value_ids.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(forms.len(), 2);
        assert_eq!((forms[0].0.len(), forms[0].1.len()), (2, 2));
        assert_eq!(forms[1].0, vec![OOV]);
        assert!(v.token_id("levetiracetam") > OOV);
        assert_eq!(v.token_id("clonazepam"), OOV);
    }

    #[test]
    fn static_records_land_in_newest_window() {
        let hist = vec![
            flat_rec(Entity::Personal, "sex", "f", None),
            flat_rec(Entity::Order, "m", "x", Some(anchor() - Duration::days(3))),
        ];
        let ex = example(hist);
        let v = Vocabulary::build(std::slice::from_ref(&ex), 1, 64).unwrap();
        let fx = featurize_example(&ex, &v, &FeaturizeConfig::default()).unwrap();
        let w = &fx.windows.windows;
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].bucket_index, 0);
        assert!(w[1].flat.contains_key(&v.feature_id("personal.sex").unwrap()));
        assert_eq!(w[0].bucket_index, 6);
    }

    fn flat_at(t: Instant, tok: usize) -> EncodedDatum {
        EncodedDatum {
            timestamp: t,
            datum: Datum::Flat {
                feature_id: 0,
                token_id: tok,
            },
        }
    }

    #[test]
    fn bucket_boundaries() {
        let a = anchor();
        assert_eq!(bucket_of(a - Duration::hours(1), a, 12), Some(0));
        assert_eq!(bucket_of(a, a, 12), Some(0));
        assert_eq!(bucket_of(a - Duration::hours(12), a, 12), Some(1));
        assert_eq!(bucket_of(a - Duration::hours(12) + Duration::seconds(1), a, 12), Some(0));
        assert_eq!(bucket_of(a + Duration::seconds(1), a, 12), None);
    }

    #[test]
    fn windowize_truncates_and_rejects_future() {
        let a = anchor();
        let data: Vec<_> = (0..10).rev().map(|k| flat_at(a - Duration::hours(12 * k), 2)).collect();
        let seq = windowize(&data, a, 12, 4).unwrap();
        let idx: Vec<usize> = seq.windows.iter().map(|w| w.bucket_index).collect();
        assert_eq!(idx, [3, 2, 1, 0]);
        let future = [flat_at(a + Duration::hours(1), 2)];
        assert!(matches!(windowize(&future, a, 12, 4), Err(FeaturizeError::FutureEvent { .. })));
        assert!(windowize(&[], a, 12, 4).unwrap().windows.is_empty());
    }

    #[test]
    fn time_index_clamps() {
        assert_eq!(time_bucket_embedding_index(0, 512), 0);
        assert_eq!(time_bucket_embedding_index(511, 512), 511);
        assert_eq!(time_bucket_embedding_index(517, 512), 511);
    }

    /// Brute-force interval scan: the bucket is the unique j with
    /// anchor - 12(j+1)h < t <= anchor - 12j h.
    fn scan_bucket(t: Instant, a: Instant, hours: i64) -> usize {
        (0..)
            .find(|&j: &i64| a - Duration::hours(hours * (j + 1)) < t && t <= a - Duration::hours(hours * j))
            .unwrap() as usize
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn buckets_match_interval_scan(ages in proptest::collection::vec(0i64..(60 * 24 * 3600), 1000)) {
            let a = anchor();
            let mut data: Vec<_> = ages.iter().enumerate().map(|(i, s)| flat_at(a - Duration::seconds(*s), i)).collect();
            data.sort_by_key(|d| d.timestamp);
            let seq = windowize(&data, a, 12, usize::MAX).unwrap();
            let mut expected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in ages.iter().enumerate() {
                expected.entry(scan_bucket(a - Duration::seconds(*s), a, 12)).or_default().push(i);
            }
            let got: BTreeMap<usize, Vec<usize>> = seq.windows.iter().map(|w| (w.bucket_index, w.flat[&0].clone())).collect();
            for v in expected.values_mut() { v.sort_unstable(); }
            prop_assert_eq!(got, expected);
            prop_assert!(seq.windows.windows(2).all(|p| p[0].bucket_index > p[1].bucket_index));
        }

        #[test]
        fn tie_permutations_do_not_matter(toks in proptest::collection::vec((0i64..5, 2usize..50), 1..40), seed in any::<u64>()) {
            let a = anchor();
            let mut data: Vec<_> = toks.iter().map(|(h, t)| flat_at(a - Duration::hours(*h * 7), *t)).collect();
            data.sort_by_key(|d| d.timestamp);
            let mut shuffled = data.clone();
            // Rotate within groups of equal timestamps.
            let mut i = 0;
            while i < shuffled.len() {
                let mut j = i;
                while j < shuffled.len() && shuffled[j].timestamp == shuffled[i].timestamp { j += 1; }
                let len = j - i;
                shuffled[i..j].rotate_left((seed as usize) % len);
                i = j;
            }
            prop_assert_eq!(windowize(&data, a, 12, 256).unwrap(), windowize(&shuffled, a, 12, 256).unwrap());
        }
    }
}
