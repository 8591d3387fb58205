//! Bag-of-words TF-IDF + logistic regression comparison model.
//!
//! Documents are the same encoded token stream the sequence model sees,
//! flattened over time (OOV dropped). Token relevance is the TF-IDF value
//! averaged over training documents; the top `top_k` tokens form the input
//! space of a logistic regression trained with BCE + Adam.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::Path;

use ndiff::{Adam, AdamConfig, Grads, NdiffError, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};
use thiserror::Error;

use crate::cohort::Example;
use crate::container;
use crate::featurize::{encode_example, latest_per_patient, Datum, Vocabulary, OOV, PAD};
use crate::metrics::auroc;
use crate::mix_seed;

const BASE_MAGIC: &str = "RDMT-BASE 1";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no documents with tokens")]
    EmptyCorpus,
    #[error("training labels hold a single class")]
    SingleClass,
    #[error("model was fitted with vocabulary {expected}, got {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("baseline model file: {0}")]
    Format(String),
    #[error(transparent)]
    Numeric(#[from] NdiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, BaselineError>;

/// Which documents a token's TF-IDF is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// All N documents, zero where absent.
    #[default]
    AllDocuments,
    /// Only documents containing the token.
    ContainingDocuments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub top_k: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub averaging: Averaging,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            top_k: 5000,
            epochs: 8,
            batch: 32,
            lr: 0.01,
            averaging: Averaging::AllDocuments,
            seed: 0,
        }
    }
}

/// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
pub fn idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Average TF-IDF per token with `tf = count / |d|`.
pub fn tfidf_scores<T: Ord + Hash + Clone>(docs: &[Vec<T>], averaging: Averaging) -> Result<BTreeMap<T, f64>> {
    let n = docs.len();
    let mut tf_sum: BTreeMap<T, f64> = BTreeMap::new();
    let mut df: BTreeMap<T, usize> = BTreeMap::new();
    for doc in docs {
        if doc.is_empty() {
            continue;
        }
        let mut counts: HashMap<&T, usize> = HashMap::new();
        for t in doc {
            *counts.entry(t).or_default() += 1;
        }
        // Sorted so float sums do not depend on hash order.
        let mut counts: Vec<(&T, usize)> = counts.into_iter().collect();
        counts.sort();
        for (t, c) in counts {
            *tf_sum.entry(t.clone()).or_default() += c as f64 / doc.len() as f64;
            *df.entry(t.clone()).or_default() += 1;
        }
    }
    if tf_sum.is_empty() {
        return Err(BaselineError::EmptyCorpus);
    }
    Ok(tf_sum
        .into_iter()
        .map(|(t, s)| {
            let d = df[&t];
            let denom = match averaging {
                Averaging::AllDocuments => n,
                Averaging::ContainingDocuments => d,
            };
            let score = s * idf(n, d) / denom as f64;
            (t, score)
        })
        .collect())
}

/// Encoded token ids of an example's whole history, in time order.
pub fn example_tokens(e: &Example, vocab: &Vocabulary) -> Vec<usize> {
    let mut out = Vec::new();
    for d in encode_example(e, vocab) {
        match d.datum {
            Datum::Flat { token_id, .. } => out.push(token_id),
            Datum::Form { key_ids, value_ids } => out.extend(key_ids.into_iter().chain(value_ids)),
        }
    }
    out.retain(|&t| t != OOV && t != PAD);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    pub selected: Vec<usize>,
    pub idf: Vec<f64>,
    /// Logistic regression weights, one per selected token.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: BaselineConfig,
    pub vocab_digest: String,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    position: HashMap<usize, usize>,
}

impl TfidfModel {
    fn new(selected: Vec<usize>, idf: Vec<f64>, config: BaselineConfig, vocab_digest: String) -> Self {
        let position = selected.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let k = selected.len();
        Self {
            selected,
            idf,
            weights: vec![0.0; k],
            bias: 0.0,
            config,
            vocab_digest,
            best_epoch: 0,
            best_val_auroc: None,
            position,
        }
    }

    /// Component i is `tf(token_i) * idf(token_i)`; unselected tokens only
    /// count towards the document length.
    pub fn vectorize(&self, doc: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.selected.len()];
        if doc.is_empty() {
            return v;
        }
        for t in doc {
            if let Some(&i) = self.position.get(t) {
                v[i] += 1.0;
            }
        }
        let len = doc.len() as f64;
        for (x, idf) in v.iter_mut().zip(&self.idf) {
            *x = *x / len * idf;
        }
        v
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        let z: f64 = self.bias + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>();
        ndiff::sigmoid(z)
    }

    pub fn predict_tokens(&self, doc: &[usize]) -> f64 {
        self.probability(&self.vectorize(doc))
    }

    pub fn to_bytes(&self, vocab: &Vocabulary) -> Vec<u8> {
        let mut store = ParamStore::new();
        let k = self.selected.len();
        store.add("idf", Tensor::from_vec(1, k, self.idf.clone()).expect("idf length"));
        store.add("weights", Tensor::from_vec(k, 1, self.weights.clone()).expect("weight length"));
        store.add("bias", Tensor::scalar(self.bias));
        let tokens: Vec<&str> = self.selected.iter().map(|&t| vocab.token(t).unwrap_or("")).collect();
        let mut m = Map::new();
        m.insert("config".into(), json!(self.config));
        m.insert("vocab_digest".into(), json!(self.vocab_digest));
        m.insert("best_epoch".into(), json!(self.best_epoch));
        m.insert("best_val_auroc".into(), json!(self.best_val_auroc));
        m.insert("selected_ids".into(), json!(self.selected));
        m.insert("selected_tokens".into(), json!(tokens));
        container::encode(BASE_MAGIC, m, &store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, store) = container::decode(BASE_MAGIC, bytes).map_err(BaselineError::Format)?;
        fn field<T: serde::de::DeserializeOwned>(m: &Map<String, serde_json::Value>, k: &str) -> Result<T> {
            let v = m.get(k).cloned().ok_or_else(|| BaselineError::Format(format!("manifest lacks {k}")))?;
            serde_json::from_value(v).map_err(|e| BaselineError::Format(format!("{k}: {e}")))
        }
        let tensor = |name: &str| -> Result<&Tensor> {
            store
                .find(name)
                .map(|id| store.get(id))
                .ok_or_else(|| BaselineError::Format(format!("missing tensor {name}")))
        };
        let selected: Vec<usize> = field(&m, "selected_ids")?;
        let idf = tensor("idf")?.data().to_vec();
        let weights = tensor("weights")?.data().to_vec();
        if idf.len() != selected.len() || weights.len() != selected.len() {
            return Err(BaselineError::Format("tensor lengths disagree with token list".into()));
        }
        let mut model = Self::new(selected, idf, field(&m, "config")?, field(&m, "vocab_digest")?);
        model.weights = weights;
        model.bias = tensor("bias")?.item();
        model.best_epoch = field(&m, "best_epoch")?;
        model.best_val_auroc = field(&m, "best_val_auroc")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        Ok(container::write_atomic(path, &self.to_bytes(vocab))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.fingerprint();
        if found != self.vocab_digest {
            return Err(BaselineError::VocabMismatch {
                expected: self.vocab_digest.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Highest scores first; equal scores ordered by token string.
pub fn select_top_k(scores: &BTreeMap<usize, f64>, vocab: &Vocabulary, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().map(|(&t, &s)| (t, s)).collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| vocab.token(a.0).cmp(&vocab.token(b.0)))
    });
    ranked.into_iter().take(k).map(|(t, _)| t).collect()
}

/// Selects tokens from per-patient training timelines.
pub fn fit_tfidf(train: &[Example], vocab: &Vocabulary, cfg: &BaselineConfig) -> Result<TfidfModel> {
    let docs: Vec<Vec<usize>> = latest_per_patient(train)
        .into_iter()
        .map(|e| example_tokens(e, vocab))
        .collect();
    let scores = tfidf_scores(&docs, cfg.averaging)?;
    let selected = select_top_k(&scores, vocab, cfg.top_k);
    let mut df: HashMap<usize, usize> = HashMap::new();
    for doc in &docs {
        let mut seen: Vec<usize> = doc.clone();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let idf_values = selected.iter().map(|t| idf(docs.len(), df[t])).collect();
    Ok(TfidfModel::new(selected, idf_values, *cfg, vocab.fingerprint()))
}

pub struct Labeled {
    pub x: Vec<f64>,
    pub y: u8,
}

/// Logistic regression from zero weights; same epoch-selection rule as the
/// sequence model. Returns per-epoch (mean train loss, validation AUROC).
pub fn train_lr(
    model: &mut TfidfModel,
    train: &[Labeled],
    val: &[Labeled],
    on_epoch: &mut dyn FnMut(usize, f64, Option<f64>),
) -> Result<Vec<(f64, Option<f64>)>> {
    let positives = train.iter().filter(|e| e.y == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(BaselineError::SingleClass);
    }
    let cfg = model.config;
    let k = model.selected.len();
    let mut store = ParamStore::new();
    let w = store.add("weights", Tensor::zeros(k, 1));
    let b = store.add("bias", Tensor::zeros(1, 1));
    let mut adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut grads = Grads::zeros_like(&store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, Option<f64>, Vec<f64>, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 200 + epoch as u64)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            grads.zero();
            for &i in chunk {
                let mut tape = Tape::new(&store);
                let x = tape.constant(Tensor::from_vec(1, k, train[i].x.clone())?);
                let wv = tape.param(w);
                let bv = tape.param(b);
                let z = tape.matmul(x, wv)?;
                let z = tape.add_bias(z, bv)?;
                let p = tape.sigmoid(z);
                let loss = tape.bce(p, f64::from(train[i].y))?;
                loss_sum += tape.value(loss).item();
                let scaled = tape.div_scalar(loss, chunk.len() as f64);
                tape.backward(scaled, &mut grads)?;
            }
            adam.step(&mut store, &grads)?;
        }
        model.weights = store.get(w).data().to_vec();
        model.bias = store.get(b).item();
        let scores: Vec<f64> = val.iter().map(|e| model.probability(&e.x)).collect();
        let labels: Vec<u8> = val.iter().map(|e| e.y).collect();
        let val_auroc = auroc(&scores, &labels).ok();
        let mean_loss = loss_sum / train.len() as f64;
        on_epoch(epoch, mean_loss, val_auroc);
        history.push((mean_loss, val_auroc));
        let better = match (&best, val_auroc) {
            (None, _) => true,
            (Some((_, Some(prev), _, _)), Some(cur)) => cur > *prev,
            (Some((_, None, _, _)), _) => true,
            (Some((_, Some(_), _, _)), None) => false,
        };
        if better {
            best = Some((epoch, val_auroc, model.weights.clone(), model.bias));
        }
    }
    if let Some((epoch, auc, weights, bias)) = best {
        model.best_epoch = epoch;
        model.best_val_auroc = auc;
        model.weights = weights;
        model.bias = bias;
    }
    Ok(history)
}

pub fn labeled(examples: &[Example], model: &TfidfModel, vocab: &Vocabulary) -> Vec<Labeled> {
    examples
        .iter()
        .map(|e| Labeled {
            x: model.vectorize(&example_tokens(e, vocab)),
            y: e.label,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{parse_instant, EventRecord};
    use crate::records::Entity;
    use proptest::prelude::*;

    #[test]
    fn formula_examples() {
        let docs = vec![vec!["a"], vec!["a"]];
        let s = tfidf_scores(&docs, Averaging::AllDocuments).unwrap();
        assert_eq!(s["a"], 1.0);

        let docs = vec![vec!["x", "y"], vec!["y"]];
        let s = tfidf_scores(&docs, Averaging::AllDocuments).unwrap();
        // 0.5 * (ln 1.5 + 1) / 2
        assert!((s["x"] - 0.351_366_277_027_041_1).abs() < 1e-15);
        assert!(!s.contains_key("z"));
        let c = tfidf_scores(&docs, Averaging::ContainingDocuments).unwrap();
        assert!((c["x"] - 2.0 * s["x"]).abs() < 1e-15);

        assert!(matches!(tfidf_scores::<&str>(&[vec![]], Averaging::AllDocuments), Err(BaselineError::EmptyCorpus)));
    }

    fn vocab_with(tokens: &[&str]) -> Vocabulary {
        let t = parse_instant("2018-01-01T00:00:00Z").unwrap();
        let history = vec![EventRecord {
            patient_id: "p".into(),
            entity: Entity::Order,
            timestamp: Some(t),
            payload: BTreeMap::from([("m".to_string(), tokens.join(" "))]),
            form_pairs: None,
            encounter_id: None,
        }];
        let e = Example {
            patient_id: "p".into(),
            anchor_admission_id: "a".into(),
            anchor_time: t,
            history,
            label: 0,
        };
        Vocabulary::build(&[e], 1, 8).unwrap()
    }

    #[test]
    fn selection_breaks_ties_by_string() {
        let v = vocab_with(&["pear", "apple", "fig"]);
        let ids = |s: &str| v.token_id(s);
        let scores = BTreeMap::from([(ids("pear"), 0.5), (ids("apple"), 0.5), (ids("fig"), 0.9)]);
        let top = select_top_k(&scores, &v, 2);
        assert_eq!(top, vec![ids("fig"), ids("apple")]);
    }

    fn toy_model(selected: Vec<usize>, idf: Vec<f64>) -> TfidfModel {
        TfidfModel::new(selected, idf, BaselineConfig::default(), "digest".into())
    }

    #[test]
    fn vectorize_cases() {
        let m = toy_model(vec![5, 7], vec![1.5, 2.0]);
        assert_eq!(m.vectorize(&[]), vec![0.0, 0.0]);
        assert_eq!(m.vectorize(&[7]), vec![0.0, 2.0]);
        assert_eq!(m.vectorize(&[5, 9, 5, 7]), vec![0.75, 0.5]);
        assert_eq!(m.probability(&[1.0, 1.0]), 0.5);
    }

    /// Brute-force per-token evaluation for random documents.
    fn brute(doc: &[usize], selected: &[usize], idf: &[f64]) -> Vec<f64> {
        selected
            .iter()
            .zip(idf)
            .map(|(t, i)| {
                let c = doc.iter().filter(|x| *x == t).count();
                if doc.is_empty() { 0.0 } else { c as f64 / doc.len() as f64 * i }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn vectorize_matches_brute_force(doc in proptest::collection::vec(2usize..30, 0..60), seed in any::<u64>()) {
            let selected: Vec<usize> = (2..30).filter(|t| (seed >> (t % 64)) & 1 == 1).collect();
            let idf: Vec<f64> = selected.iter().map(|t| 1.0 + *t as f64 / 10.0).collect();
            let m = toy_model(selected.clone(), idf.clone());
            let v = m.vectorize(&doc);
            let b = brute(&doc, &selected, &idf);
            for (x, y) in v.iter().zip(&b) { prop_assert!((x - y).abs() < 1e-12); }
            let mut rev = doc.clone();
            rev.reverse();
            prop_assert_eq!(m.vectorize(&rev), v);
        }
    }

    #[test]
    fn separable_set_is_learned() {
        let mut m = toy_model(vec![2, 3], vec![1.0, 1.0]);
        m.config.epochs = 30;
        m.config.lr = 0.1;
        m.config.batch = 4;
        let mk = |x: [f64; 2], y: u8| Labeled { x: x.to_vec(), y };
        let train: Vec<Labeled> = (0..20)
            .map(|i| if i % 2 == 0 { mk([1.0, 0.0], 1) } else { mk([0.0, 1.0], 0) })
            .collect();
        let val: Vec<Labeled> = vec![mk([1.0, 0.0], 1), mk([0.0, 1.0], 0)];
        train_lr(&mut m, &train, &val, &mut |_, _, _| {}).unwrap();
        let acc = train.iter().filter(|e| (m.probability(&e.x) >= 0.5) == (e.y == 1)).count();
        assert_eq!(acc, train.len());
        assert!(m.weights[0] > 0.0 && m.weights[1] < 0.0);

        let single: Vec<Labeled> = vec![mk([1.0, 0.0], 1)];
        assert!(matches!(train_lr(&mut m, &single, &val, &mut |_, _, _| {}), Err(BaselineError::SingleClass)));
    }

    #[test]
    fn model_file_round_trip() {
        let v = vocab_with(&["pear", "apple", "fig"]);
        let mut m = toy_model(vec![v.token_id("fig"), v.token_id("pear")], vec![1.25, 3.0]);
        m.weights = vec![0.5, -2.0];
        m.bias = 0.125;
        m.best_epoch = 3;
        let bytes = m.to_bytes(&v);
        assert!(bytes.starts_with(b"RDMT-BASE 1\n"));
        assert_eq!(TfidfModel::from_bytes(&bytes).unwrap(), m);
    }
}
