//! Windowed LSTM readmission model: per-feature weighted pooling of token
//! embeddings, weighted pooling of form `[k; v]` pairs, a relative-time
//! embedding, an LSTM over windows and a logistic head.

use std::path::Path;
use std::time::Instant as Clock;

use ndiff::init::{uniform, xavier_uniform};
use ndiff::{lstm_cell, Adam, AdamConfig, Grads, LstmVars, NdiffError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};
use thiserror::Error;

use crate::container;
use crate::featurize::{time_bucket_embedding_index, FeaturizedExample, Vocabulary, Window, WindowSequence};
use crate::metrics::auroc;
use crate::mix_seed;

/// Guards the normalized weighted average when every weight vanishes.
pub const POOL_EPS: f64 = 1e-8;
const CKPT_MAGIC: &str = "RDMT-CKPT 1";

#[derive(Debug, Error)]
pub enum SeqModelError {
    #[error("pooling needs at least one input")]
    EmptyInput,
    #[error("checkpoint was trained with vocabulary {expected}, got {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Numeric(#[from] NdiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, SeqModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_tokens: usize,
    pub n_features: usize,
    /// Token embedding size.
    pub d: usize,
    /// Hidden size of the pooling networks.
    pub a: usize,
    /// Time embedding size.
    pub d_t: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    pub max_time_buckets: usize,
}

impl ModelDims {
    /// Length of one window vector: `F*d + 2d + d_t`.
    pub fn input_size(&self) -> usize {
        self.n_features * self.d + 2 * self.d + self.d_t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout_embedding: f64,
    pub dropout_hidden: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch: 32,
            lr: 1e-3,
            dropout_embedding: 0.1,
            dropout_hidden: 0.2,
            seed: 0,
        }
    }
}

/// Parameter ids of a one-hidden-layer scoring network `in -> a -> 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpIds {
    pub fn add<R: rand::Rng>(store: &mut ParamStore, prefix: &str, inp: usize, a: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), xavier_uniform(inp, a, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, a)),
            w2: store.add(format!("{prefix}.w2"), xavier_uniform(a, 1, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, 1)),
        }
    }

    fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: find(store, &format!("{prefix}.w1"))?,
            b1: find(store, &format!("{prefix}.b1"))?,
            w2: find(store, &format!("{prefix}.w2"))?,
            b2: find(store, &format!("{prefix}.b2"))?,
        })
    }

    pub fn vars(&self, tape: &mut Tape<'_>) -> MlpVars {
        MlpVars {
            w1: tape.param(self.w1),
            b1: tape.param(self.b1),
            w2: tape.param(self.w2),
            b2: tape.param(self.b2),
        }
    }
}

fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| SeqModelError::Format(format!("missing tensor {name}")))
}

/// Sigmoid weight per row: `σ(tanh(x W1 + b1) W2 + b2)`, shape `n x 1`.
pub fn mlp_weights(tape: &mut Tape<'_>, x: Var, net: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, net.w1)?;
    let h = tape.add_bias(h, net.b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, net.w2)?;
    let o = tape.add_bias(o, net.b2)?;
    Ok(tape.sigmoid(o))
}

/// `Σ w_i x_i / (Σ w_i + ε)` over the rows of `items`.
fn weighted_average(tape: &mut Tape<'_>, items: Var, weights: Var) -> Result<Var> {
    let wt = tape.transpose(weights);
    let num = tape.matmul(wt, items)?;
    let total = tape.sum(weights);
    let den = tape.add_scalar(total, POOL_EPS);
    Ok(tape.div(num, den)?)
}

/// Pools `n x d` token embeddings of one feature into a `1 x d` vector.
pub fn pool_feature(tape: &mut Tape<'_>, embs: Var, net: &MlpVars) -> Result<Var> {
    if tape.shape(embs)[0] == 0 {
        return Err(SeqModelError::EmptyInput);
    }
    let w = mlp_weights(tape, embs, net)?;
    weighted_average(tape, embs, w)
}

/// Mean of embedding rows, `1 x d`.
fn mean_rows(tape: &mut Tape<'_>, x: Var) -> Var {
    let n = tape.shape(x)[0] as f64;
    let s = tape.sum_rows(x);
    tape.div_scalar(s, n)
}

/// Pools form pairs into a `1 x 2d` vector. Each pair is `[mean(keys);
/// mean(values)]` over embeddings produced by `embed`.
pub fn pool_forms<F>(tape: &mut Tape<'_>, pairs: &[(Vec<usize>, Vec<usize>)], mut embed: F, net: &MlpVars) -> Result<Var>
where
    F: FnMut(&mut Tape<'_>, &[usize]) -> Result<Var>,
{
    if pairs.is_empty() || pairs.iter().any(|(k, v)| k.is_empty() || v.is_empty()) {
        return Err(SeqModelError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (keys, values) in pairs {
        let ke = embed(tape, keys)?;
        let ve = embed(tape, values)?;
        let k = mean_rows(tape, ke);
        let v = mean_rows(tape, ve);
        rows.push(tape.concat(&[k, v])?);
    }
    let items = tape.concat_rows(&rows)?;
    let w = mlp_weights(tape, items, net)?;
    weighted_average(tape, items, w)
}

/// Dropout state for a training pass.
pub struct Regularizer {
    pub rng: ChaCha8Rng,
    pub embedding: f64,
    pub hidden: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    token_emb: ParamId,
    features: Vec<MlpIds>,
    form: MlpIds,
    time_emb: ParamId,
    lstm: [ParamId; 3],
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, a, h) = (dims.d, dims.a, dims.hidden);
        let token_emb = s.add("token_emb", uniform(dims.n_tokens, d, 0.1, &mut rng));
        let features = (0..dims.n_features)
            .map(|f| MlpIds::add(&mut s, &format!("feature.{f}"), d, a, &mut rng))
            .collect();
        let form = MlpIds::add(&mut s, "form", 2 * d, a, &mut rng);
        let time_emb = s.add("time_emb", uniform(dims.max_time_buckets, dims.d_t, 0.1, &mut rng));
        let wx = s.add("lstm.wx", xavier_uniform(dims.input_size(), 4 * h, &mut rng));
        let wh = s.add("lstm.wh", xavier_uniform(h, 4 * h, &mut rng));
        // Forget-gate bias starts at 1 so early gradients flow across windows.
        let bias = Tensor::from_fn(1, 4 * h, |_, c| if c / h == ndiff::lstm::GATE_FORGET { 1.0 } else { 0.0 });
        let b = s.add("lstm.b", bias);
        let head_w = s.add("head.w", xavier_uniform(h, 1, &mut rng));
        let head_b = s.add("head.b", Tensor::zeros(1, 1));
        Self {
            dims,
            params: s,
            layout: Layout {
                token_emb,
                features,
                form,
                time_emb,
                lstm: [wx, wh, b],
                head_w,
                head_b,
            },
        }
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_params(dims: ModelDims, params: ParamStore) -> Result<Self> {
        let reference = Model::init(dims, 0);
        if reference.params.len() != params.len() {
            return Err(SeqModelError::Format(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in reference.params.iter() {
            let got = params.get(find(&params, name)?);
            if got.shape() != t.shape() {
                return Err(SeqModelError::Format(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let layout = Layout {
            token_emb: find(&params, "token_emb")?,
            features: (0..dims.n_features)
                .map(|f| MlpIds::find(&params, &format!("feature.{f}")))
                .collect::<Result<_>>()?,
            form: MlpIds::find(&params, "form")?,
            time_emb: find(&params, "time_emb")?,
            lstm: [find(&params, "lstm.wx")?, find(&params, "lstm.wh")?, find(&params, "lstm.b")?],
            head_w: find(&params, "head.w")?,
            head_b: find(&params, "head.b")?,
        };
        Ok(Self { dims, params, layout })
    }

    pub fn token_emb(&self) -> ParamId {
        self.layout.token_emb
    }

    pub fn feature_net(&self, f: usize) -> MlpIds {
        self.layout.features[f]
    }

    pub fn form_net(&self) -> MlpIds {
        self.layout.form
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.layout.head_w, self.layout.head_b)
    }

    pub fn lstm(&self) -> [ParamId; 3] {
        self.layout.lstm
    }

    pub fn time_emb(&self) -> ParamId {
        self.layout.time_emb
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[usize], reg: &mut Option<&mut Regularizer>) -> Result<Var> {
        let e = tape.embedding_lookup(self.layout.token_emb, ids)?;
        Ok(match reg {
            Some(r) => tape.dropout(e, r.embedding, &mut r.rng, true)?,
            None => e,
        })
    }

    /// `1 x (F*d + 2d + d_t)`: pooled feature blocks in feature-id order
    /// (zero when absent), pooled forms (zero when absent), time embedding.
    pub fn window_vector(&self, tape: &mut Tape<'_>, w: &Window, reg: &mut Option<&mut Regularizer>) -> Result<Var> {
        let d = self.dims.d;
        let mut blocks = Vec::with_capacity(self.dims.n_features + 2);
        for f in 0..self.dims.n_features {
            let block = match w.flat.get(&f) {
                Some(ids) if !ids.is_empty() => {
                    let e = self.embed(tape, ids, reg)?;
                    let net = self.layout.features[f].vars(tape);
                    pool_feature(tape, e, &net)?
                }
                _ => tape.zeros(1, d),
            };
            blocks.push(block);
        }
        let forms = if w.forms.is_empty() {
            tape.zeros(1, 2 * d)
        } else {
            let net = self.layout.form.vars(tape);
            pool_forms(tape, &w.forms, |t, ids| self.embed(t, ids, reg), &net)?
        };
        blocks.push(forms);
        let ti = time_bucket_embedding_index(w.bucket_index, self.dims.max_time_buckets);
        blocks.push(tape.embedding_lookup(self.layout.time_emb, &[ti])?);
        Ok(tape.concat(&blocks)?)
    }

    /// Probability of label 1 as a `1 x 1` tape variable. Dropout is active
    /// iff `reg` is given.
    pub fn forward(&self, tape: &mut Tape<'_>, seq: &WindowSequence, mut reg: Option<&mut Regularizer>) -> Result<Var> {
        let h_size = self.dims.hidden;
        let lstm = LstmVars {
            wx: tape.param(self.layout.lstm[0]),
            wh: tape.param(self.layout.lstm[1]),
            b: tape.param(self.layout.lstm[2]),
        };
        let mut h = tape.zeros(1, h_size);
        let mut c = tape.zeros(1, h_size);
        let empty = [Window::default()];
        let windows: &[Window] = if seq.windows.is_empty() { &empty } else { &seq.windows };
        for w in windows {
            let x = self.window_vector(tape, w, &mut reg)?;
            let (hn, cn) = lstm_cell(tape, x, h, c, &lstm)?;
            h = match reg.as_deref_mut() {
                Some(r) => tape.dropout(hn, r.hidden, &mut r.rng, true)?,
                None => hn,
            };
            c = cn;
        }
        let hw = tape.param(self.layout.head_w);
        let hb = tape.param(self.layout.head_b);
        let logit = tape.matmul(h, hw)?;
        let logit = tape.add_bias(logit, hb)?;
        Ok(tape.sigmoid(logit))
    }

    /// Deterministic inference-mode probability.
    pub fn probability(&self, seq: &WindowSequence) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let p = self.forward(&mut tape, seq, None)?;
        Ok(tape.value(p).item())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let auroc = self.val_auroc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
        format!(
            "epoch {} train_loss {:.6} val_auroc {} wall_seconds {:.2}",
            self.epoch, self.train_loss, auroc, self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub vocab_digest: String,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = Map::new();
        m.insert("dims".into(), json!(self.model.dims));
        m.insert("train".into(), json!(self.train));
        m.insert("vocab_digest".into(), json!(self.vocab_digest));
        m.insert("best_epoch".into(), json!(self.best_epoch));
        m.insert("best_val_auroc".into(), json!(self.best_val_auroc));
        container::encode(CKPT_MAGIC, m, &self.model.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, store) = container::decode(CKPT_MAGIC, bytes).map_err(SeqModelError::Format)?;
        let get = |k: &str| m.get(k).cloned().ok_or_else(|| SeqModelError::Format(format!("manifest lacks {k}")));
        let bad = |e: serde_json::Error| SeqModelError::Format(e.to_string());
        let dims: ModelDims = serde_json::from_value(get("dims")?).map_err(bad)?;
        Ok(Self {
            model: Model::from_params(dims, store)?,
            train: serde_json::from_value(get("train")?).map_err(bad)?,
            vocab_digest: serde_json::from_value(get("vocab_digest")?).map_err(bad)?,
            best_epoch: serde_json::from_value(get("best_epoch")?).map_err(bad)?,
            best_val_auroc: serde_json::from_value(get("best_val_auroc")?).map_err(bad)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(container::write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn val_auroc(model: &Model, val: &[FeaturizedExample]) -> Result<Option<f64>> {
    let scores = val
        .iter()
        .map(|e| model.probability(&e.windows))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = val.iter().map(|e| e.label).collect();
    Ok(auroc(&scores, &labels).ok())
}

/// Minibatch BCE + Adam. After each epoch the validation AUROC decides
/// which parameters are kept (earliest best wins; when validation holds a
/// single class the last epoch is kept). `on_epoch` sees each log entry.
pub fn train(
    train: &[FeaturizedExample],
    val: &[FeaturizedExample],
    vocab: &Vocabulary,
    dims: ModelDims,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(SeqModelError::EmptyTrainingSet);
    }
    let mut model = Model::init(dims, mix_seed(cfg.seed, 1));
    let mut adam = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut grads = Grads::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, Option<f64>, ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch.max(1);

    for epoch in 1..=cfg.epochs {
        let started = Clock::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 100 + epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &train[i];
                let mut reg = Regularizer {
                    rng: ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, epoch as u64), i as u64)),
                    embedding: cfg.dropout_embedding,
                    hidden: cfg.dropout_hidden,
                };
                let mut tape = Tape::new(&model.params);
                let p = model.forward(&mut tape, &ex.windows, Some(&mut reg))?;
                let loss = tape.bce(p, f64::from(ex.label))?;
                batch_loss += tape.value(loss).item();
                let scaled = tape.div_scalar(loss, chunk.len() as f64);
                tape.backward(scaled, &mut grads)?;
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(SeqModelError::Diverged { epoch, batch: b + 1 });
            }
            loss_sum += batch_loss;
            adam.step(&mut model.params, &grads)?;
        }
        let val_auroc = val_auroc(&model, val)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auroc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        let better = match (&best, val_auroc) {
            (None, _) => true,
            (Some((_, Some(prev), _)), Some(cur)) => cur > *prev,
            (Some((_, None, _)), _) => true,
            (Some((_, Some(_), _)), None) => false,
        };
        if better {
            best = Some((epoch, val_auroc, model.params.clone()));
        }
    }
    let (best_epoch, best_val_auroc, params) = match best {
        Some(b) => b,
        None => (0, None, model.params.clone()),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: Model::from_params(dims, params)?,
            train: *cfg,
            vocab_digest: vocab.fingerprint(),
            best_epoch,
            best_val_auroc,
        },
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub anchor_admission_id: String,
    pub label: u8,
    pub probability: f64,
}

/// Inference-mode probabilities in input order.
pub fn predict(ckpt: &Checkpoint, vocab: &Vocabulary, examples: &[FeaturizedExample]) -> Result<Vec<Prediction>> {
    let found = vocab.fingerprint();
    if found != ckpt.vocab_digest {
        return Err(SeqModelError::VocabMismatch {
            expected: ckpt.vocab_digest.clone(),
            found,
        });
    }
    examples
        .iter()
        .map(|e| {
            Ok(Prediction {
                patient_id: e.patient_id.clone(),
                anchor_admission_id: e.anchor_admission_id.clone(),
                label: e.label,
                probability: ckpt.model.probability(&e.windows)?,
            })
        })
        .collect()
}

/// Finite-difference check of BCE∘forward on a toy model with two
/// features and two windows (`d = 4`, `H = 8`), once in inference mode and
/// once with a fixed dropout mask. Returns the worse report.
pub fn toy_gradcheck(seed: u64) -> Result<ndiff::GradCheckReport> {
    toy_gradcheck_with(seed, ndiff::gradcheck::DEFAULT_STEP, ndiff::gradcheck::DEFAULT_TOL)
}

pub fn toy_gradcheck_with(seed: u64, step: f64, tol: f64) -> Result<ndiff::GradCheckReport> {
    let dims = ModelDims {
        n_tokens: 8,
        n_features: 2,
        d: 4,
        a: 3,
        d_t: 2,
        hidden: 8,
        max_time_buckets: 4,
    };
    // A unit-scale random point: the production init keeps inputs so small
    // that many gradients fall to ~1e-9, where central differences at
    // h = 1e-5 are dominated by rounding.
    let mut model = Model::init(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let [r, c] = model.params.get(id).shape();
        *model.params.get_mut(id) = uniform(r, c, 1.0, &mut rng);
    }
    let windows = vec![
        Window {
            bucket_index: 3,
            flat: [(0, vec![2, 3, 3]), (1, vec![4])].into_iter().collect(),
            forms: vec![(vec![5, 6], vec![7])],
        },
        Window {
            bucket_index: 0,
            flat: [(1, vec![2, 5])].into_iter().collect(),
            forms: vec![(vec![3], vec![4, 6]), (vec![7], vec![2])],
        },
    ];
    let seq = WindowSequence { windows };
    let mut worst: Option<ndiff::GradCheckReport> = None;
    for (label, dropout) in [(1.0, false), (0.0, true)] {
        let f = |tape: &mut Tape<'_>| -> std::result::Result<Var, NdiffError> {
            let mut reg = Regularizer {
                rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 7)),
                embedding: 0.1,
                hidden: 0.2,
            };
            let p = model
                .forward(tape, &seq, if dropout { Some(&mut reg) } else { None })
                .map_err(|e| match e {
                    SeqModelError::Numeric(n) => n,
                    other => NdiffError::InvalidArgument(other.to_string()),
                })?;
            tape.bce(p, label)
        };
        let report = ndiff::grad_check(
            &model.params,
            f,
            step,
            tol,
        )?;
        if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
            worst = Some(report);
        }
    }
    Ok(worst.expect("two checks ran"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndiff::sigmoid;
    use std::collections::BTreeMap;

    fn dims() -> ModelDims {
        ModelDims {
            n_tokens: 12,
            n_features: 2,
            d: 4,
            a: 3,
            d_t: 2,
            hidden: 5,
            max_time_buckets: 8,
        }
    }

    fn window(bucket: usize, flat: &[(usize, &[usize])], forms: &[(&[usize], &[usize])]) -> Window {
        Window {
            bucket_index: bucket,
            flat: flat.iter().map(|(f, t)| (*f, t.to_vec())).collect::<BTreeMap<_, _>>(),
            forms: forms.iter().map(|(k, v)| (k.to_vec(), v.to_vec())).collect(),
        }
    }

    fn row(t: &Tensor, r: usize) -> Vec<f64> {
        t.row_slice(r).to_vec()
    }

    /// Plain-f64 evaluation of the scoring network for one input row.
    fn net_weight(store: &ParamStore, net: &MlpIds, x: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = (store.get(net.w1), store.get(net.b1), store.get(net.w2), store.get(net.b2));
        let mut o = b2.item();
        for j in 0..w1.cols() {
            let mut z = b1.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                z += xi * w1.get(i, j);
            }
            o += z.tanh() * w2.get(j, 0);
        }
        sigmoid(o)
    }

    fn weighted(items: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().sum::<f64>() + POOL_EPS;
        (0..items[0].len())
            .map(|k| items.iter().zip(weights).map(|(x, w)| w * x[k]).sum::<f64>() / total)
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pooled_feature_matches_hand_evaluation() {
        let m = Model::init(dims(), 3);
        let table = m.params.get(m.token_emb());
        let net = m.feature_net(0);
        let mut tape = Tape::new(&m.params);
        let e = tape.embedding_lookup(m.token_emb(), &[3, 7]).unwrap();
        let nv = net.vars(&mut tape);
        let out = pool_feature(&mut tape, e, &nv).unwrap();
        let items = [row(table, 3), row(table, 7)];
        let ws: Vec<f64> = items.iter().map(|x| net_weight(&m.params, &net, x)).collect();
        assert!(close(tape.value(out).data(), &weighted(&items, &ws), 1e-12));

        let single = tape.embedding_lookup(m.token_emb(), &[5]).unwrap();
        let p = pool_feature(&mut tape, single, &nv).unwrap();
        assert!(close(tape.value(p).data(), &row(table, 5), 1e-7));

        let empty = tape.constant(Tensor::zeros(0, 4));
        assert!(matches!(pool_feature(&mut tape, empty, &nv), Err(SeqModelError::EmptyInput)));
    }

    #[test]
    fn pooled_forms_match_hand_evaluation() {
        let m = Model::init(dims(), 4);
        let table = m.params.get(m.token_emb());
        let pairs = vec![(vec![2, 3], vec![4]), (vec![5], vec![6, 7, 8]), (vec![9], vec![2])];
        let mut tape = Tape::new(&m.params);
        let nv = m.form_net().vars(&mut tape);
        let tok = m.token_emb();
        let out = pool_forms(&mut tape, &pairs, |t, ids| Ok(t.embedding_lookup(tok, ids)?), &nv).unwrap();
        let mean = |ids: &[usize]| -> Vec<f64> {
            (0..4).map(|k| ids.iter().map(|&i| table.get(i, k)).sum::<f64>() / ids.len() as f64).collect()
        };
        let items: Vec<Vec<f64>> = pairs.iter().map(|(k, v)| [mean(k), mean(v)].concat()).collect();
        let ws: Vec<f64> = items.iter().map(|x| net_weight(&m.params, &m.form_net(), x)).collect();
        assert!(close(tape.value(out).data(), &weighted(&items, &ws), 1e-12));
        let bad = vec![(vec![], vec![1])];
        assert!(pool_forms(&mut tape, &bad, |t, ids| Ok(t.embedding_lookup(tok, ids)?), &nv).is_err());
    }

    #[test]
    fn window_vector_layout() {
        let m = Model::init(dims(), 5);
        let w = window(3, &[(1, &[2, 3])], &[]);
        let mut tape = Tape::new(&m.params);
        let v = m.window_vector(&mut tape, &w, &mut None).unwrap();
        let data = tape.value(v).data().to_vec();
        assert_eq!(data.len(), dims().input_size());
        assert!(data[0..4].iter().all(|&x| x == 0.0), "absent feature is zero");
        assert!(data[8..16].iter().all(|&x| x == 0.0), "absent forms are zero");
        assert_eq!(&data[16..18], m.params.get(m.time_emb()).row_slice(3));

        // Same block computed on its own.
        let e = tape.embedding_lookup(m.token_emb(), &[2, 3]).unwrap();
        let nv = m.feature_net(1).vars(&mut tape);
        let p = pool_feature(&mut tape, e, &nv).unwrap();
        assert_eq!(&data[4..8], tape.value(p).data());

        let far = window(100, &[(0, &[4])], &[]);
        let v = m.window_vector(&mut tape, &far, &mut None).unwrap();
        assert_eq!(&tape.value(v).data()[16..18], m.params.get(m.time_emb()).row_slice(7));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = Model::init(dims(), 6);
        let (hw, _) = m.head();
        m.params.get_mut(hw).fill(0.0);
        let seq = WindowSequence {
            windows: vec![window(2, &[(0, &[2, 3])], &[(&[4], &[5])]), window(0, &[(1, &[6])], &[])],
        };
        assert_eq!(m.probability(&seq).unwrap(), 0.5);
        assert_eq!(m.probability(&WindowSequence::default()).unwrap(), 0.5);
    }

    #[test]
    fn single_window_matches_manual_step() {
        let m = Model::init(dims(), 7);
        let w = window(1, &[(0, &[2, 9])], &[(&[3], &[4, 5])]);
        let mut tape = Tape::new(&m.params);
        let xv = m.window_vector(&mut tape, &w, &mut None).unwrap();
        let x = tape.value(xv).data().to_vec();
        let [wx, wh, b] = m.lstm();
        let (wx, b) = (m.params.get(wx), m.params.get(b));
        let _ = wh; // zero initial state: the recurrent term vanishes
        let h = dims().hidden;
        let gate = |g: usize, j: usize| {
            let col = g * h + j;
            b.get(0, col) + x.iter().enumerate().map(|(i, xi)| xi * wx.get(i, col)).sum::<f64>()
        };
        let (hw, hb) = m.head();
        let mut logit = m.params.get(hb).item();
        for j in 0..h {
            let c = sigmoid(gate(0, j)) * gate(3, j).tanh();
            let hj = sigmoid(gate(2, j)) * c.tanh();
            logit += hj * m.params.get(hw).get(j, 0);
        }
        let p = m.probability(&WindowSequence { windows: vec![w] }).unwrap();
        assert!((p - sigmoid(logit)).abs() < 1e-12);
    }

    #[test]
    fn inference_is_deterministic_and_dropout_is_seeded() {
        let m = Model::init(dims(), 8);
        let seq = WindowSequence {
            windows: vec![window(4, &[(0, &[2, 3, 4])], &[]), window(1, &[(1, &[5])], &[(&[6], &[7])])],
        };
        assert_eq!(m.probability(&seq).unwrap(), m.probability(&seq).unwrap());
        let run = |seed: u64| {
            let mut reg = Regularizer {
                rng: ChaCha8Rng::seed_from_u64(seed),
                embedding: 0.5,
                hidden: 0.5,
            };
            let mut tape = Tape::new(&m.params);
            let p = m.forward(&mut tape, &seq, Some(&mut reg)).unwrap();
            tape.value(p).item()
        };
        assert_eq!(run(1), run(1));
    }

    #[test]
    fn toy_model_gradients() {
        let r = toy_gradcheck(1).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn toy_model_gradients_across_seeds() {
        // Sanity sweep over many points. Near-zero coordinates make the
        // relative error noisy at any step, so this one is looser.
        for seed in 0..40 {
            let r = toy_gradcheck_with(seed, 1e-4, 1e-3).unwrap();
            assert!(r.passed, "seed {seed}: {r}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(dims(), 9);
        let ckpt = Checkpoint {
            model: m,
            train: TrainConfig::default(),
            vocab_digest: "abc".into(),
            best_epoch: 2,
            best_val_auroc: Some(0.75),
        };
        let bytes = ckpt.to_bytes();
        assert!(bytes.starts_with(b"RDMT-CKPT 1\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..40]).is_err());
    }
}
