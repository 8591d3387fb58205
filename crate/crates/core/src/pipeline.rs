//! Workdir stages behind the CLI.
//!
//! Every stage writes its artifacts plus `stages/<name>.json`, a manifest
//! with the sha256 of each input and output, the configuration slice the
//! stage depends on, and its wall time. Before reading an upstream artifact
//! a stage re-hashes it and walks the producing manifests back to the raw
//! inputs, so an edited or outdated file is reported instead of silently
//! consumed.
//!
//! Layout under `paths.workdir`:
//!
//! ```text
//! config.resolved.toml
//! synth/{events,admissions,manifest}.jsonl
//! cohort/{train,validation,test}.jsonl  splits.tsv  summary.json  malformed.jsonl
//! vocab/vocab.txt
//! model/{lstm.ckpt,train_log.txt,train_set.tsv}
//! baseline/{baseline.bin,train_log.txt}
//! reports/<model>-<split>.{txt,jsonl}
//! predictions/<model>-<split>.jsonl
//! gradcheck/report.txt
//! stages/<stage>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant as Clock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{example_tokens, fit_tfidf, labeled, train_lr, BaselineError, TfidfModel};
use crate::cohort::{
    build_examples, oversample_positives, parse_examples, positive_rate, split_by_patient, write_examples,
    CohortError, Example, Split,
};
use crate::config::{ConfigError, RunConfig};
use crate::container::write_atomic;
use crate::featurize::{featurize_example, FeaturizeError, FeaturizedExample, Vocabulary};
use crate::metrics::{EvalReport, MetricsError};
use crate::records::{group_by_patient, parse_admissions, parse_records, write_admissions, write_records, RecordsError};
use crate::seqmodel::{predict, toy_gradcheck, train, Checkpoint, SeqModelError};
use crate::synth::{generate, verify_labels};

/// Seed of the end-to-end toy gradient check.
pub const TOY_GRADCHECK_SEED: u64 = 1;
/// Random instances per primitive in the gradient suite.
pub const GRADCHECK_INSTANCES: usize = 10;

const LOCK_FILE: &str = ".lock";
const CONFIG_ECHO: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact { path: String, producer: String },
    #[error("stale artifact {path}: expected sha256 {expected}, found {found}; rerun `{producer}`")]
    DigestMismatch {
        path: String,
        producer: String,
        expected: String,
        found: String,
    },
    #[error("stage `{stage}` ran with different settings ({field}); rerun it")]
    ConfigChanged { stage: String, field: String },
    #[error("workdir {0} is locked by another run (remove the lock file if that run died)")]
    Locked(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Records(#[from] RecordsError),
    #[error("{0}")]
    Cohort(#[from] CohortError),
    #[error("{0}")]
    Featurize(#[from] FeaturizeError),
    #[error("{0}")]
    Model(#[from] SeqModelError),
    #[error("{0}")]
    Baseline(#[from] BaselineError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingArtifact { .. } | Self::DigestMismatch { .. } | Self::ConfigChanged { .. } => 3,
            Self::Validation(_) => 4,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lstm,
    Baseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Baseline => "baseline",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "baseline" => Ok(Self::Baseline),
            _ => Err(format!("unknown model {s:?} (expected lstm or baseline)")),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Cohort,
    Vocab,
    Train,
    TrainBaseline,
    Eval { model: ModelKind, split: Split },
    Predict { model: ModelKind, split: Split },
    Gradcheck,
}

impl Stage {
    /// Manifest name under `stages/`.
    pub fn name(&self) -> String {
        match self {
            Self::Synth => "synth".into(),
            Self::Cohort => "cohort".into(),
            Self::Vocab => "vocab".into(),
            Self::Train => "train".into(),
            Self::TrainBaseline => "train-baseline".into(),
            Self::Eval { model, split } => format!("eval-{model}-{}", split.as_str()),
            Self::Predict { model, split } => format!("predict-{model}-{}", split.as_str()),
            Self::Gradcheck => "gradcheck".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: Value,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: StageManifest,
    /// Short human-readable summary (the report itself for `eval`).
    pub summary: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Stage that writes a workdir-relative path, by its top directory.
fn producer_of(rel: &str) -> Option<&'static str> {
    match rel.split('/').next()? {
        "synth" => Some("synth"),
        "cohort" => Some("cohort"),
        "vocab" => Some("vocab"),
        "model" => Some("train"),
        "baseline" => Some("train-baseline"),
        _ => None,
    }
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Bookkeeping for one stage run: every read is hashed and verified.
struct Run<'a> {
    p: &'a Pipeline,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    verified: BTreeSet<String>,
}

impl Run<'_> {
    /// Checks `rel` against its producer's manifest (recursively) and
    /// records its digest as an input.
    fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let digest = self.p.verify(rel, &mut self.verified)?;
        self.inputs.insert(rel.to_string(), digest);
        Ok(self.p.path(rel))
    }

    /// A file outside the workdir; recorded but not traced further.
    fn external(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path).map_err(|_| PipelineError::MissingArtifact {
            path: path.display().to_string(),
            producer: "an external producer".into(),
        })?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.write_untracked(rel, bytes)?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// For files carrying wall-clock times: written, but kept out of the
    /// manifest so output digests stay reproducible.
    fn write_untracked(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.p.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_atomic(&path, bytes).map_err(io_err(&path))
    }
}

pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
    verbose: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let root = cfg.paths.workdir.clone();
        Self { cfg, root, verbose: false }
    }

    /// Progress lines (epochs, counts) on stderr.
    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn read_manifest(&self, stage: &str) -> Option<StageManifest> {
        let text = fs::read_to_string(self.path(&format!("stages/{stage}.json"))).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Settings a stage's outputs depend on; compared on every downstream
    /// read.
    fn stage_config(&self, stage: &str) -> Value {
        let c = &self.cfg;
        match stage {
            "synth" => json!({ "synth": c.synth }),
            "cohort" => json!({
                "events": c.paths.events,
                "admissions": c.paths.admissions,
                "cohort": c.cohort,
                "split_seed": c.split_seed(),
                "split_ratios": c.split.ratios,
            }),
            "vocab" => json!({
                "min_token_count": c.featurize.min_token_count,
                "max_features": c.featurize.max_features,
            }),
            "train" => json!({ "seed": c.seed, "featurize": c.featurize, "model": c.model }),
            "train-baseline" => json!({ "seed": c.seed, "baseline": c.baseline }),
            "gradcheck" => json!({
                "instances": GRADCHECK_INSTANCES,
                "seed": c.seed,
                "toy_seed": TOY_GRADCHECK_SEED,
            }),
            s if s.starts_with("eval-") => json!({ "featurize": c.featurize, "eval": c.eval }),
            s if s.starts_with("predict-") => json!({ "featurize": c.featurize }),
            _ => Value::Null,
        }
    }

    /// Returns the current digest of `rel` after checking it (and, through
    /// the manifests, everything it was derived from) is up to date.
    fn verify(&self, rel: &str, seen: &mut BTreeSet<String>) -> Result<String> {
        let producer = producer_of(rel).ok_or_else(|| PipelineError::Other(format!("{rel} has no producing stage")))?;
        let path = self.path(rel);
        let missing = || PipelineError::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.to_string(),
        };
        if !path.is_file() {
            return Err(missing());
        }
        let manifest = self.read_manifest(producer).ok_or_else(missing)?;
        let found = sha256_file(&path).map_err(io_err(&path))?;
        let expected = manifest.outputs.get(rel).cloned().unwrap_or_default();
        if found != expected {
            return Err(PipelineError::DigestMismatch {
                path: path.display().to_string(),
                producer: producer.to_string(),
                expected,
                found,
            });
        }
        if !seen.insert(producer.to_string()) {
            return Ok(found);
        }
        if let Some(field) = first_difference(&manifest.config, &self.stage_config(producer), "") {
            return Err(PipelineError::ConfigChanged {
                stage: producer.to_string(),
                field,
            });
        }
        for (input, digest) in &manifest.inputs {
            if producer_of(input).is_some() && !Path::new(input).is_absolute() {
                self.verify(input, seen)?;
                let now = sha256_file(&self.path(input)).map_err(io_err(&self.path(input)))?;
                if &now != digest {
                    return Err(PipelineError::DigestMismatch {
                        path: self.path(input).display().to_string(),
                        producer: producer.to_string(),
                        expected: digest.clone(),
                        found: now,
                    });
                }
            } else {
                let p = Path::new(input);
                let now = sha256_file(p).map_err(|_| PipelineError::MissingArtifact {
                    path: input.clone(),
                    producer: producer.to_string(),
                })?;
                if &now != digest {
                    return Err(PipelineError::DigestMismatch {
                        path: input.clone(),
                        producer: producer.to_string(),
                        expected: digest.clone(),
                        found: now,
                    });
                }
            }
        }
        Ok(found)
    }

    fn lock(&self) -> Result<LockGuard> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.path(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(self.root.display().to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Runs one stage under the workdir lock and writes its manifest.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let _lock = self.lock()?;
        let echo = self.path(CONFIG_ECHO);
        write_atomic(&echo, self.cfg.to_toml().as_bytes()).map_err(io_err(&echo))?;

        let started = Clock::now();
        let mut run = Run {
            p: self,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            verified: BTreeSet::new(),
        };
        let summary = match stage {
            Stage::Synth => self.synth(&mut run)?,
            Stage::Cohort => self.cohort(&mut run)?,
            Stage::Vocab => self.vocab(&mut run)?,
            Stage::Train => self.train(&mut run)?,
            Stage::TrainBaseline => self.train_baseline(&mut run)?,
            Stage::Eval { model, split } => self.eval(&mut run, model, split)?,
            Stage::Predict { model, split } => self.predict(&mut run, model, split)?,
            Stage::Gradcheck => self.gradcheck(&mut run)?,
        };
        let name = stage.name();
        let manifest = StageManifest {
            config: self.stage_config(&name),
            stage: name.clone(),
            inputs: run.inputs,
            outputs: run.outputs,
            duration_seconds: started.elapsed().as_secs_f64(),
        };
        let path = self.path(&format!("stages/{name}.json"));
        fs::create_dir_all(self.path("stages")).map_err(io_err(&path))?;
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        Ok(StageOutcome { manifest, summary })
    }

    fn synth(&self, run: &mut Run<'_>) -> Result<String> {
        let out = generate(&self.cfg.synth).map_err(|r| ConfigError::Invalid {
            field: "synth".into(),
            reason: r,
        })?;
        let check = verify_labels(&out.events, &out.admissions, &out.manifest, &Default::default());
        if !check.discrepancies.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{} generated admissions disagree with the cohort rules (first: {:?})",
                check.discrepancies.len(),
                check.discrepancies[0]
            )));
        }
        let mut buf = Vec::new();
        write_records(&mut buf, &out.events).map_err(io_err(Path::new("synth/events.jsonl")))?;
        run.write("synth/events.jsonl", &buf)?;
        buf.clear();
        write_admissions(&mut buf, &out.admissions).map_err(io_err(Path::new("synth/admissions.jsonl")))?;
        run.write("synth/admissions.jsonl", &buf)?;
        buf.clear();
        out.write_manifest(&mut buf).map_err(io_err(Path::new("synth/manifest.jsonl")))?;
        run.write("synth/manifest.jsonl", &buf)?;
        Ok(format!(
            "synth: {} patients, {} events, {} admissions",
            self.cfg.synth.n_patients,
            out.events.len(),
            out.admissions.len()
        ))
    }

    fn cohort(&self, run: &mut Run<'_>) -> Result<String> {
        let source = |given: &Option<PathBuf>, synth_rel: &str, run: &mut Run<'_>| -> Result<PathBuf> {
            match given {
                Some(p) => {
                    run.external(p)?;
                    Ok(p.clone())
                }
                None => run.input(synth_rel),
            }
        };
        let events_path = source(&self.cfg.paths.events, "synth/events.jsonl", run)?;
        let adm_path = source(&self.cfg.paths.admissions, "synth/admissions.jsonl", run)?;
        let open = |p: &Path| File::open(p).map(BufReader::new).map_err(io_err(p));
        let events = parse_records(open(&events_path)?)?;
        let admissions = parse_admissions(open(&adm_path)?)?;

        let mut malformed = String::new();
        for (file, errors) in [("events", &events.errors), ("admissions", &admissions.errors)] {
            for e in errors {
                let line = json!({ "file": file, "line_no": e.line_no, "reason": e.reason });
                malformed.push_str(&format!("{line}\n"));
            }
        }
        let cohort_cfg = self.cfg.cohort_config();
        let mut examples: Vec<Example> = Vec::new();
        let mut rejected = 0usize;
        for h in group_by_patient(events.items, admissions.items) {
            let built = build_examples(&h, &cohort_cfg);
            for r in &built.rejected {
                let line = json!({ "file": "admissions", "patient_id": h.patient_id, "reason": r.to_string() });
                malformed.push_str(&format!("{line}\n"));
            }
            rejected += built.rejected.len();
            examples.extend(built.examples);
        }
        let assignment = split_by_patient(&examples, self.cfg.split_seed(), self.cfg.split.ratios)?;
        let mut summary_splits = serde_json::Map::new();
        let mut counts = Vec::new();
        for split in Split::ALL {
            let part: Vec<Example> = examples
                .iter()
                .filter(|e| assignment.get(&e.patient_id) == Some(split))
                .cloned()
                .collect();
            let mut buf = Vec::new();
            write_examples(&mut buf, &part).map_err(io_err(Path::new(split.as_str())))?;
            run.write(&format!("cohort/{}.jsonl", split.as_str()), &buf)?;
            let patients: BTreeSet<&str> = part.iter().map(|e| e.patient_id.as_str()).collect();
            summary_splits.insert(
                split.as_str().into(),
                json!({
                    "examples": part.len(),
                    "patients": patients.len(),
                    "positive_rate": positive_rate(&part),
                }),
            );
            counts.push(format!("{} {}", split.as_str(), part.len()));
        }
        run.write("cohort/splits.tsv", assignment.to_manifest().as_bytes())?;
        run.write("cohort/malformed.jsonl", malformed.as_bytes())?;
        let summary = json!({
            "examples": examples.len(),
            "positive_rate": positive_rate(&examples),
            "malformed_event_lines": events.errors.len(),
            "malformed_admission_lines": admissions.errors.len(),
            "rejected_admissions": rejected,
            "splits": summary_splits,
        });
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        run.write("cohort/summary.json", text.as_bytes())?;
        Ok(format!(
            "cohort: {} examples, positive rate {:.4}, {}",
            examples.len(),
            positive_rate(&examples),
            counts.join(", ")
        ))
    }

    fn load_examples(&self, run: &mut Run<'_>, split: Split) -> Result<Vec<Example>> {
        let rel = format!("cohort/{}.jsonl", split.as_str());
        let path = run.input(&rel)?;
        let parsed = parse_examples(BufReader::new(File::open(&path).map_err(io_err(&path))?))?;
        if let Some(e) = parsed.errors.first() {
            return Err(PipelineError::Other(format!("{}: {e}", path.display())));
        }
        Ok(parsed.items)
    }

    fn load_vocab(&self, run: &mut Run<'_>) -> Result<Vocabulary> {
        let path = run.input("vocab/vocab.txt")?;
        Ok(Vocabulary::from_text(&fs::read_to_string(&path).map_err(io_err(&path))?)?)
    }

    fn featurize(&self, examples: &[Example], vocab: &Vocabulary) -> Result<Vec<FeaturizedExample>> {
        let cfg = self.cfg.featurize_config();
        Ok(examples
            .iter()
            .map(|e| featurize_example(e, vocab, &cfg))
            .collect::<std::result::Result<_, _>>()?)
    }

    fn vocab(&self, run: &mut Run<'_>) -> Result<String> {
        let train = self.load_examples(run, Split::Train)?;
        let f = &self.cfg.featurize;
        let vocab = Vocabulary::build(&train, f.min_token_count, f.max_features)?;
        run.write("vocab/vocab.txt", vocab.to_text().as_bytes())?;
        Ok(format!(
            "vocab: {} tokens, {} features",
            vocab.n_tokens(),
            vocab.n_features()
        ))
    }

    fn train(&self, run: &mut Run<'_>) -> Result<String> {
        let original = self.load_examples(run, Split::Train)?;
        let val = self.load_examples(run, Split::Validation)?;
        let vocab = self.load_vocab(run)?;
        let train_set = match self.cfg.model.oversample.0 {
            Some(rate) => oversample_positives(&original, rate, self.cfg.oversample_seed())?,
            None => original,
        };
        let mut listing = String::from("patient_id\tanchor_admission_id\tlabel\n");
        for e in &train_set {
            listing.push_str(&format!("{}\t{}\t{}\n", e.patient_id, e.anchor_admission_id, e.label));
        }
        run.write("model/train_set.tsv", listing.as_bytes())?;
        self.say(format!(
            "train: {} examples (positive rate {:.4}), {} validation",
            train_set.len(),
            positive_rate(&train_set),
            val.len()
        ));
        let ftrain = self.featurize(&train_set, &vocab)?;
        let fval = self.featurize(&val, &vocab)?;
        let dims = self.cfg.model_dims(vocab.n_tokens(), vocab.n_features());
        let mut log = String::new();
        let outcome = train(&ftrain, &fval, &vocab, dims, &self.cfg.train_config(), &mut |entry| {
            let line = entry.to_line();
            self.say(&line);
            log.push_str(&line);
            log.push('\n');
        })?;
        let ckpt = &outcome.checkpoint;
        log.push_str(&format!("best_epoch {}\n", ckpt.best_epoch));
        run.write("model/lstm.ckpt", &ckpt.to_bytes())?;
        run.write_untracked("model/train_log.txt", log.as_bytes())?;
        Ok(format!(
            "train: kept epoch {} (validation auroc {})",
            ckpt.best_epoch,
            fmt_auroc(ckpt.best_val_auroc)
        ))
    }

    fn train_baseline(&self, run: &mut Run<'_>) -> Result<String> {
        let train = self.load_examples(run, Split::Train)?;
        let val = self.load_examples(run, Split::Validation)?;
        let vocab = self.load_vocab(run)?;
        let mut model = fit_tfidf(&train, &vocab, &self.cfg.baseline_config())?;
        let ltrain = labeled(&train, &model, &vocab);
        let lval = labeled(&val, &model, &vocab);
        let mut log = String::new();
        train_lr(&mut model, &ltrain, &lval, &mut |epoch, loss, auc| {
            let line = format!("epoch {epoch} train_loss {loss:.6} val_auroc {}", fmt_auroc(auc));
            self.say(&line);
            log.push_str(&line);
            log.push('\n');
        })?;
        log.push_str(&format!("best_epoch {}\n", model.best_epoch));
        run.write("baseline/baseline.bin", &model.to_bytes(&vocab))?;
        run.write("baseline/train_log.txt", log.as_bytes())?;
        Ok(format!(
            "train-baseline: {} terms, kept epoch {} (validation auroc {})",
            model.selected.len(),
            model.best_epoch,
            fmt_auroc(model.best_val_auroc)
        ))
    }

    /// Probabilities of `model` on `split`, in file order.
    fn score(&self, run: &mut Run<'_>, model: ModelKind, split: Split) -> Result<(Vec<Example>, Vec<f64>)> {
        let examples = self.load_examples(run, split)?;
        let vocab = self.load_vocab(run)?;
        let scores = match model {
            ModelKind::Lstm => {
                let path = run.input("model/lstm.ckpt")?;
                let ckpt = Checkpoint::load(&path)?;
                let feats = self.featurize(&examples, &vocab)?;
                predict(&ckpt, &vocab, &feats)?.into_iter().map(|p| p.probability).collect()
            }
            ModelKind::Baseline => {
                let path = run.input("baseline/baseline.bin")?;
                let m = TfidfModel::load(&path)?;
                m.check_vocab(&vocab)?;
                examples.iter().map(|e| m.predict_tokens(&example_tokens(e, &vocab))).collect()
            }
        };
        Ok((examples, scores))
    }

    fn eval(&self, run: &mut Run<'_>, model: ModelKind, split: Split) -> Result<String> {
        let (examples, scores) = self.score(run, model, split)?;
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        let report = EvalReport::evaluate(model.as_str(), split.as_str(), &scores, &labels, self.cfg.eval.threshold)?;
        let stem = format!("reports/{model}-{}", split.as_str());
        let text = report.to_text();
        run.write(&format!("{stem}.txt"), text.as_bytes())?;
        run.write(&format!("{stem}.jsonl"), format!("{}\n", report.to_json_line()).as_bytes())?;
        Ok(text)
    }

    fn predict(&self, run: &mut Run<'_>, model: ModelKind, split: Split) -> Result<String> {
        let (examples, scores) = self.score(run, model, split)?;
        let mut out = String::new();
        for (e, p) in examples.iter().zip(&scores) {
            let line = json!({
                "patient_id": e.patient_id,
                "anchor_admission_id": e.anchor_admission_id,
                "probability": p,
            });
            out.push_str(&format!("{line}\n"));
        }
        run.write(&format!("predictions/{model}-{}.jsonl", split.as_str()), out.as_bytes())?;
        Ok(format!("predict: {} probabilities for {model} on {}", scores.len(), split.as_str()))
    }

    fn gradcheck(&self, run: &mut Run<'_>) -> Result<String> {
        let entries = ndiff::suite::primitive_suite(GRADCHECK_INSTANCES, self.cfg.seed)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        let toy = toy_gradcheck(TOY_GRADCHECK_SEED)?;
        let mut text = String::new();
        let mut failed = Vec::new();
        for e in &entries {
            text.push_str(&format!("{} #{} {}\n", e.primitive, e.instance, e.report));
            if !e.report.passed {
                failed.push(format!("{} #{}", e.primitive, e.instance));
            }
        }
        text.push_str(&format!("model_toy {toy}\n"));
        if !toy.passed {
            failed.push("model_toy".into());
        }
        run.write("gradcheck/report.txt", text.as_bytes())?;
        if !failed.is_empty() {
            return Err(PipelineError::Validation(format!("gradient check failed for {}", failed.join(", "))));
        }
        Ok(format!("gradcheck: {} checks passed", entries.len() + 1))
    }
}

fn fmt_auroc(a: Option<f64>) -> String {
    a.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

/// Dotted path of the first differing leaf, if any.
fn first_difference(a: &Value, b: &Value, prefix: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            keys.into_iter().find_map(|k| {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => first_difference(u, v, &key),
                    _ => Some(key),
                }
            })
        }
        _ if a == b => None,
        _ => Some(if prefix.is_empty() { "config".into() } else { prefix.into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn producers_follow_directories() {
        assert_eq!(producer_of("cohort/train.jsonl"), Some("cohort"));
        assert_eq!(producer_of("model/lstm.ckpt"), Some("train"));
        assert_eq!(producer_of("baseline/baseline.bin"), Some("train-baseline"));
        assert_eq!(producer_of("reports/lstm-test.txt"), None);
    }

    #[test]
    fn first_difference_names_the_leaf() {
        let a = json!({ "model": { "d": 32, "a": 32 }, "seed": 1 });
        let b = json!({ "model": { "d": 16, "a": 32 }, "seed": 1 });
        assert_eq!(first_difference(&a, &b, ""), Some("model.d".into()));
        assert_eq!(first_difference(&a, &a, ""), None);
    }

    #[test]
    fn exit_codes() {
        let missing = PipelineError::MissingArtifact {
            path: "x".into(),
            producer: "cohort".into(),
        };
        assert_eq!(missing.exit_code(), 3);
        assert_eq!(PipelineError::Validation("g".into()).exit_code(), 4);
        let cfg = ConfigError::Invalid {
            field: "model.d".into(),
            reason: "r".into(),
        };
        assert_eq!(PipelineError::Config(cfg).exit_code(), 2);
        assert_eq!(PipelineError::Other("o".into()).exit_code(), 1);
    }
}
