//! Domain vocabulary shared by all modules: contexts, actions, sentences,
//! logged records, and datasets.
//!
//! All types are immutable value objects after construction and safe to share
//! across concurrent experiment workers. Validation never panics: violations
//! are data, reported by [`validate_dataset`].

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1};

use crate::nn::MlpGrads;
use crate::rng::ChaCha8Rng;

/// A user/query pair; the conditioning information a policy sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    /// User feature vector (`d_u` dims).
    pub user: Vec<f64>,
    /// Query feature vector (`d_q` dims).
    pub query: Vec<f64>,
}

impl Context {
    pub fn new(user: Vec<f64>, query: Vec<f64>) -> Self {
        Self { user, query }
    }

    /// Concatenated `user ++ query` features, the input layout every
    /// function approximator in this crate uses.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.user.len() + self.query.len());
        f.extend_from_slice(&self.user);
        f.extend_from_slice(&self.query);
        f
    }
}

/// The finite candidate action set. The row index is the canonical action
/// identifier; row `a` holds the embedding `e_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    /// `|A| x d_e` embedding matrix.
    pub embeddings: Array2<f64>,
}

impl ActionSet {
    pub fn new(embeddings: Array2<f64>) -> Self {
        Self { embeddings }
    }

    /// Number of actions `|A|`.
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    /// Embedding dimension `d_e`.
    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Embedding of action `a`.
    pub fn embedding(&self, a: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(a)
    }
}

/// An auxiliary output: the sentence embedding produced by the generator,
/// optionally carrying a noise-perturbed copy used only for kernel distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub embedding: Vec<f64>,
    pub noisy_embedding: Option<Vec<f64>>,
}

impl Sentence {
    pub fn new(embedding: Vec<f64>) -> Self {
        Self { embedding, noisy_embedding: None }
    }

    pub fn with_noisy(embedding: Vec<f64>, noisy: Vec<f64>) -> Self {
        Self { embedding, noisy_embedding: Some(noisy) }
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

/// One logged interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRecord {
    pub context: Context,
    /// Index into the dataset's action set.
    pub action: usize,
    /// Logging-policy probability of the logged action, in `(0, 1]` when
    /// present. Required by IS-family estimators, optional in storage.
    pub propensity: Option<f64>,
    pub sentence: Sentence,
    pub reward: f64,
    /// Ground-truth `E[r | x, a]` when the collector knows it.
    pub expected_reward: Option<f64>,
    /// Extra sentence draws from the logging policy at this context, used
    /// only for fitting the marginal density model. The function-
    /// approximation loss needs two independent draws per context; the
    /// single logged sentence cannot form the pair on its own.
    pub density_support_sentences: Option<Vec<Sentence>>,
    pub user_id: Option<u64>,
    pub item_id: Option<u64>,
    /// Unknown keys preserved by lenient JSONL reads.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl LoggedRecord {
    pub fn new(context: Context, action: usize, propensity: f64, sentence: Sentence, reward: f64) -> Self {
        Self {
            context,
            action,
            propensity: Some(propensity),
            sentence,
            reward,
            expected_reward: None,
            density_support_sentences: None,
            user_id: None,
            item_id: None,
            extra: BTreeMap::new(),
        }
    }
}

/// Whether logged rewards are real-valued or {0, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardType {
    Continuous,
    Binary,
}

impl fmt::Display for RewardType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardType::Continuous => write!(f, "continuous"),
            RewardType::Binary => write!(f, "binary"),
        }
    }
}

/// Feature dimensions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_u: usize,
    pub d_q: usize,
    pub d_e: usize,
    pub d_s: usize,
}

/// Dataset-level metadata stored alongside the records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub size: usize,
    pub reward_type: RewardType,
    pub reward_std: f64,
    pub action_set: ActionSet,
    /// Optional human-readable action names; the embeddings are
    /// authoritative, the names informational.
    pub action_list: Option<Vec<String>>,
    pub dims: Dims,
    pub seed: u64,
}

/// A sized collection of logged interactions plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    pub records: Vec<LoggedRecord>,
    pub meta: DatasetMeta,
}

impl LoggedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All invariant violations; empty means the dataset is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate_dataset(self)
    }
}

/// A single invariant violation, tied to a record index and field name
/// (`record: None` for dataset-level problems).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record: Option<usize>,
    pub field: String,
    pub message: String,
}

impl Violation {
    fn dataset(field: &str, message: impl Into<String>) -> Self {
        Self { record: None, field: field.to_string(), message: message.into() }
    }

    fn record(idx: usize, field: &str, message: impl Into<String>) -> Self {
        Self { record: Some(idx), field: field.to_string(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(i) => write!(f, "record {i}, field {}: {}", self.field, self.message),
            None => write!(f, "dataset field {}: {}", self.field, self.message),
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Checks every record and the metadata against the dataset invariants.
/// Side-effect free and idempotent; returns one entry per violation.
pub fn validate_dataset(dataset: &LoggedDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let meta = &dataset.meta;
    let dims = meta.dims;

    if meta.size != dataset.records.len() {
        out.push(Violation::dataset(
            "size",
            format!("metadata.size = {} but {} records present", meta.size, dataset.records.len()),
        ));
    }
    if meta.action_set.is_empty() {
        out.push(Violation::dataset("action_set", "action set is empty"));
    }
    if meta.action_set.dim() != dims.d_e {
        out.push(Violation::dataset(
            "action_set",
            format!("embedding dim {} != d_e {}", meta.action_set.dim(), dims.d_e),
        ));
    }
    if !meta.action_set.embeddings.iter().all(|x| x.is_finite()) {
        out.push(Violation::dataset("action_set", "non-finite embedding entry"));
    }
    if !(meta.reward_std >= 0.0) {
        out.push(Violation::dataset("reward_std", format!("must be >= 0, got {}", meta.reward_std)));
    }
    if let Some(names) = &meta.action_list {
        if names.len() != meta.action_set.len() {
            out.push(Violation::dataset(
                "action_list",
                format!("{} names for {} actions", names.len(), meta.action_set.len()),
            ));
        }
    }

    let check_sentence = |out: &mut Vec<Violation>, idx: usize, field: &str, s: &Sentence| {
        if s.dim() != dims.d_s {
            out.push(Violation::record(idx, field, format!("sentence dim {} != d_s {}", s.dim(), dims.d_s)));
        }
        if !all_finite(&s.embedding) {
            out.push(Violation::record(idx, field, "non-finite sentence entry"));
        }
        if let Some(noisy) = &s.noisy_embedding {
            if noisy.len() != s.embedding.len() {
                out.push(Violation::record(
                    idx,
                    field,
                    format!("noisy embedding dim {} != embedding dim {}", noisy.len(), s.embedding.len()),
                ));
            }
            if !all_finite(noisy) {
                out.push(Violation::record(idx, field, "non-finite noisy embedding entry"));
            }
        }
    };

    for (i, r) in dataset.records.iter().enumerate() {
        if r.context.user.len() != dims.d_u {
            out.push(Violation::record(i, "context", format!("user dim {} != d_u {}", r.context.user.len(), dims.d_u)));
        }
        if r.context.query.len() != dims.d_q {
            out.push(Violation::record(i, "query", format!("query dim {} != d_q {}", r.context.query.len(), dims.d_q)));
        }
        if !all_finite(&r.context.user) || !all_finite(&r.context.query) {
            out.push(Violation::record(i, "context", "non-finite context entry"));
        }
        if r.action >= meta.action_set.len() {
            out.push(Violation::record(
                i,
                "action",
                format!("action index {} out of range for |A| = {}", r.action, meta.action_set.len()),
            ));
        }
        if let Some(p) = r.propensity {
            if !(p > 0.0 && p <= 1.0) {
                out.push(Violation::record(i, "propensity", format!("must lie in (0, 1], got {p}")));
            }
        }
        check_sentence(&mut out, i, "sentence", &r.sentence);
        if !r.reward.is_finite() {
            out.push(Violation::record(i, "reward", format!("non-finite reward {}", r.reward)));
        }
        if let Some(er) = r.expected_reward {
            if !er.is_finite() {
                out.push(Violation::record(i, "expected_reward", format!("non-finite value {er}")));
            }
        }
        if let Some(support) = &r.density_support_sentences {
            for s in support {
                check_sentence(&mut out, i, "density_support_sentences", s);
            }
        }
    }
    out
}

/// A policy-gradient estimate: per-parameter values matching the policy's
/// parameter shape, plus how many logged or sampled interactions went in.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub values: MlpGrads,
    pub sample_count: usize,
}

impl GradientEstimate {
    /// Euclidean norm over all parameter entries.
    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }
}

/// Anything that can turn a (query, action embedding) pair into a sentence.
///
/// The synthetic environment implements this; a real deployment would call
/// out to its generation service. Estimators that augment data at training
/// time (DSO) and the Monte-Carlo density estimator sample through it.
pub trait SentenceGenerator {
    fn generate(&self, query: &[f64], action_embedding: &[f64], rng: &mut ChaCha8Rng) -> Sentence;

    /// Sentence embedding dimension this generator produces.
    fn sentence_dim(&self) -> usize;
}
