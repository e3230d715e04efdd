//! Per-sentence orchestration: demo retrieval, one extraction prompt per
//! entity type, optional yes/no verification of each extracted span, and
//! merging of the per-type results.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusMode, EntitySpan, EntityType, LabeledCorpus, Schema, Sentence, SentenceId};
use crate::embedstore::{random_demos, Datastore, StoreError};
use crate::llmgate::{Backend, CacheStats, CompletionRequest, LlmError};
use crate::markup::{self, outermost_only, OutputFormat, ParseIssue};
use crate::promptkit::{
    self, parse_yes_no, render_extraction_prompt, render_verification_prompt, DemoOrder, ExtractionDemo,
    PromptError, PromptSpec, TokenBudget, TypeWording, VerificationDemo, VerificationSpec,
    DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TOKENS_PER_WORD, DEFAULT_WINDOW_TOKENS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("retrieval `{retrieval}` needs the {store} store")]
    MissingStore { retrieval: &'static str, store: &'static str },
    #[error("no {level} vector for sentence {sentence_id}{}", token.map(|t| format!(" token {t}")).unwrap_or_default())]
    MissingVector {
        level: &'static str,
        sentence_id: SentenceId,
        token: Option<usize>,
    },
    #[error("demo sentence {0} is not in the training corpus")]
    UnknownDemo(SentenceId),
    #[error("entity type `{0}` is not in the schema")]
    UnknownType(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("backend failed on sentence {sentence_id} type {ty}: {source}")]
    Backend {
        sentence_id: SentenceId,
        ty: String,
        source: LlmError,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Dump { line: usize, message: String },
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

named_enum!(
    /// How few-shot demonstrations are chosen.
    Retrieval { Random => "random", Sentence => "sentence", Entity => "entity" }
);
named_enum!(
    Verification { Off => "off", ZeroShot => "zero-shot", FewShot => "few-shot" }
);
named_enum!(
    /// Which test-sentence tokens query the token store.
    QueryMode { AllTokens => "all-tokens", PredictedEntities => "predicted-entities" }
);
named_enum!(
    Provenance { Raw => "raw", Verified => "verified" }
);

/// Everything that determines the predictions of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub retrieval: Retrieval,
    /// Demonstrations per extraction prompt.
    pub k: usize,
    /// Nearest tokens pooled per query token; `None` uses `k`.
    pub fanout: Option<usize>,
    pub format: OutputFormat,
    pub verification: Verification,
    /// Demonstrations per few-shot verification prompt.
    pub verification_k: usize,
    pub seed: u64,
    pub window_tokens: usize,
    pub max_output_tokens: usize,
    pub tokens_per_word: f64,
    pub query_mode: QueryMode,
    pub demo_order: DemoOrder,
    pub wording: TypeWording,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            retrieval: Retrieval::Entity,
            k: 8,
            fanout: None,
            format: OutputFormat::AtMarker,
            verification: Verification::Off,
            verification_k: 8,
            seed: 0,
            window_tokens: DEFAULT_WINDOW_TOKENS,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            tokens_per_word: DEFAULT_TOKENS_PER_WORD,
            query_mode: QueryMode::PredictedEntities,
            demo_order: DemoOrder::NearestLast,
            wording: TypeWording::Description,
            workers: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_owned()));
        if self.verification == Verification::FewShot && self.verification_k == 0 {
            return bad("verification_k must be at least 1 for few-shot verification");
        }
        if self.fanout == Some(0) {
            return bad("fanout must be at least 1");
        }
        if !(self.tokens_per_word.is_finite() && self.tokens_per_word > 0.0) {
            return bad("tokens_per_word must be positive");
        }
        if self.max_output_tokens >= self.window_tokens {
            return bad("max_output_tokens must be smaller than window_tokens");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Ok(())
    }

    pub fn budget(&self) -> TokenBudget {
        TokenBudget {
            window: self.window_tokens,
            reserved_output: self.max_output_tokens,
            tokens_per_word: self.tokens_per_word,
        }
    }

    pub fn prompt_limit(&self) -> usize {
        self.budget().prompt_limit()
    }

    pub fn effective_fanout(&self) -> usize {
        self.fanout.unwrap_or(self.k).max(1)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Applies a `key=value` override, parsing the value as TOML-ish JSON
    /// scalars (numbers and bare strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let mut map = match serde_json::to_value(&*self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        if !map.contains_key(key) {
            return Err(PipelineError::Config(format!("unknown config key `{key}`")));
        }
        let parsed = serde_json::from_str::<serde_json::Value>(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_owned()));
        map.insert(key.to_owned(), parsed);
        let updated: RunConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| PipelineError::Config(format!("{key}={value}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Embedding stores: training stores are searched, test stores supply
/// query vectors.
#[derive(Debug, Default)]
pub struct Stores {
    pub train_sentence: Option<Datastore>,
    pub test_sentence: Option<Datastore>,
    pub train_token: Option<Datastore>,
    pub test_token: Option<Datastore>,
    /// Entities predicted for test sentences by an external tagger; the
    /// query set in `predicted-entities` mode.
    pub query_entities: Option<HashMap<SentenceId, Vec<EntitySpan>>>,
}

/// A predicted span with the stage that produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredictedSpan {
    #[serde(flatten)]
    pub span: EntitySpan,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    /// `yes`, `no` or `unparsed`.
    pub answer: String,
    pub kept: bool,
    pub demo_sentences: Vec<SentenceId>,
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeDiagnostics {
    #[serde(rename = "type")]
    pub ty: String,
    /// Demonstration sentence ids, best-ranked first, after trimming.
    pub demo_ids: Vec<SentenceId>,
    /// Ranks dropped to fit the token budget.
    pub dropped_ranks: Vec<usize>,
    pub prompt_tokens: usize,
    pub query_mode: Option<QueryMode>,
    pub completion: String,
    pub parse_dropped: Vec<ParseIssue>,
    pub parse_repaired: Vec<ParseIssue>,
    pub mutated: bool,
    pub verification: Vec<VerificationRecord>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub kept: EntitySpan,
    pub removed: EntitySpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceDiagnostics {
    pub types: Vec<TypeDiagnostics>,
    pub merge: Vec<Resolution>,
}

/// Final predictions for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub id: SentenceId,
    pub spans: Vec<PredictedSpan>,
    pub diagnostics: SentenceDiagnostics,
}

impl PredictionSet {
    pub fn plain_spans(&self) -> Vec<EntitySpan> {
        self.spans.iter().map(|p| p.span.clone()).collect()
    }
}

/// Result of one extraction prompt.
#[derive(Debug, Clone)]
pub struct TypeExtraction {
    pub spans: Vec<EntitySpan>,
    pub diagnostics: TypeDiagnostics,
}

/// Everything a run reads, borrowed.
pub struct Pipeline<'a> {
    pub config: &'a RunConfig,
    pub schema: &'a Schema,
    pub train: &'a LabeledCorpus,
    pub stores: &'a Stores,
    pub backend: &'a dyn Backend,
    /// Answers verification prompts; usually the same as `backend`.
    pub verify_backend: &'a dyn Backend,
    token_demos: Mutex<HashMap<(SentenceId, Vec<usize>), Vec<SentenceId>>>,
}

fn derived_seed(seed: u64, sentence_id: SentenceId, ty: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sentence_id.to_le_bytes());
    h.update(ty.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn first_line(completion: &str) -> &str {
    completion
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: &'a RunConfig,
        schema: &'a Schema,
        train: &'a LabeledCorpus,
        stores: &'a Stores,
        backend: &'a dyn Backend,
    ) -> Self {
        Self {
            config,
            schema,
            train,
            stores,
            backend,
            verify_backend: backend,
            token_demos: Mutex::default(),
        }
    }

    pub fn with_verify_backend(mut self, backend: &'a dyn Backend) -> Self {
        self.verify_backend = backend;
        self
    }

    /// Checks that the stores the configuration needs are present.
    pub fn check(&self) -> Result<(), PipelineError> {
        self.config.validate()?;
        let need = |present: bool, retrieval: &'static str, store: &'static str| {
            if present {
                Ok(())
            } else {
                Err(PipelineError::MissingStore { retrieval, store })
            }
        };
        if self.config.k > 0 {
            match self.config.retrieval {
                Retrieval::Random => {}
                Retrieval::Sentence => {
                    need(self.stores.train_sentence.is_some(), "sentence", "train sentence")?;
                    need(self.stores.test_sentence.is_some(), "sentence", "test sentence")?;
                }
                Retrieval::Entity => {
                    need(self.stores.train_token.is_some(), "entity", "train token")?;
                    need(self.stores.test_token.is_some(), "entity", "test token")?;
                }
            }
        }
        if self.config.verification == Verification::FewShot {
            need(self.stores.train_token.is_some(), "few-shot verification", "train token")?;
            need(self.stores.test_token.is_some(), "few-shot verification", "test token")?;
        }
        Ok(())
    }

    fn entity_type(&self, ty: &str) -> Result<&'a EntityType, PipelineError> {
        self.schema.get(ty).ok_or_else(|| PipelineError::UnknownType(ty.to_owned()))
    }

    fn token_queries(
        &self,
        store: &Datastore,
        sentence_id: SentenceId,
        indices: impl IntoIterator<Item = usize>,
    ) -> Result<Vec<(u32, Vec<f32>)>, PipelineError> {
        indices
            .into_iter()
            .map(|i| {
                store
                    .token_vector(sentence_id, i as u32)
                    .map(|v| (i as u32, v.to_vec()))
                    .ok_or(PipelineError::MissingVector {
                        level: "token",
                        sentence_id,
                        token: Some(i),
                    })
            })
            .collect()
    }

    /// Demonstration sentence ids for one (sentence, type), best first.
    pub fn select_demos(
        &self,
        sentence: &Sentence,
        ty: &str,
        diag: &mut TypeDiagnostics,
    ) -> Result<Vec<SentenceId>, PipelineError> {
        let k = self.config.k.min(self.train.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        match self.config.retrieval {
            Retrieval::Random => {
                let seed = derived_seed(self.config.seed, sentence.id, ty);
                let picks = random_demos(self.train.len(), k, seed)?;
                Ok(picks.into_iter().map(|i| self.train.sentences()[i].id).collect())
            }
            Retrieval::Sentence => {
                let (train, test) = match (&self.stores.train_sentence, &self.stores.test_sentence) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(PipelineError::MissingStore {
                            retrieval: "sentence",
                            store: "sentence",
                        })
                    }
                };
                let query = test.sentence_vector(sentence.id).ok_or(PipelineError::MissingVector {
                    level: "sentence",
                    sentence_id: sentence.id,
                    token: None,
                })?;
                Ok(train.knn_sentences(query, k)?.into_iter().map(|n| n.key.sentence_id).collect())
            }
            Retrieval::Entity => {
                let (train, test) = match (&self.stores.train_token, &self.stores.test_token) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(PipelineError::MissingStore {
                            retrieval: "entity",
                            store: "token",
                        })
                    }
                };
                let predicted: Option<Vec<usize>> = match self.config.query_mode {
                    QueryMode::AllTokens => None,
                    QueryMode::PredictedEntities => {
                        let spans = self.stores.query_entities.as_ref().and_then(|m| m.get(&sentence.id));
                        let mut idx: Vec<usize> = spans
                            .into_iter()
                            .flatten()
                            .filter(|s| s.ty == ty && s.end < sentence.len())
                            .flat_map(|s| s.start..=s.end)
                            .collect();
                        idx.sort_unstable();
                        idx.dedup();
                        if idx.is_empty() {
                            diag.notes
                                .push("no predicted entities of this type; querying all tokens".into());
                            None
                        } else {
                            Some(idx)
                        }
                    }
                };
                diag.query_mode = Some(if predicted.is_some() {
                    QueryMode::PredictedEntities
                } else {
                    QueryMode::AllTokens
                });
                let indices = predicted.unwrap_or_else(|| (0..sentence.len()).collect());
                let memo_key = (sentence.id, indices);
                if let Some(ids) = self.token_demos.lock().unwrap().get(&memo_key) {
                    return Ok(ids.clone());
                }
                let queries = self.token_queries(test, sentence.id, memo_key.1.iter().copied())?;
                let ids = train.retrieve_token_demos(&queries, self.config.effective_fanout(), k)?;
                self.token_demos.lock().unwrap().insert(memo_key, ids.clone());
                Ok(ids)
            }
        }
    }

    fn extraction_demo(&self, id: SentenceId, ty: &str) -> Result<ExtractionDemo, PipelineError> {
        let s = self.train.get(id).ok_or(PipelineError::UnknownDemo(id))?;
        let spans: Vec<EntitySpan> = self.train.gold_of_type(id, ty).cloned().collect();
        let (outer, _) = outermost_only(&spans);
        let marked = markup::encode(self.config.format, s, &outer)
            .map_err(|e| PipelineError::Config(format!("demo sentence {id}: {e}")))?;
        Ok(ExtractionDemo {
            input: s.text(),
            output: marked.text,
        })
    }

    fn extraction_prompt(
        &self,
        entity_type: &EntityType,
        demos: &[ExtractionDemo],
        query: &str,
        tokens_per_word: f64,
    ) -> Result<promptkit::RenderedPrompt, PromptError> {
        let mut spec = PromptSpec::new(entity_type, demos.to_vec(), query);
        spec.budget = self.config.prompt_limit();
        spec.tokens_per_word = tokens_per_word;
        spec.order = self.config.demo_order;
        spec.wording = self.config.wording;
        render_extraction_prompt(&spec)
    }

    fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest::new(prompt).with_max_tokens(self.config.max_output_tokens as u32)
    }

    /// Runs the extraction prompt for one (sentence, type). Parse problems
    /// and an over-long query are recorded in diagnostics; backend errors
    /// propagate.
    pub fn extract_for_type(&self, sentence: &Sentence, ty: &str) -> Result<TypeExtraction, PipelineError> {
        let entity_type = self.entity_type(ty)?;
        let mut diag = TypeDiagnostics {
            ty: ty.to_owned(),
            ..Default::default()
        };
        let demo_ids = self.select_demos(sentence, ty, &mut diag)?;
        let demos = demo_ids
            .iter()
            .map(|&id| self.extraction_demo(id, ty))
            .collect::<Result<Vec<_>, _>>()?;
        let query = sentence.text();

        let mut ratio = self.config.tokens_per_word;
        let mut retried = false;
        let (prompt, completion) = loop {
            let prompt = match self.extraction_prompt(entity_type, &demos, &query, ratio) {
                Ok(p) => p,
                Err(e) => {
                    diag.notes.push(format!("prompt not sent: {e}"));
                    return Ok(TypeExtraction {
                        spans: Vec::new(),
                        diagnostics: diag,
                    });
                }
            };
            match self.backend.complete(&self.request(prompt.text.clone())) {
                Ok(c) => break (prompt, c),
                Err(LlmError::ContextOverflow(msg)) if !retried => {
                    diag.notes.push(format!("context overflow, re-trimming: {msg}"));
                    ratio *= 1.5;
                    retried = true;
                }
                Err(source) => {
                    return Err(PipelineError::Backend {
                        sentence_id: sentence.id,
                        ty: ty.to_owned(),
                        source,
                    })
                }
            }
        };

        diag.demo_ids = demo_ids[..prompt.demos_kept].to_vec();
        diag.dropped_ranks = prompt.dropped_ranks;
        diag.prompt_tokens = prompt.estimated_tokens;
        diag.completion = completion.text.clone();
        let report = markup::parse(self.config.format, sentence, first_line(&completion.text), ty);
        diag.parse_dropped = report.dropped;
        diag.parse_repaired = report.repaired;
        diag.mutated = report.mutated;
        let mut spans = report.spans;
        spans.sort();
        spans.dedup();
        Ok(TypeExtraction {
            spans,
            diagnostics: diag,
        })
    }

    /// Few-shot verification demonstrations for `span`: the training
    /// entities nearest to the span's tokens, answered `yes` when the
    /// retrieved entity has the queried type.
    pub fn verification_demos(
        &self,
        sentence: &Sentence,
        span: &EntitySpan,
    ) -> Result<(Vec<VerificationDemo>, Vec<SentenceId>), PipelineError> {
        let (train, test) = match (&self.stores.train_token, &self.stores.test_token) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(PipelineError::MissingStore {
                    retrieval: "few-shot verification",
                    store: "token",
                })
            }
        };
        let queries = self.token_queries(test, sentence.id, span.start..=span.end)?;
        let refs: Vec<&[f32]> = queries.iter().map(|(_, v)| v.as_slice()).collect();
        let fanout = self.config.fanout.unwrap_or(self.config.verification_k).max(1);
        let pool = train.pooled_token_neighbors(&refs, fanout)?;

        let mut seen = HashSet::new();
        let mut demos = Vec::new();
        let mut ids = Vec::new();
        for n in pool {
            if demos.len() == self.config.verification_k {
                break;
            }
            let sid = n.key.sentence_id;
            let t = n.key.token_index as usize;
            let s = self.train.get(sid).ok_or(PipelineError::UnknownDemo(sid))?;
            if t >= s.len() {
                continue;
            }
            let gold = self.train.gold(sid);
            let containing = gold
                .iter()
                .filter(|g| g.start <= t && t <= g.end)
                .min_by_key(|g| (g.ty != span.ty, g.len()));
            let (start, end, word, answer) = match containing {
                Some(g) => (g.start, g.end, g.surface.clone(), g.ty == span.ty),
                None => (t, t, s.tokens[t].clone(), false),
            };
            if seen.insert((sid, start, end)) {
                demos.push(VerificationDemo {
                    sentence: s.text(),
                    word,
                    answer,
                });
                ids.push(sid);
            }
        }
        Ok((demos, ids))
    }

    /// Asks the verification backend about each span. A span survives on
    /// `yes` and on any answer that is neither `yes` nor `no`.
    pub fn self_verify(
        &self,
        sentence: &Sentence,
        ty: &str,
        spans: &[EntitySpan],
        diag: &mut TypeDiagnostics,
    ) -> Result<Vec<EntitySpan>, PipelineError> {
        let entity_type = self.entity_type(ty)?;
        let text = sentence.text();
        let mut kept = Vec::new();
        for span in spans {
            let (demos, demo_sentences) = match self.config.verification {
                Verification::FewShot => self.verification_demos(sentence, span)?,
                _ => (Vec::new(), Vec::new()),
            };
            let mut spec = VerificationSpec::new(entity_type, demos, text.clone(), span.surface.clone());
            spec.budget = self.config.prompt_limit();
            spec.tokens_per_word = self.config.tokens_per_word;
            spec.order = self.config.demo_order;
            spec.wording = self.config.wording;
            let prompt = match render_verification_prompt(&spec) {
                Ok(p) => p,
                Err(e) => {
                    diag.notes.push(format!("verification of {span} skipped: {e}"));
                    kept.push(span.clone());
                    continue;
                }
            };
            let completion = self
                .verify_backend
                .complete(&self.request(prompt.text))
                .map_err(|source| PipelineError::Backend {
                    sentence_id: sentence.id,
                    ty: ty.to_owned(),
                    source,
                })?;
            let answer = parse_yes_no(&completion.text);
            if answer.is_none() {
                log::warn!(
                    "sentence {} {ty}: unparseable verification answer {:?}; keeping {span}",
                    sentence.id,
                    completion.text
                );
            }
            let keep = answer != Some(false);
            diag.verification.push(VerificationRecord {
                start: span.start,
                end: span.end,
                surface: span.surface.clone(),
                answer: match answer {
                    Some(true) => "yes",
                    Some(false) => "no",
                    None => "unparsed",
                }
                .to_owned(),
                kept: keep,
                demo_sentences: demo_sentences[..prompt.demos_kept].to_vec(),
                prompt_tokens: prompt.estimated_tokens,
            });
            if keep {
                kept.push(span.clone());
            }
        }
        Ok(kept)
    }

    /// Extraction followed by verification when enabled.
    pub fn process(&self, sentence: &Sentence, ty: &str) -> Result<(Vec<PredictedSpan>, TypeDiagnostics), PipelineError> {
        let TypeExtraction { spans, mut diagnostics } = self.extract_for_type(sentence, ty)?;
        let (spans, provenance) = match self.config.verification {
            Verification::Off => (spans, Provenance::Raw),
            _ => (
                self.self_verify(sentence, ty, &spans, &mut diagnostics)?,
                Provenance::Verified,
            ),
        };
        let spans = spans
            .into_iter()
            .map(|span| PredictedSpan { span, provenance })
            .collect();
        Ok((spans, diagnostics))
    }
}

fn priority_key(span: &EntitySpan, schema: &Schema) -> (std::cmp::Reverse<usize>, usize, usize, usize) {
    (
        std::cmp::Reverse(span.len()),
        schema.rank(&span.ty).unwrap_or(usize::MAX),
        span.start,
        span.end,
    )
}

/// Combines the spans of all types for one sentence. Nested mode keeps the
/// union. Flat mode accepts spans greedily in the order (longer first,
/// then earlier type in `schema`, then earlier start) and rejects any span
/// overlapping an accepted one. Output is sorted by (start, end, type).
pub fn merge_types(
    spans: Vec<PredictedSpan>,
    mode: CorpusMode,
    schema: &Schema,
) -> (Vec<PredictedSpan>, Vec<Resolution>) {
    let mut unique: BTreeMap<(usize, usize, String), PredictedSpan> = BTreeMap::new();
    for p in spans {
        unique
            .entry((p.span.start, p.span.end, p.span.ty.clone()))
            .or_insert(p);
    }
    let mut all: Vec<PredictedSpan> = unique.into_values().collect();
    if mode == CorpusMode::Nested {
        return (all, Vec::new());
    }
    all.sort_by_key(|p| priority_key(&p.span, schema));
    let mut accepted: Vec<PredictedSpan> = Vec::new();
    let mut resolutions = Vec::new();
    for p in all {
        match accepted.iter().find(|a| a.span.overlaps(&p.span)) {
            Some(winner) => {
                log::debug!("flat merge: {} wins over {}", winner.span, p.span);
                resolutions.push(Resolution {
                    kept: winner.span.clone(),
                    removed: p.span,
                });
            }
            None => accepted.push(p),
        }
    }
    accepted.sort_by(|a, b| a.span.key().cmp(&b.span.key()));
    (accepted, resolutions)
}

/// Provenance and reproduction data for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub template_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub schema: Vec<String>,
    pub corpus_mode: CorpusMode,
    pub backend: String,
    pub verify_backend: String,
    pub test_sentences: usize,
    pub train_sentences: usize,
    pub prompts: usize,
    pub verification_prompts: usize,
    pub max_prompt_tokens: usize,
    pub trimmed_prompts: usize,
    pub parse_dropped: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub elapsed_ms: u64,
    /// Filled in by the caller when the backend is cached.
    pub cache: Option<CacheStats>,
    /// Free-form caller data such as `git describe` and overrides.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub predictions: Vec<PredictionSet>,
    pub manifest: RunManifest,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs every (sentence, type) pair of `test` on a pool of
/// `config.workers` threads and merges per sentence. Output order is by
/// sentence id, then schema order.
pub fn run_corpus(pipeline: &Pipeline<'_>, test: &LabeledCorpus) -> Result<RunOutput, PipelineError> {
    pipeline.check()?;
    let started_unix = unix_now();
    let clock = Instant::now();
    let types: Vec<&str> = pipeline.schema.names().collect();
    let items: Vec<(usize, usize)> = (0..test.len())
        .flat_map(|s| (0..types.len()).map(move |t| (s, t)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(pipeline.config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let results: Vec<(Vec<PredictedSpan>, TypeDiagnostics)> = pool.install(|| {
        items
            .par_iter()
            .map(|&(s, t)| pipeline.process(&test.sentences()[s], types[t]))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut predictions = Vec::with_capacity(test.len());
    let mut results = results.into_iter();
    for sentence in test.sentences() {
        let mut spans = Vec::new();
        let mut diagnostics = SentenceDiagnostics::default();
        for _ in 0..types.len() {
            let (s, d) = results.next().expect("one result per item");
            spans.extend(s);
            diagnostics.types.push(d);
        }
        let (spans, merge) = merge_types(spans, test.mode(), pipeline.schema);
        diagnostics.merge = merge;
        predictions.push(PredictionSet {
            id: sentence.id,
            spans,
            diagnostics,
        });
    }
    predictions.sort_by_key(|p| p.id);

    let all_types = || predictions.iter().flat_map(|p| p.diagnostics.types.iter());
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        template_version: promptkit::TEMPLATE_VERSION.to_owned(),
        config: pipeline.config.clone(),
        config_hash: pipeline.config.hash(),
        schema: types.iter().map(|t| t.to_string()).collect(),
        corpus_mode: test.mode(),
        backend: pipeline.backend.id().to_owned(),
        verify_backend: pipeline.verify_backend.id().to_owned(),
        test_sentences: test.len(),
        train_sentences: pipeline.train.len(),
        prompts: all_types().filter(|d| d.prompt_tokens > 0).count(),
        verification_prompts: all_types().map(|d| d.verification.len()).sum(),
        max_prompt_tokens: all_types().map(|d| d.prompt_tokens).max().unwrap_or(0),
        trimmed_prompts: all_types().filter(|d| !d.dropped_ranks.is_empty()).count(),
        parse_dropped: all_types().map(|d| d.parse_dropped.len()).sum(),
        started_unix,
        finished_unix: unix_now(),
        elapsed_ms: clock.elapsed().as_millis() as u64,
        cache: None,
        extra: BTreeMap::new(),
    };
    Ok(RunOutput { predictions, manifest })
}

/// Serializes predictions as JSON lines.
pub fn predictions_to_jsonl(predictions: &[PredictionSet]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

/// Writes predictions as JSON lines, atomically.
pub fn write_predictions(path: impl AsRef<Path>, predictions: &[PredictionSet]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(predictions_to_jsonl(predictions).as_bytes())?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Reads a prediction dump. Lines need only `id` and `spans`; span
/// `provenance` defaults to raw.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>, PipelineError> {
    #[derive(Deserialize)]
    struct LooseSpan {
        #[serde(flatten)]
        span: EntitySpan,
        #[serde(default)]
        provenance: Option<Provenance>,
    }
    #[derive(Deserialize)]
    struct Line {
        id: SentenceId,
        spans: Vec<LooseSpan>,
        #[serde(default)]
        diagnostics: SentenceDiagnostics,
    }
    let file = std::fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| PipelineError::Dump {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(PredictionSet {
            id: parsed.id,
            spans: parsed
                .spans
                .into_iter()
                .map(|s| PredictedSpan {
                    span: s.span,
                    provenance: s.provenance.unwrap_or(Provenance::Raw),
                })
                .collect(),
            diagnostics: parsed.diagnostics,
        });
    }
    Ok(out)
}
