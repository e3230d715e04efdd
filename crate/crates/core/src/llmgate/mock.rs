//! Deterministic backends for tests and offline runs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, CompletionResponse, LlmError};
use crate::corpus::{EntitySpan, LabeledCorpus, Schema, Sentence};
use crate::markup::{self, outermost_only, OutputFormat};
use crate::promptkit::{parse_extraction_prompt, parse_verification_prompt};

fn respond(backend_id: &str, text: String) -> Result<CompletionResponse, LlmError> {
    Ok(CompletionResponse {
        text,
        backend_id: backend_id.to_owned(),
        cached: false,
        latency_ms: 0,
    })
}

/// Echoes the query sentence of an extraction prompt, so every query
/// yields no entities.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyMock;

impl Backend for CopyMock {
    fn id(&self) -> &str {
        "mock:copy"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let q = parse_extraction_prompt(&request.prompt)
            .ok_or_else(|| LlmError::UnparseablePrompt("not an extraction prompt".into()))?;
        respond(self.id(), q.sentence)
    }
}

/// Gold annotations addressed by sentence text and prompt type text.
/// When several sentences share a text, the first one wins.
#[derive(Debug, Clone)]
pub struct GoldIndex {
    by_text: HashMap<String, (Sentence, Vec<EntitySpan>)>,
    types: HashMap<String, String>,
}

impl GoldIndex {
    pub fn new(corpus: &LabeledCorpus, schema: &Schema) -> Self {
        let mut by_text = HashMap::new();
        for s in corpus.sentences() {
            by_text
                .entry(s.text())
                .or_insert_with(|| (s.clone(), corpus.gold(s.id).to_vec()));
        }
        let mut types = HashMap::new();
        for t in schema.types() {
            types.entry(t.description.clone()).or_insert_with(|| t.name.clone());
            if let Some(a) = &t.annotation {
                types.entry(a.clone()).or_insert_with(|| t.name.clone());
            }
        }
        Self { by_text, types }
    }

    /// Type name for the text shown in a prompt.
    pub fn type_name(&self, type_text: &str) -> Option<&str> {
        self.types.get(type_text).map(String::as_str)
    }

    pub fn lookup(&self, sentence_text: &str) -> Option<(&Sentence, &[EntitySpan])> {
        self.by_text.get(sentence_text).map(|(s, g)| (s, g.as_slice()))
    }

    fn query(&self, prompt: &str) -> Result<(&Sentence, &[EntitySpan], String), LlmError> {
        let q = parse_extraction_prompt(prompt)
            .ok_or_else(|| LlmError::UnparseablePrompt("not an extraction prompt".into()))?;
        let ty = self
            .type_name(&q.type_text)
            .ok_or_else(|| LlmError::UnparseablePrompt(format!("unknown type text {:?}", q.type_text)))?
            .to_owned();
        let (s, gold) = self
            .lookup(&q.sentence)
            .ok_or_else(|| LlmError::UnparseablePrompt(format!("sentence not in gold index: {:?}", q.sentence)))?;
        Ok((s, gold, ty))
    }
}

fn render(format: OutputFormat, sentence: &Sentence, spans: &[EntitySpan]) -> Result<String, LlmError> {
    let (outer, _) = outermost_only(spans);
    markup::encode(format, sentence, &outer)
        .map(|m| m.text)
        .map_err(|e| LlmError::BadResponse(e.to_string()))
}

/// Answers extraction prompts with the gold spans of the queried type.
#[derive(Debug, Clone)]
pub struct OracleMock {
    gold: Arc<GoldIndex>,
    format: OutputFormat,
}

impl OracleMock {
    pub fn new(gold: Arc<GoldIndex>, format: OutputFormat) -> Self {
        Self { gold, format }
    }
}

impl Backend for OracleMock {
    fn id(&self) -> &str {
        "mock:oracle"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let (s, gold, ty) = self.gold.query(&request.prompt)?;
        let spans: Vec<EntitySpan> = gold.iter().filter(|g| g.ty == ty).cloned().collect();
        respond(self.id(), render(self.format, s, &spans)?)
    }
}

/// Gold spans of the queried type plus, with probability `rate`, every
/// capitalized token that lies outside all gold spans. With `cross_type`,
/// tokens inside gold spans of other types are candidates too. The draw is
/// a pure function of the seed, type and sentence.
#[derive(Debug, Clone)]
pub struct OverpredictMock {
    gold: Arc<GoldIndex>,
    format: OutputFormat,
    rate: f64,
    seed: u64,
    cross_type: bool,
}

impl OverpredictMock {
    pub fn new(gold: Arc<GoldIndex>, format: OutputFormat, rate: f64, seed: u64) -> Self {
        Self {
            gold,
            format,
            rate: rate.clamp(0.0, 1.0),
            seed,
            cross_type: false,
        }
    }

    pub fn with_cross_type(mut self, cross_type: bool) -> Self {
        self.cross_type = cross_type;
        self
    }

    fn rng(&self, ty: &str, sentence: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(ty.as_bytes());
        h.update([0]);
        h.update(sentence.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl Backend for OverpredictMock {
    fn id(&self) -> &str {
        "mock:overpredict"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let (s, gold, ty) = self.gold.query(&request.prompt)?;
        let mut spans: Vec<EntitySpan> = gold.iter().filter(|g| g.ty == ty).cloned().collect();
        let mut rng = self.rng(&ty, &s.text());
        for (i, tok) in s.tokens.iter().enumerate() {
            let covered = gold
                .iter()
                .any(|g| g.start <= i && i <= g.end && (!self.cross_type || g.ty == ty));
            let capitalized = tok.chars().next().is_some_and(char::is_uppercase);
            if !covered && capitalized && rng.gen_bool(self.rate) {
                spans.push(EntitySpan::new(s, i, i, ty.clone()).expect("index in range"));
            }
        }
        spans.sort();
        respond(self.id(), render(self.format, s, &spans)?)
    }
}

/// Answers verification prompts: "Yes" when the word is the surface of a
/// gold span of the asked type in that sentence, "No" otherwise.
#[derive(Debug, Clone)]
pub struct YesNoOracleMock {
    gold: Arc<GoldIndex>,
}

impl YesNoOracleMock {
    pub fn new(gold: Arc<GoldIndex>) -> Self {
        Self { gold }
    }
}

impl Backend for YesNoOracleMock {
    fn id(&self) -> &str {
        "mock:yesno-oracle"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let q = parse_verification_prompt(&request.prompt)
            .ok_or_else(|| LlmError::UnparseablePrompt("not a verification prompt".into()))?;
        let ty = self
            .gold
            .type_name(&q.type_text)
            .ok_or_else(|| LlmError::UnparseablePrompt(format!("unknown type text {:?}", q.type_text)))?;
        let (_, gold) = self
            .gold
            .lookup(&q.sentence)
            .ok_or_else(|| LlmError::UnparseablePrompt(format!("sentence not in gold index: {:?}", q.sentence)))?;
        let yes = gold.iter().any(|g| g.ty == ty && g.surface == q.word);
        respond(self.id(), if yes { "Yes" } else { "No" }.to_owned())
    }
}

/// Replays recorded completions keyed by the exact prompt text or by the
/// lowercase hex SHA-256 of the prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMock {
    responses: HashMap<String, String>,
}

impl ScriptedMock {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self { responses }
    }

    /// Loads a JSON object mapping prompts (or prompt digests) to completions.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| LlmError::Transport(e.to_string()))?;
        let responses = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        Ok(Self { responses })
    }

    pub fn insert(&mut self, prompt: impl Into<String>, completion: impl Into<String>) {
        self.responses.insert(prompt.into(), completion.into());
    }
}

impl Backend for ScriptedMock {
    fn id(&self) -> &str {
        "mock:scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let digest = hex::encode(Sha256::digest(request.prompt.as_bytes()));
        match self
            .responses
            .get(&request.prompt)
            .or_else(|| self.responses.get(&digest))
        {
            Some(text) => respond(self.id(), text.clone()),
            None => Err(LlmError::NoScriptedResponse(digest)),
        }
    }
}
