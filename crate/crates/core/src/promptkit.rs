//! Prompt templates for entity extraction and for yes/no self-verification,
//! with token-budget enforcement.
//!
//! Templates are part of the public contract: mock backends recover the
//! query from a prompt with [`parse_extraction_prompt`] and
//! [`parse_verification_prompt`], and golden files pin the exact bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntityType;

pub const TEMPLATE_VERSION: &str = "1";

const LINGUIST: &str = "I am an excellent linguist.";
const EXAMPLES: &str = "Below are some examples.";
const INPUT: &str = "Input: ";
const OUTPUT: &str = "Output:";
const VERIFY_SENTENCE: &str = "The input sentence: ";
const ANSWER_SUFFIX: &str = "Please answer with yes or no.";

pub const DEFAULT_WINDOW_TOKENS: usize = 4096;
pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 512;
pub const DEFAULT_TOKENS_PER_WORD: f64 = 1.3;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt needs {needed} tokens without any demonstration, budget is {budget}")]
    BudgetUnsatisfiable { needed: usize, budget: usize },
    #[error("word {word:?} does not occur in sentence {sentence:?}")]
    WordNotInSentence { word: String, sentence: String },
}

/// `ceil(words * ratio)`, where words are whitespace-separated.
pub fn estimate_tokens(text: &str, ratio: f64) -> usize {
    estimate_words(text.split_whitespace().count(), ratio)
}

fn estimate_words(words: usize, ratio: f64) -> usize {
    // The epsilon absorbs representation error such as 3 * 1.3 = 3.9000000000000004.
    let raw = words as f64 * ratio;
    (raw - 1e-9).ceil().max(0.0) as usize
}

/// Counts prompt tokens. The default estimates from the word count.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordRatio(pub f64);

impl Default for WordRatio {
    fn default() -> Self {
        WordRatio(DEFAULT_TOKENS_PER_WORD)
    }
}

impl TokenCounter for WordRatio {
    fn count(&self, text: &str) -> usize {
        estimate_tokens(text, self.0)
    }
}

/// Context window split into prompt and reserved completion tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub window: usize,
    pub reserved_output: usize,
    pub tokens_per_word: f64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW_TOKENS,
            reserved_output: DEFAULT_MAX_OUTPUT_TOKENS,
            tokens_per_word: DEFAULT_TOKENS_PER_WORD,
        }
    }
}

impl TokenBudget {
    /// Tokens available to the prompt itself.
    pub fn prompt_limit(&self) -> usize {
        self.window.saturating_sub(self.reserved_output)
    }
}

/// Longest prefix of a best-first list whose costs, added to the fixed
/// parts, stay within `budget`. Returns the prefix length.
pub fn trim_to_budget(demo_tokens: &[usize], fixed_parts_tokens: usize, budget: usize) -> usize {
    let mut used = fixed_parts_tokens;
    for (i, &cost) in demo_tokens.iter().enumerate() {
        used += cost;
        if used > budget {
            return i;
        }
    }
    demo_tokens.len()
}

/// Where the most similar demonstration goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoOrder {
    /// Most similar demonstration adjacent to the query.
    #[default]
    NearestLast,
    NearestFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionDemo {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationDemo {
    pub sentence: String,
    pub word: String,
    pub answer: bool,
}

/// Which text of the entity type the prompt shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeWording {
    #[default]
    Description,
    Annotation,
}

fn type_text(ty: &EntityType, wording: TypeWording) -> &str {
    match wording {
        TypeWording::Annotation => ty.annotation.as_deref().unwrap_or(&ty.description),
        TypeWording::Description => &ty.description,
    }
}

/// Input to [`render_extraction_prompt`]. `demos` are ranked best-first.
#[derive(Debug, Clone)]
pub struct PromptSpec<'a> {
    pub entity_type: &'a EntityType,
    pub demos: Vec<ExtractionDemo>,
    pub query: String,
    /// Maximum prompt tokens.
    pub budget: usize,
    pub tokens_per_word: f64,
    pub order: DemoOrder,
    pub wording: TypeWording,
    /// Exact tokenizer; `None` estimates with `tokens_per_word`.
    pub counter: Option<&'a dyn TokenCounter>,
}

impl std::fmt::Debug for dyn TokenCounter + '_ {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TokenCounter")
    }
}

impl<'a> PromptSpec<'a> {
    pub fn new(entity_type: &'a EntityType, demos: Vec<ExtractionDemo>, query: impl Into<String>) -> Self {
        Self {
            entity_type,
            demos,
            query: query.into(),
            budget: TokenBudget::default().prompt_limit(),
            tokens_per_word: DEFAULT_TOKENS_PER_WORD,
            order: DemoOrder::default(),
            wording: TypeWording::default(),
            counter: None,
        }
    }
}

/// A rendered prompt plus what trimming did to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub estimated_tokens: usize,
    /// Number of best-ranked demonstrations kept.
    pub demos_kept: usize,
    /// Ranks (0 = best) of demonstrations dropped to fit the budget.
    pub dropped_ranks: Vec<usize>,
}

pub fn extraction_description(ty: &EntityType, wording: TypeWording) -> String {
    format!(
        "{LINGUIST} The task is to label {} entities in the given sentence. {EXAMPLES}",
        type_text(ty, wording)
    )
}

fn extraction_text(description: &str, demos: &[&ExtractionDemo], query: &str) -> String {
    let mut out = String::from(description);
    for d in demos {
        out.push('\n');
        out.push_str(INPUT);
        out.push_str(&d.input);
        out.push('\n');
        out.push_str(OUTPUT);
        out.push(' ');
        out.push_str(&d.output);
    }
    out.push('\n');
    out.push_str(INPUT);
    out.push_str(query);
    out.push('\n');
    out.push_str(OUTPUT);
    out
}

/// Longest prefix `p` of `0..=n` for which `fits(p)` holds, given that
/// `fits` is monotone (true up to some point, then false).
fn longest_fitting_prefix(n: usize, fits: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0usize, n);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

fn arrange<T>(kept: &[T], order: DemoOrder) -> Vec<&T> {
    match order {
        DemoOrder::NearestFirst => kept.iter().collect(),
        DemoOrder::NearestLast => kept.iter().rev().collect(),
    }
}

/// Renders the extraction prompt:
///
/// ```text
/// I am an excellent linguist. The task is to label <type> entities in the given sentence. Below are some examples.
/// Input: <demo sentence>
/// Output: <demo output>
/// ...
/// Input: <query>
/// Output:
/// ```
///
/// Demonstrations are dropped from the worst-ranked end until the token
/// estimate fits `spec.budget`.
pub fn render_extraction_prompt(spec: &PromptSpec<'_>) -> Result<RenderedPrompt, PromptError> {
    let description = extraction_description(spec.entity_type, spec.wording);
    let render = |p: usize| extraction_text(&description, &arrange(&spec.demos[..p], spec.order), &spec.query);
    let ratio = WordRatio(spec.tokens_per_word);
    finish(spec.demos.len(), spec.budget, spec.counter.unwrap_or(&ratio), render)
}

fn finish(
    n: usize,
    budget: usize,
    counter: &dyn TokenCounter,
    render: impl Fn(usize) -> String,
) -> Result<RenderedPrompt, PromptError> {
    let bare = counter.count(&render(0));
    if bare > budget {
        return Err(PromptError::BudgetUnsatisfiable { needed: bare, budget });
    }
    let kept = longest_fitting_prefix(n, |p| counter.count(&render(p)) <= budget);
    let text = render(kept);
    Ok(RenderedPrompt {
        estimated_tokens: counter.count(&text),
        text,
        demos_kept: kept,
        dropped_ranks: (kept..n).collect(),
    })
}

pub fn verification_description(ty: &EntityType, wording: TypeWording) -> String {
    format!(
        "The task is to verify whether the word is a {} entity extracted from the given sentence.",
        type_text(ty, wording)
    )
}

fn verification_question(word: &str, type_text: &str) -> String {
    format!("Is the word \"{word}\" in the input sentence a {type_text} entity? {ANSWER_SUFFIX}")
}

/// Input to [`render_verification_prompt`]. `demos` are ranked best-first.
#[derive(Debug, Clone)]
pub struct VerificationSpec<'a> {
    pub entity_type: &'a EntityType,
    pub demos: Vec<VerificationDemo>,
    pub sentence: String,
    pub word: String,
    pub budget: usize,
    pub tokens_per_word: f64,
    pub order: DemoOrder,
    pub wording: TypeWording,
    pub counter: Option<&'a dyn TokenCounter>,
}

impl<'a> VerificationSpec<'a> {
    pub fn new(
        entity_type: &'a EntityType,
        demos: Vec<VerificationDemo>,
        sentence: impl Into<String>,
        word: impl Into<String>,
    ) -> Self {
        Self {
            entity_type,
            demos,
            sentence: sentence.into(),
            word: word.into(),
            budget: TokenBudget::default().prompt_limit(),
            tokens_per_word: DEFAULT_TOKENS_PER_WORD,
            order: DemoOrder::default(),
            wording: TypeWording::default(),
            counter: None,
        }
    }
}

fn contains_words(sentence: &str, word: &str) -> bool {
    let hay: Vec<&str> = sentence.split_whitespace().collect();
    let needle: Vec<&str> = word.split_whitespace().collect();
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Renders the yes/no verification prompt:
///
/// ```text
/// The task is to verify whether the word is a <type> entity extracted from the given sentence.
/// The input sentence: <demo sentence>
/// Is the word "<demo word>" in the input sentence a <type> entity? Please answer with yes or no.
/// Yes
/// ...
/// The input sentence: <sentence>
/// Is the word "<word>" in the input sentence a <type> entity? Please answer with yes or no.
/// ```
pub fn render_verification_prompt(spec: &VerificationSpec<'_>) -> Result<RenderedPrompt, PromptError> {
    if !contains_words(&spec.sentence, &spec.word) {
        return Err(PromptError::WordNotInSentence {
            word: spec.word.clone(),
            sentence: spec.sentence.clone(),
        });
    }
    let text_of_type = type_text(spec.entity_type, spec.wording);
    let description = verification_description(spec.entity_type, spec.wording);
    let render = |p: usize| {
        let mut out = description.clone();
        for d in arrange(&spec.demos[..p], spec.order) {
            out.push('\n');
            out.push_str(VERIFY_SENTENCE);
            out.push_str(&d.sentence);
            out.push('\n');
            out.push_str(&verification_question(&d.word, text_of_type));
            out.push('\n');
            out.push_str(if d.answer { "Yes" } else { "No" });
        }
        out.push('\n');
        out.push_str(VERIFY_SENTENCE);
        out.push_str(&spec.sentence);
        out.push('\n');
        out.push_str(&verification_question(&spec.word, text_of_type));
        out
    };
    let ratio = WordRatio(spec.tokens_per_word);
    finish(spec.demos.len(), spec.budget, spec.counter.unwrap_or(&ratio), render)
}

/// Query recovered from an extraction prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionQuery {
    /// The type text as it appears in the prompt.
    pub type_text: String,
    pub sentence: String,
}

/// Recovers the type text and query sentence from a prompt produced by
/// [`render_extraction_prompt`].
pub fn parse_extraction_prompt(prompt: &str) -> Option<ExtractionQuery> {
    let mut lines = prompt.lines();
    let first = lines.next()?;
    let type_text = first
        .strip_prefix(&format!("{LINGUIST} The task is to label "))?
        .strip_suffix(&format!(" entities in the given sentence. {EXAMPLES}"))?;
    let rest: Vec<&str> = lines.collect();
    let (last, before) = rest.split_last()?;
    if *last != OUTPUT {
        return None;
    }
    let sentence = before.last()?.strip_prefix(INPUT)?;
    Some(ExtractionQuery {
        type_text: type_text.to_owned(),
        sentence: sentence.to_owned(),
    })
}

/// Query recovered from a verification prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationQuery {
    pub type_text: String,
    pub sentence: String,
    pub word: String,
}

pub fn parse_verification_prompt(prompt: &str) -> Option<VerificationQuery> {
    let mut lines = prompt.lines();
    let first = lines.next()?;
    let type_text = first
        .strip_prefix("The task is to verify whether the word is a ")?
        .strip_suffix(" entity extracted from the given sentence.")?;
    let rest: Vec<&str> = lines.collect();
    let (question, before) = rest.split_last()?;
    let sentence = before.last()?.strip_prefix(VERIFY_SENTENCE)?;
    let word = question
        .strip_prefix("Is the word \"")?
        .strip_suffix(&format!("\" in the input sentence a {type_text} entity? {ANSWER_SUFFIX}"))?;
    Some(VerificationQuery {
        type_text: type_text.to_owned(),
        sentence: sentence.to_owned(),
        word: word.to_owned(),
    })
}

/// Reads a verification answer: the first alphabetic word, lowercased,
/// must be `yes` or `no`. Anything else is `None`.
pub fn parse_yes_no(completion: &str) -> Option<bool> {
    let word: String = completion
        .trim_start_matches(|c: char| !c.is_alphabetic())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}
