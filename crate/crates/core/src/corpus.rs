//! Corpus ingestion: CoNLL two-column files (flat NER) and JSON-lines files
//! (nested NER), tag-scheme encoding/decoding and entity-type schemas.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a sentence inside one corpus.
pub type SentenceId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 2 whitespace-separated columns, found {columns}")]
    MalformedLine { line: usize, columns: usize },
    #[error("line {line}: illegal tag transition at `{tag}`: {detail}")]
    IllegalTagTransition {
        line: usize,
        tag: String,
        detail: String,
    },
    #[error("line {line}: invalid tag `{tag}`")]
    InvalidTag { line: usize, tag: String },
    #[error("unknown entity type `{ty}`{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    UnknownType { ty: String, line: Option<usize> },
    #[error("sentence {id}: span {start}..={end} out of range for {len} tokens")]
    SpanOutOfRange {
        id: SentenceId,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("duplicate sentence id {0}")]
    DuplicateId(SentenceId),
    #[error("line {line}: invalid JSON record: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("sentence {id}: spans {a} and {b} overlap in flat mode")]
    OverlapInFlatMode {
        id: SentenceId,
        a: String,
        b: String,
    },
    #[error("sentence {id}: {reason}")]
    InvalidSentence { id: SentenceId, reason: String },
    #[error("invalid schema: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One entity type: a short tag plus the phrase used for it in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityType {
    pub name: String,
    pub description: String,
    /// Longer annotation-guideline sentence, optionally used in place of
    /// `description`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
}

impl EntityType {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            annotation: None,
        }
    }

    pub fn with_annotation(mut self, annotation: impl Into<String>) -> Self {
        self.annotation = Some(annotation.into());
        self
    }
}

/// An ordered set of entity types with unique names. The order doubles as
/// the default type priority when merging flat predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schema {
    types: Vec<EntityType>,
}

impl Schema {
    pub fn new(types: Vec<EntityType>) -> Result<Self> {
        if types.is_empty() {
            return Err(CorpusError::Schema("schema has no entity types".into()));
        }
        let mut seen = HashSet::new();
        for t in &types {
            if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
                return Err(CorpusError::Schema(format!("bad type name `{}`", t.name)));
            }
            if t.description.trim().is_empty() {
                return Err(CorpusError::Schema(format!(
                    "type `{}` has an empty description",
                    t.name
                )));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(CorpusError::Schema(format!("duplicate type `{}`", t.name)));
            }
        }
        Ok(Self { types })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let types: Vec<EntityType> =
            serde_json::from_str(text).map_err(|source| CorpusError::Json { line: 1, source })?;
        Self::new(types)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&read_to_string(path.as_ref())?)
    }

    /// Resolves a built-in schema name (`conll03`, `ontonotes5`, `ace`).
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "conll03" | "conll2003" => Some(Self::conll03()),
            "ontonotes5" | "ontonotes" => Some(Self::ontonotes5()),
            "ace" | "ace2004" | "ace2005" => Some(Self::ace()),
            _ => None,
        }
    }

    pub fn conll03() -> Self {
        Self {
            types: vec![
                EntityType::new("LOC", "location").with_annotation(
                    "location entities are the name of politically or geographically defined locations such as cities, provinces, countries, international regions, bodies of water, mountains, etc",
                ),
                EntityType::new("ORG", "organization").with_annotation(
                    "organization entities are limited to named corporate, governmental, or other organizational entities",
                ),
                EntityType::new("PER", "person")
                    .with_annotation("person entities are named persons or family"),
                EntityType::new("MISC", "miscellaneous").with_annotation(
                    "miscellaneous entities include events, nationalities, products and works of art",
                ),
            ],
        }
    }

    pub fn ontonotes5() -> Self {
        let rows = [
            ("PERSON", "person", "People, including fictional"),
            ("NORP", "nationality, religious or political group", "Nationalities or religious or political groups"),
            ("FAC", "facility", "Buildings, airports, highways, bridges, etc"),
            ("ORG", "organization", "Companies, agencies, institutions, etc"),
            ("GPE", "geopolitical", "Countries, cities, states"),
            ("LOC", "location", "Non-GPE locations, mountain ranges, bodies of water"),
            ("PRODUCT", "product", "Vehicles, weapons, foods, etc"),
            ("EVENT", "event", "Named hurricanes, battles, wars, sports events, etc"),
            ("WORK_OF_ART", "work of art", "Titles of books, songs, etc"),
            ("LAW", "law", "Named documents made into laws"),
            ("LANGUAGE", "language", "Any named language"),
            ("DATE", "date", "Absolute or relative dates or periods"),
            ("TIME", "time", "Times smaller than a day"),
            ("PERCENT", "percent", "Percentage"),
            ("MONEY", "money", "Monetary values, including unit"),
            ("QUANTITY", "quantity", "Measurements, as of weight or distance"),
            ("ORDINAL", "ordinal", "first, second, etc"),
            ("CARDINAL", "cardinal", "Numerals that do not fall under another type"),
        ];
        Self {
            types: rows
                .iter()
                .map(|(n, d, a)| EntityType::new(*n, *d).with_annotation(*a))
                .collect(),
        }
    }

    pub fn ace() -> Self {
        let rows = [
            ("GPE", "geographical political", "geographical political entities are geographical regions defined by political and or social groups such as countries, nations, regions, cities, states, government and its people"),
            ("ORG", "organization", "organization entities are limited to companies, corporations, agencies, institutions and other groups of people"),
            ("PER", "person", "a person entity is limited to human including a single individual or a group"),
            ("FAC", "facility", "facility entities are limited to buildings and other permanent man-made structures such as buildings, airports, highways, bridges"),
            ("VEH", "vehicle", "vehicle entities are physical devices primarily designed to move, carry, pull or push the transported object such as helicopters, trains, ship and motorcycles"),
            ("LOC", "location", "location entities are limited to geographical entities such as geographical areas and landmasses, mountains, bodies of water, and geological formations"),
            ("WEA", "weapon", "weapon entities are limited to physical devices such as instruments for physically harming such as guns, arms and gunpowder"),
        ];
        Self {
            types: rows
                .iter()
                .map(|(n, d, a)| EntityType::new(*n, *d).with_annotation(*a))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&EntityType> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Position of a type in schema order.
    pub fn rank(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.name == name)
    }

    /// Reverse lookup from a prompt description back to the type.
    pub fn by_description(&self, description: &str) -> Option<&EntityType> {
        self.types.iter().find(|t| {
            t.description == description || t.annotation.as_deref() == Some(description)
        })
    }

    pub fn types(&self) -> &[EntityType] {
        &self.types
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let types = Vec::<EntityType>::deserialize(d)?;
        Schema::new(types).map_err(serde::de::Error::custom)
    }
}

/// A pre-tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: SentenceId,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: SentenceId, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CorpusError::InvalidSentence {
                id,
                reason: "sentence has no tokens".into(),
            });
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(CorpusError::InvalidSentence {
                id,
                reason: format!("token {bad:?} is empty or contains whitespace"),
            });
        }
        Ok(Self { id, tokens })
    }

    /// Builds a sentence by splitting on whitespace.
    pub fn from_text(id: SentenceId, text: &str) -> Result<Self> {
        Self::new(id, text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined with single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn surface(&self, start: usize, end: usize) -> String {
        self.tokens[start..=end].join(" ")
    }
}

/// A typed token span, end-inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub ty: String,
    pub surface: String,
}

impl EntitySpan {
    pub fn new(sentence: &Sentence, start: usize, end: usize, ty: impl Into<String>) -> Result<Self> {
        if start > end || end >= sentence.len() {
            return Err(CorpusError::SpanOutOfRange {
                id: sentence.id,
                start,
                end,
                len: sentence.len(),
            });
        }
        Ok(Self {
            start,
            end,
            ty: ty.into(),
            surface: sentence.surface(start, end),
        })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// The (start, end, type) triple used for exact-match scoring.
    pub fn key(&self) -> (usize, usize, &str) {
        (self.start, self.end, self.ty.as_str())
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{:?})", self.start, self.end, self.ty, self.surface)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Flat,
    Nested,
}

/// Sentences plus gold spans. Immutable once built.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    sentences: Vec<Sentence>,
    gold: BTreeMap<SentenceId, Vec<EntitySpan>>,
    mode: CorpusMode,
    index: HashMap<SentenceId, usize>,
}

impl LabeledCorpus {
    /// Validates ids, span ranges, surfaces, types and (in flat mode)
    /// non-overlap. Gold spans are stored sorted.
    pub fn new(
        sentences: Vec<Sentence>,
        mut gold: BTreeMap<SentenceId, Vec<EntitySpan>>,
        mode: CorpusMode,
        schema: &Schema,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(sentences.len());
        for (i, s) in sentences.iter().enumerate() {
            if index.insert(s.id, i).is_some() {
                return Err(CorpusError::DuplicateId(s.id));
            }
        }
        for (id, spans) in gold.iter_mut() {
            let sentence = match index.get(id) {
                Some(&i) => &sentences[i],
                None => {
                    return Err(CorpusError::InvalidSentence {
                        id: *id,
                        reason: "gold spans for unknown sentence".into(),
                    })
                }
            };
            for span in spans.iter() {
                if span.start > span.end || span.end >= sentence.len() {
                    return Err(CorpusError::SpanOutOfRange {
                        id: *id,
                        start: span.start,
                        end: span.end,
                        len: sentence.len(),
                    });
                }
                if !schema.contains(&span.ty) {
                    return Err(CorpusError::UnknownType {
                        ty: span.ty.clone(),
                        line: None,
                    });
                }
                if span.surface != sentence.surface(span.start, span.end) {
                    return Err(CorpusError::InvalidSentence {
                        id: *id,
                        reason: format!("surface mismatch for {span}"),
                    });
                }
            }
            spans.sort();
            spans.dedup();
            if mode == CorpusMode::Flat {
                ensure_non_overlapping(*id, spans)?;
            }
        }
        gold.retain(|_, v| !v.is_empty());
        Ok(Self {
            sentences,
            gold,
            mode,
            index,
        })
    }

    pub fn empty(mode: CorpusMode) -> Self {
        Self {
            sentences: Vec::new(),
            gold: BTreeMap::new(),
            mode,
            index: HashMap::new(),
        }
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn mode(&self) -> CorpusMode {
        self.mode
    }

    pub fn get(&self, id: SentenceId) -> Option<&Sentence> {
        self.index.get(&id).map(|&i| &self.sentences[i])
    }

    pub fn contains(&self, id: SentenceId) -> bool {
        self.index.contains_key(&id)
    }

    /// Gold spans of a sentence, sorted by (start, end, type).
    pub fn gold(&self, id: SentenceId) -> &[EntitySpan] {
        self.gold.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn gold_of_type<'a>(&'a self, id: SentenceId, ty: &'a str) -> impl Iterator<Item = &'a EntitySpan> + 'a {
        self.gold(id).iter().filter(move |s| s.ty == ty)
    }

    pub fn has_type(&self, id: SentenceId, ty: &str) -> bool {
        self.gold_of_type(id, ty).next().is_some()
    }

    pub fn total_spans(&self) -> usize {
        self.gold.values().map(Vec::len).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = SentenceId> + '_ {
        self.sentences.iter().map(|s| s.id)
    }

    /// Sub-corpus restricted to `ids`, in the given order; unknown ids are
    /// skipped. Sentence ids are preserved.
    pub fn subset(&self, ids: &[SentenceId]) -> Self {
        let mut sentences = Vec::with_capacity(ids.len());
        let mut gold = BTreeMap::new();
        let mut index = HashMap::with_capacity(ids.len());
        for &id in ids {
            if let Some(s) = self.get(id) {
                if index.insert(id, sentences.len()).is_some() {
                    continue;
                }
                sentences.push(s.clone());
                if let Some(g) = self.gold.get(&id) {
                    gold.insert(id, g.clone());
                }
            }
        }
        Self {
            sentences,
            gold,
            mode: self.mode,
            index,
        }
    }
}

fn ensure_non_overlapping(id: SentenceId, sorted: &[EntitySpan]) -> Result<()> {
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if b.start > a.end {
                break;
            }
            return Err(CorpusError::OverlapInFlatMode {
                id,
                a: a.to_string(),
                b: b.to_string(),
            });
        }
    }
    Ok(())
}

/// Tag scheme for token-level encodings. `Bioes` also accepts `M-` as an
/// alias for `I-`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    Bio,
    #[default]
    Bioes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prefix {
    B,
    I,
    E,
    S,
}

/// A parsed tag: `None` for `O`, otherwise prefix and type.
fn split_tag(tag: &str, scheme: TagScheme) -> Option<Option<(Prefix, &str)>> {
    if tag == "O" {
        return Some(None);
    }
    let (p, ty) = tag.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    let prefix = match (p, scheme) {
        ("B", _) => Prefix::B,
        ("I", _) => Prefix::I,
        ("M", TagScheme::Bioes) => Prefix::I,
        ("E", TagScheme::Bioes) => Prefix::E,
        ("S", TagScheme::Bioes) => Prefix::S,
        _ => return None,
    };
    Some(Some((prefix, ty)))
}

/// Problems found while decoding a tag sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TagIssue {
    Invalid { index: usize, tag: String },
    Transition { index: usize, tag: String, detail: String },
}

impl TagIssue {
    pub fn index(&self) -> usize {
        match self {
            TagIssue::Invalid { index, .. } | TagIssue::Transition { index, .. } => *index,
        }
    }
}

/// Decodes a tag sequence into `(start, end, type)` runs, repairing
/// malformed transitions: an orphan `I-X`/`E-X` opens (or is) a new span
/// and an unterminated BIOES run is closed at its last token. Every repair
/// or skipped invalid tag is reported.
pub fn decode_tags<S: AsRef<str>>(
    tags: &[S],
    scheme: TagScheme,
) -> (Vec<(usize, usize, String)>, Vec<TagIssue>) {
    let mut spans = Vec::new();
    let mut issues = Vec::new();
    let mut open: Option<(usize, String)> = None;

    let close = |open: &mut Option<(usize, String)>, end: usize, spans: &mut Vec<(usize, usize, String)>| {
        if let Some((start, ty)) = open.take() {
            spans.push((start, end, ty));
        }
    };

    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let Some(parsed) = split_tag(tag, scheme) else {
            issues.push(TagIssue::Invalid {
                index: i,
                tag: tag.to_owned(),
            });
            if open.is_some() && scheme == TagScheme::Bioes {
                issues.push(TagIssue::Transition {
                    index: i,
                    tag: tag.to_owned(),
                    detail: "unterminated entity".into(),
                });
            }
            close(&mut open, i.wrapping_sub(1), &mut spans);
            continue;
        };
        let unterminated = |issues: &mut Vec<TagIssue>, open: &Option<(usize, String)>| {
            if open.is_some() && scheme == TagScheme::Bioes {
                issues.push(TagIssue::Transition {
                    index: i,
                    tag: tag.to_owned(),
                    detail: "previous entity not terminated with E-".into(),
                });
            }
        };
        match parsed {
            None => {
                unterminated(&mut issues, &open);
                close(&mut open, i.wrapping_sub(1), &mut spans);
            }
            Some((Prefix::B, ty)) => {
                unterminated(&mut issues, &open);
                close(&mut open, i.wrapping_sub(1), &mut spans);
                open = Some((i, ty.to_owned()));
            }
            Some((Prefix::I, ty)) => {
                if open.as_ref().is_some_and(|(_, t)| t == ty) {
                    continue;
                }
                issues.push(TagIssue::Transition {
                    index: i,
                    tag: tag.to_owned(),
                    detail: "inside tag without a preceding begin of the same type".into(),
                });
                close(&mut open, i.wrapping_sub(1), &mut spans);
                open = Some((i, ty.to_owned()));
            }
            Some((Prefix::E, ty)) => {
                if open.as_ref().is_some_and(|(_, t)| t == ty) {
                    close(&mut open, i, &mut spans);
                    continue;
                }
                issues.push(TagIssue::Transition {
                    index: i,
                    tag: tag.to_owned(),
                    detail: "end tag without a preceding begin of the same type".into(),
                });
                close(&mut open, i.wrapping_sub(1), &mut spans);
                spans.push((i, i, ty.to_owned()));
            }
            Some((Prefix::S, ty)) => {
                unterminated(&mut issues, &open);
                close(&mut open, i.wrapping_sub(1), &mut spans);
                spans.push((i, i, ty.to_owned()));
            }
        }
    }
    if open.is_some() && scheme == TagScheme::Bioes {
        issues.push(TagIssue::Transition {
            index: tags.len().saturating_sub(1),
            tag: tags.last().map(|t| t.as_ref().to_owned()).unwrap_or_default(),
            detail: "entity not terminated before end of sentence".into(),
        });
    }
    close(&mut open, tags.len().wrapping_sub(1), &mut spans);
    (spans, issues)
}

/// Encodes non-overlapping spans as one tag per token.
pub fn spans_to_tags(sentence: &Sentence, spans: &[EntitySpan], scheme: TagScheme) -> Result<Vec<String>> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0].overlaps(w[1]) {
            return Err(CorpusError::OverlapInFlatMode {
                id: sentence.id,
                a: w[0].to_string(),
                b: w[1].to_string(),
            });
        }
    }
    let mut tags = vec!["O".to_owned(); sentence.len()];
    for s in sorted {
        if s.end >= sentence.len() || s.start > s.end {
            return Err(CorpusError::SpanOutOfRange {
                id: sentence.id,
                start: s.start,
                end: s.end,
                len: sentence.len(),
            });
        }
        match scheme {
            TagScheme::Bio => {
                tags[s.start] = format!("B-{}", s.ty);
                for t in &mut tags[s.start + 1..=s.end] {
                    *t = format!("I-{}", s.ty);
                }
            }
            TagScheme::Bioes if s.start == s.end => tags[s.start] = format!("S-{}", s.ty),
            TagScheme::Bioes => {
                tags[s.start] = format!("B-{}", s.ty);
                for t in &mut tags[s.start + 1..s.end] {
                    *t = format!("I-{}", s.ty);
                }
                tags[s.end] = format!("E-{}", s.ty);
            }
        }
    }
    Ok(tags)
}

/// Options for [`load_conll_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ConllOptions {
    /// `None` detects the scheme: BIOES if any `E-`/`S-` tag appears.
    pub scheme: Option<TagScheme>,
    /// Turn repairable tag transitions into errors.
    pub strict: bool,
}

pub fn load_conll(path: impl AsRef<Path>, schema: &Schema) -> Result<LabeledCorpus> {
    load_conll_with(path, schema, ConllOptions::default())
}

pub fn load_conll_with(path: impl AsRef<Path>, schema: &Schema, opts: ConllOptions) -> Result<LabeledCorpus> {
    parse_conll(&read_to_string(path.as_ref())?, schema, opts)
}

/// Parses CoNLL two-column text. Sentence ids are assigned in file order
/// from 0. `-DOCSTART-` lines are skipped.
pub fn parse_conll(text: &str, schema: &Schema, opts: ConllOptions) -> Result<LabeledCorpus> {
    struct Block {
        tokens: Vec<String>,
        tags: Vec<String>,
        lines: Vec<usize>,
    }
    let mut blocks = Vec::new();
    let mut cur = Block {
        tokens: vec![],
        tags: vec![],
        lines: vec![],
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = raw.split_whitespace().collect();
        if cols.is_empty() {
            if !cur.tokens.is_empty() {
                blocks.push(std::mem::replace(
                    &mut cur,
                    Block {
                        tokens: vec![],
                        tags: vec![],
                        lines: vec![],
                    },
                ));
            }
            continue;
        }
        if cols.len() != 2 {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                columns: cols.len(),
            });
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        cur.tokens.push(cols[0].to_owned());
        cur.tags.push(cols[1].to_owned());
        cur.lines.push(line_no);
    }
    if !cur.tokens.is_empty() {
        blocks.push(cur);
    }

    let scheme = opts.scheme.unwrap_or_else(|| {
        let bioes = blocks
            .iter()
            .flat_map(|b| b.tags.iter())
            .any(|t| t.starts_with("E-") || t.starts_with("S-"));
        if bioes {
            TagScheme::Bioes
        } else {
            TagScheme::Bio
        }
    });

    let mut sentences = Vec::with_capacity(blocks.len());
    let mut gold = BTreeMap::new();
    for (n, block) in blocks.into_iter().enumerate() {
        let id = n as SentenceId;
        let (runs, issues) = decode_tags(&block.tags, scheme);
        for issue in issues {
            let idx = issue.index().min(block.lines.len() - 1);
            let line = block.lines[idx];
            match issue {
                TagIssue::Invalid { tag, .. } => return Err(CorpusError::InvalidTag { line, tag }),
                TagIssue::Transition { tag, detail, .. } if opts.strict => {
                    return Err(CorpusError::IllegalTagTransition { line, tag, detail })
                }
                TagIssue::Transition { tag, detail, .. } => {
                    log::warn!("line {line}: repaired tag `{tag}`: {detail}");
                }
            }
        }
        let sentence = Sentence::new(id, block.tokens)?;
        let mut spans = Vec::with_capacity(runs.len());
        for (start, end, ty) in runs {
            if !schema.contains(&ty) {
                return Err(CorpusError::UnknownType {
                    ty,
                    line: Some(block.lines[start]),
                });
            }
            spans.push(EntitySpan::new(&sentence, start, end, ty)?);
        }
        if !spans.is_empty() {
            gold.insert(id, spans);
        }
        sentences.push(sentence);
    }
    LabeledCorpus::new(sentences, gold, CorpusMode::Flat, schema)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEntity {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    ty: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSentence {
    id: SentenceId,
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<JsonEntity>,
}

pub fn load_nested_jsonl(path: impl AsRef<Path>, schema: &Schema) -> Result<LabeledCorpus> {
    parse_nested_jsonl(&read_to_string(path.as_ref())?, schema)
}

/// Parses nested-NER JSON lines: `{"id", "tokens", "entities": [{"start",
/// "end", "type"}]}` with inclusive ends. Blank lines are ignored.
pub fn parse_nested_jsonl(text: &str, schema: &Schema) -> Result<LabeledCorpus> {
    let mut sentences = Vec::new();
    let mut gold = BTreeMap::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: JsonSentence =
            serde_json::from_str(raw).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        if !seen.insert(rec.id) {
            return Err(CorpusError::DuplicateId(rec.id));
        }
        let sentence = Sentence::new(rec.id, rec.tokens)?;
        let mut spans = Vec::with_capacity(rec.entities.len());
        for e in rec.entities {
            if !schema.contains(&e.ty) {
                return Err(CorpusError::UnknownType {
                    ty: e.ty,
                    line: Some(i + 1),
                });
            }
            spans.push(EntitySpan::new(&sentence, e.start, e.end, e.ty)?);
        }
        if !spans.is_empty() {
            gold.insert(sentence.id, spans);
        }
        sentences.push(sentence);
    }
    LabeledCorpus::new(sentences, gold, CorpusMode::Nested, schema)
}

/// Loads a corpus, choosing the reader by extension: `.jsonl`/`.json` is
/// nested JSON lines, anything else CoNLL.
pub fn load_corpus(path: impl AsRef<Path>, schema: &Schema) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => load_nested_jsonl(path, schema),
        _ => load_conll(path, schema),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
