//! Generation-target encodings of entity spans and tolerant parsers that map
//! (possibly mangled) model output back onto the original tokens.
//!
//! Three formats are supported:
//! - `AtMarker`: the sentence copied verbatim with each entity wrapped as
//!   `@@first ... last##`;
//! - `Bmes`: one `B-`/`M-`/`E-`/`S-`/`O` tag per token;
//! - `EntityPosition`: `surface (start)` items separated by `, `, or `None`.
//!
//! Parsers are total: every failure is recorded in the [`ParseReport`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{decode_tags, spans_to_tags, EntitySpan, Sentence, TagIssue, TagScheme};

pub const OPEN: &str = "@@";
pub const CLOSE: &str = "##";
const ESCAPE: char = '\\';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MarkupError {
    #[error("spans {0} and {1} overlap")]
    OverlappingSpans(String, String),
    #[error("spans of more than one type in a single encoding: {0} and {1}")]
    MixedTypes(String, String),
    #[error("span {span} out of range for {len} tokens")]
    SpanOutOfRange { span: String, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum OutputFormat {
    #[default]
    #[serde(rename = "atmarker")]
    AtMarker,
    #[serde(rename = "bmes")]
    Bmes,
    #[serde(rename = "entpos")]
    EntityPosition,
}

impl OutputFormat {
    pub const ALL: [OutputFormat; 3] = [OutputFormat::AtMarker, OutputFormat::Bmes, OutputFormat::EntityPosition];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::AtMarker => "atmarker",
            OutputFormat::Bmes => "bmes",
            OutputFormat::EntityPosition => "entpos",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "atmarker" | "at-marker" | "marker" => Ok(OutputFormat::AtMarker),
            "bmes" => Ok(OutputFormat::Bmes),
            "entpos" | "entity-position" | "entityposition" => Ok(OutputFormat::EntityPosition),
            other => Err(format!("unknown output format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedText {
    pub text: String,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueReason {
    /// A marked or listed surface does not occur in the original sentence.
    SurfaceNotFound,
    /// An `@@` or `##` without its partner; the rest of the text is ignored.
    UnbalancedMarker,
    /// Tag count differs from the token count.
    LengthMismatch,
    /// The claimed start index was wrong; the surface was found elsewhere.
    PositionRepaired,
    /// An item carried no position; the surface was located by search.
    PositionMissing,
    /// A tag that is not `O` or `B/M/I/E/S-<type>`.
    InvalidTag,
    /// A tag transition that needed repair.
    TagTransitionRepaired,
    /// A span labelled with a type other than the one queried.
    TypeMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseIssue {
    pub surface: String,
    pub reason: IssueReason,
}

/// Outcome of parsing one generated output against its source sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub spans: Vec<EntitySpan>,
    /// Surfaces that could not be turned into spans.
    pub dropped: Vec<ParseIssue>,
    /// Spans kept after repair.
    pub repaired: Vec<ParseIssue>,
    /// The non-entity text differs from the original sentence.
    pub mutated: bool,
}

impl ParseReport {
    fn drop(&mut self, surface: impl Into<String>, reason: IssueReason) {
        self.dropped.push(ParseIssue {
            surface: surface.into(),
            reason,
        });
    }

    fn repair(&mut self, surface: impl Into<String>, reason: IssueReason) {
        self.repaired.push(ParseIssue {
            surface: surface.into(),
            reason,
        });
    }

    fn finish(mut self) -> Self {
        self.spans.sort();
        self.spans.dedup();
        self
    }
}

fn check_spans(sentence: &Sentence, spans: &[EntitySpan]) -> Result<Vec<EntitySpan>, MarkupError> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start > s.end || s.end >= sentence.len() {
            return Err(MarkupError::SpanOutOfRange {
                span: s.to_string(),
                len: sentence.len(),
            });
        }
    }
    for w in sorted.windows(2) {
        if w[0].ty != w[1].ty {
            return Err(MarkupError::MixedTypes(w[0].to_string(), w[1].to_string()));
        }
        if w[0].overlaps(&w[1]) {
            return Err(MarkupError::OverlappingSpans(w[0].to_string(), w[1].to_string()));
        }
    }
    Ok(sorted)
}

/// Keeps the outermost spans of a possibly nested same-type set, dropping
/// any span that overlaps an earlier-starting (or equal-start, longer) one.
/// Returns `(kept, removed)`.
pub fn outermost_only(spans: &[EntitySpan]) -> (Vec<EntitySpan>, Vec<EntitySpan>) {
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)).then(a.ty.cmp(&b.ty)));
    let mut kept: Vec<EntitySpan> = Vec::new();
    let mut removed = Vec::new();
    for s in sorted {
        if kept.last().is_some_and(|k| k.overlaps(&s)) {
            removed.push(s);
        } else {
            kept.push(s);
        }
    }
    (kept, removed)
}

fn needs_escape(token: &str) -> bool {
    token.contains(['@', '#', ESCAPE])
}

fn escape_token(token: &str) -> String {
    if !needs_escape(token) {
        return token.to_owned();
    }
    let mut out = String::with_capacity(token.len() + 4);
    for c in token.chars() {
        if matches!(c, '@' | '#' | ESCAPE) {
            out.push(ESCAPE);
        }
        out.push(c);
    }
    out
}

/// Copies the sentence, wrapping each span as `@@first ... last##`. Tokens
/// containing `@`, `#` or `\` are backslash-escaped.
pub fn encode_atmarker(sentence: &Sentence, spans: &[EntitySpan]) -> Result<MarkedText, MarkupError> {
    let spans = check_spans(sentence, spans)?;
    let mut words: Vec<String> = sentence.tokens.iter().map(|t| escape_token(t)).collect();
    for s in &spans {
        words[s.start].insert_str(0, OPEN);
        words[s.end].push_str(CLOSE);
    }
    Ok(MarkedText {
        text: words.join(" "),
        format: OutputFormat::AtMarker,
    })
}

enum Event {
    Char(char),
    Open,
    Close,
}

fn scan_markers(text: &str) -> Vec<(usize, Event)> {
    let mut events = Vec::with_capacity(text.len());
    let mut it = text.char_indices().peekable();
    while let Some((pos, c)) = it.next() {
        match c {
            ESCAPE => match it.next() {
                Some((_, next)) => events.push((pos, Event::Char(next))),
                None => events.push((pos, Event::Char(ESCAPE))),
            },
            '@' | '#' if it.peek().is_some_and(|&(_, n)| n == c) => {
                it.next();
                events.push((pos, if c == '@' { Event::Open } else { Event::Close }));
            }
            _ => events.push((pos, Event::Char(c))),
        }
    }
    events
}

fn find_tokens(haystack: &[String], needle: &[&str], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| matches_at(haystack, needle, i))
}

fn matches_at(haystack: &[String], needle: &[&str], at: usize) -> bool {
    !needle.is_empty()
        && at + needle.len() <= haystack.len()
        && haystack[at..at + needle.len()].iter().zip(needle).all(|(a, b)| a == b)
}

/// Parses `@@...##` output. Each marked surface is aligned to the original
/// tokens with a monotone cursor: the position implied by the preceding
/// text is tried first, then the earliest occurrence at or after the end of
/// the previous match.
pub fn parse_atmarker(original: &Sentence, generated: &str, ty: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let mut stripped = String::with_capacity(generated.len());
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut open_at: Option<(usize, usize)> = None; // (byte in generated, byte in stripped)
    let mut broken = false;

    for (pos, ev) in scan_markers(generated) {
        match ev {
            Event::Char(c) => stripped.push(c),
            _ if broken => {}
            Event::Open => {
                if open_at.is_some() {
                    broken = true;
                    report.drop(&generated[open_at.unwrap().0..], IssueReason::UnbalancedMarker);
                    open_at = None;
                } else {
                    open_at = Some((pos, stripped.len()));
                }
            }
            Event::Close => match open_at.take() {
                Some((_, start)) => segments.push((start, stripped.len())),
                None => {
                    broken = true;
                    report.drop(&generated[pos..], IssueReason::UnbalancedMarker);
                }
            },
        }
    }
    if let Some((pos, _)) = open_at {
        report.drop(&generated[pos..], IssueReason::UnbalancedMarker);
    }

    let mut cursor = 0usize;
    for (start, end) in segments {
        let surface = stripped[start..end].trim();
        let words: Vec<&str> = surface.split_whitespace().collect();
        let hint = stripped[..start].split_whitespace().count();
        let found = if hint >= cursor && matches_at(&original.tokens, &words, hint) {
            Some(hint)
        } else {
            find_tokens(&original.tokens, &words, cursor)
        };
        match found {
            Some(i) => {
                let last = i + words.len() - 1;
                report.spans.push(EntitySpan {
                    start: i,
                    end: last,
                    ty: ty.to_owned(),
                    surface: original.surface(i, last),
                });
                cursor = last + 1;
            }
            None => report.drop(surface, IssueReason::SurfaceNotFound),
        }
    }
    report.mutated = !stripped.split_whitespace().eq(original.tokens.iter().map(String::as_str));
    report.finish()
}

/// One tag per token: `B-`, `M-`, `E-`, `S-` or `O`.
pub fn encode_bmes(sentence: &Sentence, spans: &[EntitySpan]) -> Result<MarkedText, MarkupError> {
    let spans = check_spans(sentence, spans)?;
    let tags = spans_to_tags(sentence, &spans, TagScheme::Bioes).map_err(|e| {
        MarkupError::OverlappingSpans(e.to_string(), String::new())
    })?;
    let text = tags
        .iter()
        .map(|t| match t.strip_prefix("I-") {
            Some(ty) => format!("M-{ty}"),
            None => t.clone(),
        })
        .collect::<Vec<_>>()
        .join(" ");
    Ok(MarkedText {
        text,
        format: OutputFormat::Bmes,
    })
}

/// Parses a tag line. Tags beyond the shorter of the two lengths are
/// ignored and the mismatch recorded.
pub fn parse_bmes(original: &Sentence, generated: &str, ty: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let tags: Vec<&str> = generated.split_whitespace().collect();
    let n = original.len();
    if tags.len() != n {
        let extra = if tags.len() > n { tags[n..].join(" ") } else { String::new() };
        report.drop(extra, IssueReason::LengthMismatch);
        report.mutated = true;
    }
    let usable = &tags[..tags.len().min(n)];
    let (runs, issues) = decode_tags(usable, TagScheme::Bioes);
    for issue in issues {
        match issue {
            TagIssue::Invalid { tag, .. } => report.drop(tag, IssueReason::InvalidTag),
            TagIssue::Transition { tag, .. } => report.repair(tag, IssueReason::TagTransitionRepaired),
        }
    }
    for (start, end, run_ty) in runs {
        let surface = original.surface(start, end);
        if run_ty == ty {
            report.spans.push(EntitySpan {
                start,
                end,
                ty: run_ty,
                surface,
            });
        } else {
            report.drop(surface, IssueReason::TypeMismatch);
        }
    }
    report.finish()
}

/// `surface (start)` items joined by `, `; `None` when there are no spans.
pub fn encode_entpos(sentence: &Sentence, spans: &[EntitySpan]) -> Result<MarkedText, MarkupError> {
    let spans = check_spans(sentence, spans)?;
    let text = if spans.is_empty() {
        "None".to_owned()
    } else {
        spans
            .iter()
            .map(|s| format!("{} ({})", sentence.surface(s.start, s.end), s.start))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok(MarkedText {
        text,
        format: OutputFormat::EntityPosition,
    })
}

/// A `(digits)` group that ends an item: followed by end of text or a comma.
struct PosMarker {
    open: usize,
    after: usize,
    index: Option<usize>,
}

fn position_markers(text: &str) -> Vec<PosMarker> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'(' {
            let mut j = i + 1;
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < b.len() && b[j] == b')' {
                let rest = text[j + 1..].trim_start();
                if rest.is_empty() || text.as_bytes()[j + 1] == b',' {
                    out.push(PosMarker {
                        open: i,
                        after: j + 1,
                        index: text[i + 1..j].parse().ok(),
                    });
                }
            }
        }
        i += 1;
    }
    out
}

/// Parses `surface (start), ...` output. A surface that is not at its
/// claimed index is searched left-to-right (preferring occurrences not yet
/// claimed) and kept as repaired; absent surfaces are dropped.
pub fn parse_entpos(original: &Sentence, generated: &str, ty: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let text = generated.trim();
    let bare = text.trim_end_matches('.');
    if bare.is_empty() || bare.eq_ignore_ascii_case("none") {
        return report;
    }

    let markers = position_markers(text);
    let mut claimed: Vec<(Vec<String>, Option<usize>)> = Vec::new();
    let mut cursor = 0usize;
    let mut m = 0usize;
    while m < markers.len() {
        let candidates: Vec<usize> = (m..markers.len()).filter(|&c| markers[c].open >= cursor).collect();
        if candidates.is_empty() {
            break;
        }
        let exact = candidates.iter().copied().find(|&c| {
            let words: Vec<&str> = text[cursor..markers[c].open].split_whitespace().collect();
            markers[c]
                .index
                .is_some_and(|i| matches_at(&original.tokens, &words, i))
        });
        let pick = exact.unwrap_or(candidates[0]);
        let words = text[cursor..markers[pick].open]
            .split_whitespace()
            .map(str::to_owned)
            .collect();
        claimed.push((words, markers[pick].index));
        cursor = markers[pick].after;
        if text[cursor..].starts_with(',') {
            cursor += 1;
        }
        m = pick + 1;
    }
    for item in text[cursor.min(text.len())..].split(',') {
        let words: Vec<String> = item.split_whitespace().map(str::to_owned).collect();
        if !words.is_empty() {
            claimed.push((words, None));
        }
    }

    for (words, index) in claimed {
        let needle: Vec<&str> = words.iter().map(String::as_str).collect();
        let surface = needle.join(" ");
        if let Some(i) = index.filter(|&i| matches_at(&original.tokens, &needle, i)) {
            push_span(&mut report, original, i, needle.len(), ty);
            continue;
        }
        let taken = |i: usize| report.spans.iter().any(|s| s.start == i);
        let mut found = None;
        let mut from = 0;
        while let Some(i) = find_tokens(&original.tokens, &needle, from) {
            if !taken(i) {
                found = Some(i);
                break;
            }
            found.get_or_insert(i);
            from = i + 1;
        }
        match found {
            Some(i) => {
                let reason = if index.is_some() {
                    IssueReason::PositionRepaired
                } else {
                    IssueReason::PositionMissing
                };
                report.repair(surface, reason);
                push_span(&mut report, original, i, needle.len(), ty);
            }
            None => report.drop(surface, IssueReason::SurfaceNotFound),
        }
    }
    report.finish()
}

fn push_span(report: &mut ParseReport, sentence: &Sentence, start: usize, len: usize, ty: &str) {
    let end = start + len - 1;
    report.spans.push(EntitySpan {
        start,
        end,
        ty: ty.to_owned(),
        surface: sentence.surface(start, end),
    });
}

pub fn encode(format: OutputFormat, sentence: &Sentence, spans: &[EntitySpan]) -> Result<MarkedText, MarkupError> {
    match format {
        OutputFormat::AtMarker => encode_atmarker(sentence, spans),
        OutputFormat::Bmes => encode_bmes(sentence, spans),
        OutputFormat::EntityPosition => encode_entpos(sentence, spans),
    }
}

pub fn parse(format: OutputFormat, original: &Sentence, generated: &str, ty: &str) -> ParseReport {
    match format {
        OutputFormat::AtMarker => parse_atmarker(original, generated, ty),
        OutputFormat::Bmes => parse_bmes(original, generated, ty),
        OutputFormat::EntityPosition => parse_entpos(original, generated, ty),
    }
}
