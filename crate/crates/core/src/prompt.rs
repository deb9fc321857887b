//! Prompts as ordered, labeled segments.
//!
//! A prompt is a sequence of template glue and content segments. Each
//! content segment is one attribution feature; glue (headers, instructions)
//! is never permuted. Removing a segment replaces its text with the empty
//! string and collapses the whitespace where the surrounding glue meets.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTION_DEFS: &str = include_str!("../templates/action_defs.txt");
pub const CONSTRAINTS: &str = include_str!("../templates/constraints.txt");
pub const PLANNING_TEMPLATE: &str = include_str!("../templates/planning.txt");
pub const PLANNING_WITH_INSIGHTS_TEMPLATE: &str = include_str!("../templates/planning_with_insights.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template error: {0}")]
    Template(String),
    #[error("template slot {0} has no value")]
    MissingSegment(SegmentKind),
    #[error("unknown segment {0}")]
    UnknownSegment(String),
    #[error("span {start}..{end} is out of bounds for a prompt of {len} bytes")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("span {start}..{end} is not contained in a single segment")]
    SpanCrossesSegments { start: usize, end: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    ActionDefs,
    Constraints,
    Question,
    EpisodicMemory,
    Background,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::ActionDefs,
        SegmentKind::Constraints,
        SegmentKind::Question,
        SegmentKind::EpisodicMemory,
        SegmentKind::Background,
    ];

    /// Template placeholder name.
    pub fn slot(self) -> &'static str {
        match self {
            SegmentKind::ActionDefs => "action_defs",
            SegmentKind::Constraints => "constraints",
            SegmentKind::Question => "question",
            SegmentKind::EpisodicMemory => "insight_set",
            SegmentKind::Background => "background",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SegmentKind::ActionDefs => "action_defs",
            SegmentKind::Constraints => "constraints",
            SegmentKind::Question => "question",
            SegmentKind::EpisodicMemory => "episodic_memory",
            SegmentKind::Background => "background",
        }
    }

    fn from_slot(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.slot() == name)
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A feature of the prompt: a whole component, or one sentence / insight
/// of a component when the prompt is split fine-grained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentId {
    pub kind: SegmentKind,
    pub ordinal: Option<usize>,
}

impl SegmentId {
    pub const fn whole(kind: SegmentKind) -> Self {
        Self { kind, ordinal: None }
    }

    pub const fn fine(kind: SegmentKind, ordinal: usize) -> Self {
        Self { kind, ordinal: Some(ordinal) }
    }

    pub fn is_fine_grained(&self) -> bool {
        self.ordinal.is_some()
    }

    /// True if `self` names `other` itself or is the parent of `other`.
    pub fn covers(&self, other: &SegmentId) -> bool {
        self == other || (self.ordinal.is_none() && self.kind == other.kind)
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ordinal {
            None => write!(f, "{}", self.kind),
            Some(i) => write!(f, "{}[{i}]", self.kind),
        }
    }
}

impl FromStr for SegmentId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || PromptError::UnknownSegment(s.to_string());
        let (label, ordinal) = match s.split_once('[') {
            Some((label, rest)) => {
                let n = rest.strip_suffix(']').ok_or_else(unknown)?;
                (label, Some(n.parse().map_err(|_| unknown())?))
            }
            None => (s, None),
        };
        let kind = SegmentKind::ALL.into_iter().find(|k| k.label() == label).ok_or_else(unknown)?;
        Ok(Self { kind, ordinal })
    }
}

impl Serialize for SegmentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Glue(String),
    Segment { id: SegmentId, text: String },
}

/// Rendered prompt with the byte span of every segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedPrompt {
    pieces: Vec<Piece>,
    rendered: String,
    spans: Vec<(SegmentId, Range<usize>)>,
}

/// What to remove from a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PermutationTarget {
    /// A segment, or every fine-grained child of a whole-component id.
    Segment(SegmentId),
    /// A byte range of the rendered prompt inside one segment.
    Span(Range<usize>),
}

/// Only deletion is supported: the target is replaced by the empty string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ReplacementPolicy {
    #[default]
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSpec {
    pub target: PermutationTarget,
    pub policy: ReplacementPolicy,
}

impl PermutationSpec {
    pub fn segment(id: SegmentId) -> Self {
        Self { target: PermutationTarget::Segment(id), policy: ReplacementPolicy::Delete }
    }

    pub fn span(range: Range<usize>) -> Self {
        Self { target: PermutationTarget::Span(range), policy: ReplacementPolicy::Delete }
    }
}

fn leading_ws(s: &str) -> usize {
    s.len() - s.trim_start().len()
}

fn trailing_ws(s: &str) -> usize {
    s.len() - s.trim_end().len()
}

impl SegmentedPrompt {
    fn from_pieces(pieces: Vec<Piece>) -> Self {
        let mut rendered = String::new();
        let mut spans: Vec<(SegmentId, Range<usize>)> = Vec::new();
        // Start of the glue emitted since the last non-empty segment; only
        // this region may be trimmed when collapsing.
        let mut glue_since = 0usize;
        let mut collapse = false;
        for piece in &pieces {
            match piece {
                Piece::Glue(g) if collapse => {
                    let tail = trailing_ws(&rendered[glue_since..]);
                    let head = leading_ws(g);
                    let strength = |ws: &str| (ws.matches('\n').count(), ws.len());
                    if strength(&g[..head]) <= strength(&rendered[rendered.len() - tail..]) {
                        rendered.push_str(&g[head..]);
                    } else {
                        let keep = rendered.len() - tail;
                        rendered.truncate(keep);
                        for (_, span) in spans.iter_mut().filter(|(_, s)| s.start > keep) {
                            *span = keep..keep;
                        }
                        rendered.push_str(g);
                    }
                    collapse = g.trim().is_empty();
                }
                Piece::Glue(g) => rendered.push_str(g),
                Piece::Segment { id, text } => {
                    let start = rendered.len();
                    rendered.push_str(text);
                    spans.push((*id, start..rendered.len()));
                    if text.is_empty() {
                        collapse = true;
                    } else {
                        collapse = false;
                        glue_since = rendered.len();
                    }
                }
            }
        }
        Self { pieces, rendered, spans }
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }

    /// Segment ids in prompt order.
    pub fn segment_ids(&self) -> Vec<SegmentId> {
        self.spans.iter().map(|(id, _)| *id).collect()
    }

    pub fn spans(&self) -> &[(SegmentId, Range<usize>)] {
        &self.spans
    }

    pub fn segment_text(&self, id: &SegmentId) -> Option<&str> {
        self.pieces.iter().find_map(|p| match p {
            Piece::Segment { id: pid, text } if pid == id => Some(text.as_str()),
            _ => None,
        })
    }

    pub fn has_segment(&self, id: &SegmentId) -> bool {
        self.spans.iter().any(|(sid, _)| id.covers(sid))
    }

    pub fn is_fine_grained(&self) -> bool {
        self.spans.iter().any(|(id, _)| id.is_fine_grained())
    }

    /// Returns a copy with the target removed; every other segment's text is
    /// byte-identical.
    pub fn permute(&self, spec: &PermutationSpec) -> Result<SegmentedPrompt, PromptError> {
        let ReplacementPolicy::Delete = spec.policy;
        match &spec.target {
            PermutationTarget::Segment(target) => {
                if !self.has_segment(target) {
                    return Err(PromptError::UnknownSegment(target.to_string()));
                }
                let pieces = self
                    .pieces
                    .iter()
                    .map(|p| match p {
                        Piece::Segment { id, .. } if target.covers(id) => {
                            Piece::Segment { id: *id, text: String::new() }
                        }
                        other => other.clone(),
                    })
                    .collect();
                Ok(Self::from_pieces(pieces))
            }
            PermutationTarget::Span(range) => self.remove_span(range.clone()),
        }
    }

    /// Removes a byte range that lies inside a single segment, e.g. an
    /// attribute value such as a price inside background text.
    pub fn mask_attribute(&self, span: Range<usize>) -> Result<SegmentedPrompt, PromptError> {
        self.permute(&PermutationSpec::span(span))
    }

    fn remove_span(&self, range: Range<usize>) -> Result<SegmentedPrompt, PromptError> {
        let Range { start, end } = range;
        let len = self.rendered.len();
        if start > end || end > len || !self.rendered.is_char_boundary(start) || !self.rendered.is_char_boundary(end) {
            return Err(PromptError::SpanOutOfBounds { start, end, len });
        }
        let (target, seg_span) = self
            .spans
            .iter()
            .find(|(_, s)| s.start <= start && end <= s.end && s.start < s.end)
            .ok_or(PromptError::SpanCrossesSegments { start, end })?;
        let local = (start - seg_span.start)..(end - seg_span.start);
        let pieces = self
            .pieces
            .iter()
            .map(|p| match p {
                Piece::Segment { id, text } if id == target => {
                    let mut t = text.clone();
                    t.replace_range(local.clone(), "");
                    Piece::Segment { id: *id, text: t }
                }
                other => other.clone(),
            })
            .collect();
        Ok(Self::from_pieces(pieces))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TemplatePiece {
    Literal(String),
    Slot(SegmentKind),
}

/// Prompt template with `{action_defs}`, `{constraints}`, `{insight_set}`,
/// `{question}` and `{background}` placeholders. `{{` and `}}` escape braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<TemplatePiece>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut pieces = Vec::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(i) = rest.find(['{', '}']) {
            literal.push_str(&rest[..i]);
            let tail = &rest[i..];
            if let Some(after) = tail.strip_prefix("{{") {
                literal.push('{');
                rest = after;
            } else if let Some(after) = tail.strip_prefix("}}") {
                literal.push('}');
                rest = after;
            } else if tail.starts_with('}') {
                return Err(PromptError::Template("unmatched '}'".into()));
            } else {
                let close = tail.find('}').ok_or_else(|| PromptError::Template("unterminated placeholder".into()))?;
                let name = &tail[1..close];
                let kind = SegmentKind::from_slot(name)
                    .ok_or_else(|| PromptError::Template(format!("unknown placeholder {{{name}}}")))?;
                if pieces.contains(&TemplatePiece::Slot(kind)) {
                    return Err(PromptError::Template(format!("duplicate placeholder {{{name}}}")));
                }
                if !literal.is_empty() {
                    pieces.push(TemplatePiece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(TemplatePiece::Slot(kind));
                rest = &tail[close + 1..];
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            pieces.push(TemplatePiece::Literal(literal));
        }
        Ok(Self { pieces })
    }

    pub fn slots(&self) -> Vec<SegmentKind> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                TemplatePiece::Slot(k) => Some(*k),
                TemplatePiece::Literal(_) => None,
            })
            .collect()
    }

    /// Instantiates the template. Every slot needs a value; with
    /// `fine_grained`, constraints are split per sentence and the insight
    /// set per line.
    pub fn instantiate(
        &self,
        values: &[(SegmentKind, &str)],
        fine_grained: bool,
    ) -> Result<SegmentedPrompt, PromptError> {
        let mut pieces = Vec::new();
        for piece in &self.pieces {
            match piece {
                TemplatePiece::Literal(s) => pieces.push(Piece::Glue(s.clone())),
                TemplatePiece::Slot(kind) => {
                    let text = values
                        .iter()
                        .find(|(k, _)| k == kind)
                        .map(|(_, v)| *v)
                        .ok_or(PromptError::MissingSegment(*kind))?;
                    let parts = match (fine_grained, kind) {
                        (true, SegmentKind::Constraints) => split_sentences(text),
                        (true, SegmentKind::EpisodicMemory) => split_lines(text),
                        _ => vec![Part::Content(text.to_string())],
                    };
                    let split = fine_grained && matches!(kind, SegmentKind::Constraints | SegmentKind::EpisodicMemory);
                    let mut ordinal = 0;
                    for part in parts {
                        match part {
                            Part::Glue(g) => pieces.push(Piece::Glue(g)),
                            Part::Content(t) => {
                                let id = if split { SegmentId::fine(*kind, ordinal) } else { SegmentId::whole(*kind) };
                                ordinal += 1;
                                pieces.push(Piece::Segment { id, text: t });
                            }
                        }
                    }
                }
            }
        }
        Ok(SegmentedPrompt::from_pieces(pieces))
    }
}

enum Part {
    Glue(String),
    Content(String),
}

/// Sentences end at `.`, `!`, `?` or `:` followed by whitespace or the end of
/// the text. Sentences ending in `:` are headers and become glue.
fn split_sentences(text: &str) -> Vec<Part> {
    let mut parts = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut start = 0;
    let push_ws = |parts: &mut Vec<Part>, ws: &str| {
        if !ws.is_empty() {
            parts.push(Part::Glue(ws.to_string()));
        }
    };
    while i < bytes.len() {
        let c = bytes[i];
        let at_end = i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace();
        if matches!(c, b'.' | b'!' | b'?' | b':') && at_end {
            let sentence = &text[start..=i];
            let lead = leading_ws(sentence);
            push_ws(&mut parts, &sentence[..lead]);
            let body = &sentence[lead..];
            if c == b':' {
                parts.push(Part::Glue(body.to_string()));
            } else {
                parts.push(Part::Content(body.to_string()));
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail = &text[start..];
    if !tail.trim().is_empty() {
        let lead = leading_ws(tail);
        push_ws(&mut parts, &tail[..lead]);
        let body = tail[lead..].trim_end();
        parts.push(Part::Content(body.to_string()));
        push_ws(&mut parts, &tail[lead + body.len()..]);
    } else {
        push_ws(&mut parts, tail);
    }
    merge_glue(parts)
}

fn split_lines(text: &str) -> Vec<Part> {
    let mut parts = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            parts.push(Part::Glue("\n".into()));
        }
        if !line.is_empty() {
            parts.push(Part::Content(line.to_string()));
        }
    }
    merge_glue(parts)
}

fn merge_glue(parts: Vec<Part>) -> Vec<Part> {
    let mut out: Vec<Part> = Vec::with_capacity(parts.len());
    for part in parts {
        match (out.last_mut(), part) {
            (Some(Part::Glue(prev)), Part::Glue(g)) => prev.push_str(&g),
            (_, p) => out.push(p),
        }
    }
    out
}

/// Inputs of a BlocksWorld planning prompt.
#[derive(Debug, Clone, Copy)]
pub struct PlanningParts<'a> {
    pub action_defs: &'a str,
    /// Empty to ablate the constraint descriptions.
    pub constraints: &'a str,
    pub question: &'a str,
    /// Formatted visible insights, one per line; `None` selects the
    /// template without episodic memory.
    pub insights: Option<&'a [String]>,
}

/// Builds the planning prompt from the shipped templates.
pub fn assemble(parts: &PlanningParts<'_>, fine_grained: bool) -> Result<SegmentedPrompt, PromptError> {
    if parts.action_defs.trim().is_empty() {
        return Err(PromptError::MissingSegment(SegmentKind::ActionDefs));
    }
    if parts.question.trim().is_empty() {
        return Err(PromptError::MissingSegment(SegmentKind::Question));
    }
    let joined;
    let mut values = vec![
        (SegmentKind::ActionDefs, parts.action_defs),
        (SegmentKind::Constraints, parts.constraints),
        (SegmentKind::Question, parts.question),
    ];
    let template = match parts.insights {
        Some(lines) => {
            joined = lines.join("\n");
            values.push((SegmentKind::EpisodicMemory, joined.as_str()));
            Template::parse(PLANNING_WITH_INSIGHTS_TEMPLATE)?
        }
        None => Template::parse(PLANNING_TEMPLATE)?,
    };
    template.instantiate(&values, fine_grained)
}

/// Planning prompt for one instance with the shipped action definitions
/// and, unless ablated, the shipped constraints.
pub fn blocksworld_prompt(
    instance: &crate::blocksworld::Instance,
    with_constraints: bool,
    insights: Option<&[String]>,
    fine_grained: bool,
) -> Result<SegmentedPrompt, PromptError> {
    let question = crate::blocksworld::render_instance(instance).question;
    assemble(
        &PlanningParts {
            action_defs: ACTION_DEFS,
            constraints: if with_constraints { CONSTRAINTS } else { "" },
            question: &question,
            insights,
        },
        fine_grained,
    )
}
