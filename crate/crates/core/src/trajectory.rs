//! Tagged trajectory data model.
//!
//! A trajectory is a query plus a list of steps. Each step is a flat sequence
//! of tagged segments in the order `Mem? Think (ToolCall Information? | Answer)`.
//! Tags are reserved vocabulary tokens, so a segment's token span is
//! `[open, content.., close]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ParseError, ParseErrorKind, TrajectoryIoError};
use crate::vocab::{Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Mem,
    Think,
    ToolCall,
    Information,
    Answer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::Mem,
        SegmentKind::Think,
        SegmentKind::ToolCall,
        SegmentKind::Information,
        SegmentKind::Answer,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn tag_name(self) -> &'static str {
        match self {
            SegmentKind::Mem => "mem",
            SegmentKind::Think => "think",
            SegmentKind::ToolCall => "tool_call",
            SegmentKind::Information => "information",
            SegmentKind::Answer => "answer",
        }
    }

    pub fn from_tag_name(name: &str) -> Option<Self> {
        SegmentKind::ALL.into_iter().find(|k| k.tag_name() == name)
    }

    pub fn source(self) -> Source {
        match self {
            SegmentKind::Information => Source::EnvironmentReturned,
            _ => Source::PolicyGenerated,
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    PolicyGenerated,
    EnvironmentReturned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub tokens: Vec<Token>,
}

impl Segment {
    pub fn new(kind: SegmentKind, tokens: Vec<Token>) -> Self {
        Segment { kind, tokens }
    }

    pub fn source(&self) -> Source {
        self.kind.source()
    }

    /// Number of tokens including the two tags.
    pub fn span_len(&self) -> usize {
        self.tokens.len() + 2
    }

    /// Appends `[open, content.., close]` to `out`.
    pub fn push_span(&self, vocab_tags: &TagTokens, out: &mut Vec<Token>) {
        out.push(vocab_tags.open(self.kind));
        out.extend_from_slice(&self.tokens);
        out.push(vocab_tags.close(self.kind));
    }
}

/// Tag token ids. They are fixed by [`Vocabulary`] construction, so this is
/// usable without a vocabulary reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct TagTokens;

impl TagTokens {
    #[inline]
    pub fn open(self, kind: SegmentKind) -> Token {
        Token((kind.ordinal() * 2) as u32)
    }

    #[inline]
    pub fn close(self, kind: SegmentKind) -> Token {
        Token((kind.ordinal() * 2 + 1) as u32)
    }

    #[inline]
    pub fn classify(self, token: Token) -> Option<(SegmentKind, bool)> {
        let i = token.index();
        (i < 10).then(|| (SegmentKind::ALL[i / 2], i % 2 == 1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    /// 1-based.
    pub index: usize,
    pub segments: Vec<Segment>,
}

impl Step {
    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn memory(&self) -> Option<&Segment> {
        self.segment(SegmentKind::Mem)
    }

    /// Full token span of the step, environment segments included.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    pub fn push_tokens(&self, out: &mut Vec<Token>) {
        for s in &self.segments {
            s.push_span(&TagTokens, out);
        }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::span_len).sum()
    }

    /// Token span produced by the policy (everything but `Information`).
    pub fn generated_tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for s in self.segments.iter().filter(|s| s.source() == Source::PolicyGenerated) {
            s.push_span(&TagTokens, &mut out);
        }
        out
    }

    pub fn generated_len(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.source() == Source::PolicyGenerated)
            .map(Segment::span_len)
            .sum()
    }

    /// Segment kind of every generated token, aligned with
    /// [`Step::generated_tokens`].
    pub fn generated_kinds(&self) -> Vec<SegmentKind> {
        let mut out = Vec::new();
        for s in self.segments.iter().filter(|s| s.source() == Source::PolicyGenerated) {
            out.extend(std::iter::repeat(s.kind).take(s.span_len()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    TurnLimit,
    FormatFailure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub query: Vec<Token>,
    pub steps: Vec<Step>,
    pub predicted_answer: Option<Vec<Token>>,
    pub terminated: Termination,
    /// Raw output of the step that failed to parse, when
    /// `terminated == FormatFailure`. Kept so training can penalize it.
    pub malformed_tail: Option<Vec<Token>>,
}

impl Trajectory {
    /// Number of policy-generated tokens over all steps.
    pub fn generated_len(&self) -> usize {
        self.steps.iter().map(Step::generated_len).sum::<usize>()
            + self.malformed_tail.as_ref().map_or(0, Vec::len)
    }

    /// Every policy call of the episode with the context it saw and the
    /// tokens it produced.
    pub fn policy_turns(&self, mode: ContextMode) -> Vec<PolicyTurn> {
        let mut turns = Vec::with_capacity(self.steps.len() + 1);
        for (i, step) in self.steps.iter().enumerate() {
            let context = build_context(&self.query, &self.steps[..i], mode);
            let kinds = step.generated_kinds();
            turns.push(PolicyTurn {
                step: step.index,
                context,
                tokens: step.generated_tokens(),
                memory_mask: kinds.iter().map(|k| *k == SegmentKind::Mem).collect(),
            });
        }
        if let Some(tail) = &self.malformed_tail {
            turns.push(PolicyTurn {
                step: self.steps.len() + 1,
                context: build_context(&self.query, &self.steps, mode),
                tokens: tail.clone(),
                memory_mask: vec![false; tail.len()],
            });
        }
        turns
    }
}

/// One policy call: context in, tokens out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTurn {
    /// 1-based step number the tokens belong to.
    pub step: usize,
    pub context: Context,
    pub tokens: Vec<Token>,
    /// True for tokens inside the step's memory segment, tags included.
    pub memory_mask: Vec<bool>,
}

// ---------------------------------------------------------------------------
// Step grammar

/// Validates the kind sequence of one step against
/// `Mem? Think (ToolCall Information? | Answer)`.
///
/// `complete` additionally requires the step to carry an action. Returns the
/// index of the offending segment on failure.
pub fn check_order(kinds: &[SegmentKind], complete: bool) -> Result<(), (usize, OrderError)> {
    use SegmentKind::*;
    let mut seen = [false; 5];
    let mut rank = 0u8;
    for (i, &k) in kinds.iter().enumerate() {
        if seen[k.ordinal()] {
            return Err((i, OrderError::Duplicate(k)));
        }
        seen[k.ordinal()] = true;
        let r = match k {
            Mem => 0,
            Think => 1,
            ToolCall | Answer => 2,
            Information => 3,
        };
        if r < rank {
            return Err((i, OrderError::OutOfOrder(k)));
        }
        match k {
            ToolCall | Answer if !seen[Think.ordinal()] => {
                return Err((i, OrderError::MissingThink));
            }
            ToolCall if seen[Answer.ordinal()] => return Err((i, OrderError::CallAndAnswer)),
            Answer if seen[ToolCall.ordinal()] => return Err((i, OrderError::CallAndAnswer)),
            Information if !seen[ToolCall.ordinal()] => return Err((i, OrderError::OutOfOrder(k))),
            _ => {}
        }
        rank = r;
    }
    if complete && !seen[ToolCall.ordinal()] && !seen[Answer.ordinal()] {
        if !seen[Think.ordinal()] {
            return Err((kinds.len(), OrderError::MissingThink));
        }
        return Err((kinds.len(), OrderError::MissingAction));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderError {
    Duplicate(SegmentKind),
    OutOfOrder(SegmentKind),
    MissingThink,
    MissingAction,
    CallAndAnswer,
}

/// Parses the raw text of one interaction step.
pub fn parse_step(text: &str, index: usize, vocab: &Vocabulary) -> Result<Step, ParseError> {
    let mut segments: Vec<Segment> = Vec::new();
    let mut offsets: Vec<usize> = Vec::new();
    let mut pos = 0;
    let err = |kind, offset| ParseError { kind, offset };

    while pos < text.len() {
        let rest = &text[pos..];
        let c = rest.chars().next().expect("in bounds");
        if c.is_whitespace() {
            pos += c.len_utf8();
            continue;
        }
        if c != '<' {
            return Err(err(ParseErrorKind::StrayText, pos));
        }
        let (name, close, tag_len) = read_tag(text, pos)?;
        let kind = SegmentKind::from_tag_name(name)
            .ok_or_else(|| err(ParseErrorKind::UnknownTag(name.to_string()), pos))?;
        if close {
            return Err(err(ParseErrorKind::UnexpectedClose(kind), pos));
        }
        let open_at = pos;
        let body_start = pos + tag_len;
        // Content runs to the next '<', which must be the matching close tag.
        let body_end = match text[body_start..].find('<') {
            Some(e) => body_start + e,
            None => return Err(err(ParseErrorKind::UnclosedTag(kind), open_at)),
        };
        let (inner, inner_close, inner_len) = read_tag(text, body_end)?;
        match SegmentKind::from_tag_name(inner) {
            None => return Err(err(ParseErrorKind::UnknownTag(inner.to_string()), body_end)),
            Some(k) if !inner_close => {
                let _ = k;
                return Err(err(ParseErrorKind::NestedTag, body_end));
            }
            Some(k) if k != kind => {
                return Err(err(ParseErrorKind::UnexpectedClose(k), body_end));
            }
            Some(_) => {}
        }
        let body = &text[body_start..body_end];
        if body.contains('>') {
            return Err(err(ParseErrorKind::StrayText, body_start + body.find('>').unwrap()));
        }
        let tokens = vocab.tokenize(body).map_err(|e| match e {
            crate::error::VocabError::OutOfVocabulary { word, offset } => {
                err(ParseErrorKind::OutOfVocabulary(word), body_start + offset)
            }
            other => err(ParseErrorKind::OutOfVocabulary(other.to_string()), body_start),
        })?;
        segments.push(Segment::new(kind, tokens));
        offsets.push(open_at);
        pos = body_end + inner_len;
    }

    let kinds: Vec<_> = segments.iter().map(|s| s.kind).collect();
    check_order(&kinds, true).map_err(|(i, e)| {
        let offset = offsets.get(i).copied().unwrap_or(text.len());
        let kind = match e {
            OrderError::Duplicate(k) => ParseErrorKind::DuplicateSegment(k),
            OrderError::OutOfOrder(k) => ParseErrorKind::IllegalOrder(k),
            OrderError::MissingThink => ParseErrorKind::IllegalOrder(
                kinds.get(i).copied().unwrap_or(SegmentKind::Think),
            ),
            OrderError::CallAndAnswer => ParseErrorKind::IllegalOrder(kinds[i]),
            OrderError::MissingAction => ParseErrorKind::IncompleteStep,
        };
        err(kind, offset)
    })?;
    Ok(Step { index, segments })
}

/// Reads `<name>` or `</name>` starting at `pos`. Returns (name, is_close, byte length).
fn read_tag(text: &str, pos: usize) -> Result<(&str, bool, usize), ParseError> {
    let rest = &text[pos..];
    debug_assert!(rest.starts_with('<'));
    let end = match rest.find('>') {
        Some(e) => e,
        None => {
            return Err(ParseError {
                kind: ParseErrorKind::UnknownTag(rest.to_string()),
                offset: pos,
            })
        }
    };
    let inside = &rest[1..end];
    let (name, close) = match inside.strip_prefix('/') {
        Some(n) => (n, true),
        None => (inside, false),
    };
    if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '<') {
        return Err(ParseError {
            kind: ParseErrorKind::UnknownTag(rest[..=end].to_string()),
            offset: pos,
        });
    }
    Ok((name, close, end + 1))
}

/// Canonical text form: one segment per line, content tokens space-separated.
pub fn render_step(step: &Step, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, seg) in step.segments.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_segment(seg, vocab, &mut out);
    }
    out
}

fn render_segment(seg: &Segment, vocab: &Vocabulary, out: &mut String) {
    let name = seg.kind.tag_name();
    out.push('<');
    out.push_str(name);
    out.push('>');
    out.push_str(&vocab.detokenize(&seg.tokens));
    out.push_str("</");
    out.push_str(name);
    out.push('>');
}

// ---------------------------------------------------------------------------
// Format checking

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    StepIndex { step: usize },
    MissingThink { step: usize },
    IllegalOrder { step: usize, kind: SegmentKind },
    DuplicateSegment { step: usize, kind: SegmentKind },
    MissingAction { step: usize },
    CallAndAnswer { step: usize },
    MissingMemory { step: usize },
    EmptyMemory { step: usize },
    AnswerNotFinal { step: usize },
    NotAnswered { terminated: Termination },
    AnswerMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FormatVerdict {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

/// Structural check of a full trajectory. A trajectory that did not end with
/// an answer is never valid.
pub fn check_format(traj: &Trajectory) -> FormatVerdict {
    let mut violations = Vec::new();
    let last = traj.steps.len();
    for (i, step) in traj.steps.iter().enumerate() {
        let t = i + 1;
        if step.index != t {
            violations.push(Violation::StepIndex { step: t });
        }
        let kinds: Vec<_> = step.segments.iter().map(|s| s.kind).collect();
        if let Err((j, e)) = check_order(&kinds, true) {
            violations.push(match e {
                OrderError::Duplicate(kind) => Violation::DuplicateSegment { step: t, kind },
                OrderError::OutOfOrder(kind) => Violation::IllegalOrder { step: t, kind },
                OrderError::MissingThink => Violation::MissingThink { step: t },
                OrderError::MissingAction => Violation::MissingAction { step: t },
                OrderError::CallAndAnswer => {
                    let _ = j;
                    Violation::CallAndAnswer { step: t }
                }
            });
        }
        match step.memory() {
            None if t >= 2 => violations.push(Violation::MissingMemory { step: t }),
            Some(m) if t >= 2 && m.tokens.is_empty() => {
                violations.push(Violation::EmptyMemory { step: t })
            }
            _ => {}
        }
        if step.segment(SegmentKind::Answer).is_some() && t != last {
            violations.push(Violation::AnswerNotFinal { step: t });
        }
    }
    if traj.terminated != Termination::Answered {
        violations.push(Violation::NotAnswered {
            terminated: traj.terminated,
        });
    } else {
        let final_answer = traj
            .steps
            .last()
            .and_then(|s| s.segment(SegmentKind::Answer))
            .map(|s| &s.tokens);
        if final_answer.is_none() || final_answer != traj.predicted_answer.as_ref() {
            violations.push(Violation::AnswerMismatch);
        }
    }
    FormatVerdict {
        valid: violations.is_empty(),
        violations,
    }
}

// ---------------------------------------------------------------------------
// Contexts and token accounting

/// Which prior steps the policy sees when generating step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Query plus the previous step only. Anything older survives solely
    /// through that step's memory segment.
    Truncated,
    /// Query plus every prior step (plain ReAct).
    Full,
    /// Query plus the last `k` full steps.
    Window(usize),
}

impl ContextMode {
    /// Number of most recent prior steps kept; `None` keeps all.
    pub fn retained_steps(self) -> Option<usize> {
        match self {
            ContextMode::Truncated => Some(1),
            ContextMode::Full => None,
            ContextMode::Window(k) => Some(k),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextMode::Truncated => f.write_str("truncated"),
            ContextMode::Full => f.write_str("full"),
            ContextMode::Window(k) => write!(f, "window:{k}"),
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "truncated" => Ok(ContextMode::Truncated),
            "full" => Ok(ContextMode::Full),
            _ => match s.strip_prefix("window:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(ContextMode::Window(k)),
                _ => Err(format!(
                    "invalid context mode `{s}` (expected truncated, full or window:<k>=1..)"
                )),
            },
        }
    }
}

/// Conditioning context for one policy call: the query and the retained
/// history, kept apart so the policy can read the query positionally.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Context {
    pub query: Vec<Token>,
    pub body: Vec<Token>,
}

impl Context {
    pub fn new(query: Vec<Token>, body: Vec<Token>) -> Self {
        Context { query, body }
    }

    pub fn len(&self) -> usize {
        self.query.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query and body as one sequence.
    pub fn flatten(&self) -> Vec<Token> {
        let mut v = self.query.clone();
        v.extend_from_slice(&self.body);
        v
    }
}

/// Context fed to the policy for the step following `prior`.
pub fn build_context(query: &[Token], prior: &[Step], mode: ContextMode) -> Context {
    let keep = mode.retained_steps().unwrap_or(prior.len()).min(prior.len());
    let mut body = Vec::new();
    for s in &prior[prior.len() - keep..] {
        s.push_tokens(&mut body);
    }
    Context::new(query.to_vec(), body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub total_tokens: usize,
    pub peak_step_tokens: usize,
}

/// Tokens consumed per step: the context fed to the policy plus what it
/// generated. Summed for the total, maximized for the peak.
pub fn token_usage(traj: &Trajectory, mode: ContextMode) -> TokenUsage {
    let q = traj.query.len();
    let keep = mode.retained_steps();
    let mut usage = TokenUsage::default();
    for t in 0..traj.steps.len() {
        let from = keep.map_or(0, |k| t.saturating_sub(k));
        let ctx: usize = traj.steps[from..t].iter().map(Step::total_len).sum();
        let step_tokens = q + ctx + traj.steps[t].generated_len();
        usage.total_tokens += step_tokens;
        usage.peak_step_tokens = usage.peak_step_tokens.max(step_tokens);
    }
    if let Some(tail) = &traj.malformed_tail {
        let t = traj.steps.len();
        let from = keep.map_or(0, |k| t.saturating_sub(k));
        let ctx: usize = traj.steps[from..].iter().map(Step::total_len).sum();
        let step_tokens = q + ctx + tail.len();
        usage.total_tokens += step_tokens;
        usage.peak_step_tokens = usage.peak_step_tokens.max(step_tokens);
    }
    usage
}

// ---------------------------------------------------------------------------
// JSONL interchange

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub kind: SegmentKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub segments: Vec<SegmentRecord>,
}

/// One line of a trajectory JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub query: String,
    pub steps: Vec<StepRecord>,
    pub predicted_answer: Option<String>,
    pub terminated: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malformed_tail: Option<String>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory, vocab: &Vocabulary) -> Self {
        TrajectoryRecord {
            query: vocab.detokenize(&traj.query),
            steps: traj
                .steps
                .iter()
                .map(|s| StepRecord {
                    index: s.index,
                    segments: s
                        .segments
                        .iter()
                        .map(|g| SegmentRecord {
                            kind: g.kind,
                            text: vocab.detokenize(&g.tokens),
                        })
                        .collect(),
                })
                .collect(),
            predicted_answer: traj.predicted_answer.as_ref().map(|a| vocab.detokenize(a)),
            terminated: traj.terminated,
            malformed_tail: traj.malformed_tail.as_ref().map(|t| vocab.detokenize(t)),
        }
    }

    /// Rebuilds the structured form. Segment order is not validated here;
    /// that is [`check_format`]'s job.
    pub fn to_trajectory(&self, vocab: &Vocabulary) -> Result<Trajectory, TrajectoryIoError> {
        let tok = |s: &str| vocab.tokenize(s).map_err(TrajectoryIoError::Vocab);
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let mut segments = Vec::with_capacity(s.segments.len());
            for g in &s.segments {
                let tokens = tok(&g.text)?;
                if tokens.iter().any(|t| t.index() < crate::vocab::TAGS.len()) {
                    return Err(TrajectoryIoError::TagInContent { step: s.index });
                }
                segments.push(Segment::new(g.kind, tokens));
            }
            steps.push(Step {
                index: s.index,
                segments,
            });
        }
        Ok(Trajectory {
            query: tok(&self.query)?,
            steps,
            predicted_answer: self.predicted_answer.as_deref().map(tok).transpose()?,
            terminated: self.terminated,
            malformed_tail: self.malformed_tail.as_deref().map(tok).transpose()?,
        })
    }
}

pub fn write_jsonl<W: std::io::Write>(
    mut w: W,
    trajectories: &[Trajectory],
    vocab: &Vocabulary,
) -> Result<(), TrajectoryIoError> {
    for t in trajectories {
        let line = serde_json::to_string(&TrajectoryRecord::from_trajectory(t, vocab))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::BufRead>(
    r: R,
    vocab: &Vocabulary,
) -> Result<Vec<Trajectory>, TrajectoryIoError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| {
            TrajectoryIoError::Line {
                line: lineno + 1,
                message: e.to_string(),
            }
        })?;
        out.push(rec.to_trajectory(vocab)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["M", "M2", "T", "Q", "A", "I", "x", "y", "z"]).unwrap()
    }

    fn seg(v: &Vocabulary, kind: SegmentKind, text: &str) -> Segment {
        Segment::new(kind, v.tokenize(text).unwrap())
    }

    #[test]
    fn parses_memory_think_call() {
        let v = vocab();
        let s = parse_step("<mem>M</mem>\n<think>T</think>\n<tool_call>Q</tool_call>", 2, &v)
            .unwrap();
        assert_eq!(
            s.segments,
            vec![
                seg(&v, SegmentKind::Mem, "M"),
                seg(&v, SegmentKind::Think, "T"),
                seg(&v, SegmentKind::ToolCall, "Q"),
            ]
        );
        assert_eq!(s.index, 2);
    }

    #[test]
    fn first_step_may_omit_memory() {
        let v = vocab();
        let s = parse_step("<think>T</think>\n<answer>A</answer>", 1, &v).unwrap();
        assert_eq!(s.segments.len(), 2);
        assert!(s.memory().is_none());
    }

    #[test]
    fn duplicate_memory_is_rejected() {
        let v = vocab();
        let e = parse_step("<mem>M</mem><mem>M2</mem><think>T</think><answer>A</answer>", 2, &v)
            .unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DuplicateSegment(SegmentKind::Mem));
        assert_eq!(e.offset, 12);
    }

    #[test]
    fn located_errors() {
        let v = vocab();
        let cases: &[(&str, ParseErrorKind, usize)] = &[
            ("<think>T", ParseErrorKind::UnclosedTag(SegmentKind::Think), 0),
            (
                "<answer>A</answer><think>T</think>",
                ParseErrorKind::IllegalOrder(SegmentKind::Answer),
                0,
            ),
            ("<think>T</think><foo>x</foo>", ParseErrorKind::UnknownTag("foo".into()), 16),
            ("<think>T<mem>M</mem></think>", ParseErrorKind::NestedTag, 8),
            ("<think>T</think> junk <answer>A</answer>", ParseErrorKind::StrayText, 17),
            ("<think>T</think>", ParseErrorKind::IncompleteStep, 16),
            ("<think>T</answer>", ParseErrorKind::UnexpectedClose(SegmentKind::Answer), 8),
            ("<think>zebra</think>", ParseErrorKind::OutOfVocabulary("zebra".into()), 7),
        ];
        for (text, kind, offset) in cases {
            let e = parse_step(text, 1, &v).unwrap_err();
            assert_eq!(&e.kind, kind, "{text}");
            assert_eq!(e.offset, *offset, "{text}");
        }
    }

    #[test]
    fn render_canonical_forms() {
        let v = vocab();
        let s = Step {
            index: 1,
            segments: vec![seg(&v, SegmentKind::Think, "T"), seg(&v, SegmentKind::Answer, "A")],
        };
        assert_eq!(render_step(&s, &v), "<think>T</think>\n<answer>A</answer>");
        let s = Step {
            index: 2,
            segments: vec![
                Segment::new(SegmentKind::Mem, vec![]),
                seg(&v, SegmentKind::Think, "T"),
                seg(&v, SegmentKind::ToolCall, "Q"),
            ],
        };
        let text = render_step(&s, &v);
        assert_eq!(text, "<mem></mem>\n<think>T</think>\n<tool_call>Q</tool_call>");
        assert_eq!(parse_step(&text, 2, &v).unwrap(), s);
    }

    fn three_step(v: &Vocabulary) -> Trajectory {
        Trajectory {
            query: v.tokenize("x y z").unwrap(),
            steps: vec![
                Step {
                    index: 1,
                    segments: vec![
                        seg(v, SegmentKind::Think, "T"),
                        seg(v, SegmentKind::ToolCall, "Q"),
                        seg(v, SegmentKind::Information, "I I I"),
                    ],
                },
                Step {
                    index: 2,
                    segments: vec![
                        seg(v, SegmentKind::Mem, "M"),
                        seg(v, SegmentKind::Think, "T"),
                        seg(v, SegmentKind::ToolCall, "Q"),
                        seg(v, SegmentKind::Information, "I"),
                    ],
                },
                Step {
                    index: 3,
                    segments: vec![
                        seg(v, SegmentKind::Mem, "M M2"),
                        seg(v, SegmentKind::Think, "T"),
                        seg(v, SegmentKind::Answer, "A"),
                    ],
                },
            ],
            predicted_answer: Some(v.tokenize("A").unwrap()),
            terminated: Termination::Answered,
            malformed_tail: None,
        }
    }

    #[test]
    fn well_formed_trajectory_is_valid() {
        let v = vocab();
        let t = three_step(&v);
        let verdict = check_format(&t);
        assert!(verdict.valid, "{:?}", verdict.violations);
        assert_eq!(check_format(&t), verdict);
    }

    #[test]
    fn missing_think_is_located() {
        let v = vocab();
        let mut t = three_step(&v);
        t.steps[1].segments.remove(1);
        let verdict = check_format(&t);
        assert!(!verdict.valid);
        assert_eq!(verdict.violations, vec![Violation::MissingThink { step: 2 }]);
    }

    #[test]
    fn turn_limit_is_invalid() {
        let v = vocab();
        let mut t = three_step(&v);
        t.steps.pop();
        t.predicted_answer = None;
        t.terminated = Termination::TurnLimit;
        let verdict = check_format(&t);
        assert_eq!(
            verdict.violations,
            vec![Violation::NotAnswered {
                terminated: Termination::TurnLimit
            }]
        );
    }

    #[test]
    fn empty_memory_after_first_step_is_a_violation() {
        let v = vocab();
        let mut t = three_step(&v);
        t.steps[1].segments[0].tokens.clear();
        assert_eq!(check_format(&t).violations, vec![Violation::EmptyMemory { step: 2 }]);
    }

    #[test]
    fn single_step_usage() {
        let v = vocab();
        // query 5 tokens, generated 10 = think(1+2) + answer(5+2)
        let t = Trajectory {
            query: v.tokenize("x y z x y").unwrap(),
            steps: vec![Step {
                index: 1,
                segments: vec![
                    seg(&v, SegmentKind::Think, "T"),
                    seg(&v, SegmentKind::Answer, "A A A A A"),
                ],
            }],
            predicted_answer: Some(v.tokenize("A A A A A").unwrap()),
            terminated: Termination::Answered,
            malformed_tail: None,
        };
        for mode in [ContextMode::Truncated, ContextMode::Full] {
            assert_eq!(
                token_usage(&t, mode),
                TokenUsage {
                    total_tokens: 15,
                    peak_step_tokens: 15
                }
            );
        }
    }

    #[test]
    fn truncated_context_drops_older_steps() {
        let v = vocab();
        let t = three_step(&v);
        // step sizes: s1 = 3+3+5 = 11 (generated 6), s2 = 3+3+3+3 = 12 (generated 9),
        // s3 = 4+3+3 = 10 (generated 10); query 3.
        let trunc = token_usage(&t, ContextMode::Truncated);
        let full = token_usage(&t, ContextMode::Full);
        assert_eq!(trunc.total_tokens, (3 + 6) + (3 + 11 + 9) + (3 + 12 + 10));
        assert_eq!(full.total_tokens, (3 + 6) + (3 + 11 + 9) + (3 + 23 + 10));
        assert_eq!(trunc.peak_step_tokens, 25);
        assert_eq!(full.peak_step_tokens, 36);
        assert_eq!(token_usage(&t, ContextMode::Window(1)), trunc);
        assert_eq!(token_usage(&t, ContextMode::Window(10)), full);

        let ctx = build_context(&t.query, &t.steps[..2], ContextMode::Truncated);
        assert_eq!(ctx.body, t.steps[1].tokens());
    }

    #[test]
    fn generated_kinds_align() {
        let v = vocab();
        let t = three_step(&v);
        let s = &t.steps[1];
        assert_eq!(s.generated_kinds().len(), s.generated_tokens().len());
        assert_eq!(s.generated_len(), 9);
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vocab();
        let t = three_step(&v);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&t), &v).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains(r#""kind":"tool_call""#));
        let back = read_jsonl(&buf[..], &v).unwrap();
        assert_eq!(back, vec![t]);
    }

    #[test]
    fn context_mode_parsing() {
        assert_eq!("window:3".parse::<ContextMode>().unwrap(), ContextMode::Window(3));
        assert!("window:0".parse::<ContextMode>().is_err());
        assert_eq!(ContextMode::Window(2).to_string(), "window:2");
    }
}
