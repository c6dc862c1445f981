//! Interleaved reasoning trajectories and their tagged text form.
//!
//! A transcript is a flat sequence of tagged segments, with no nesting:
//!
//! ```text
//! <think>...</think>
//! <tool_call>{"name":"zoom_in","bbox":[x0,y0,x1,y1],"label":"..."}</tool_call>
//! <tool_result>IMG:<image id></tool_result>
//! <answer>...</answer>
//! ```
//!
//! A tool result whose call failed carries `ERR:<code>` instead of an image
//! reference. Whitespace between segments is ignored; any other text outside
//! a segment is an error.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The only tool the environment provides.
pub const ZOOM_TOOL: &str = "zoom_in";

/// Default cap on tool calls per trajectory.
pub const DEFAULT_MAX_TOOL_CALLS: usize = 5;

const IMAGE_PREFIX: &str = "IMG:";
const ERROR_PREFIX: &str = "ERR:";

/// Opaque reference to an image held by an [`crate::zoom::ImageStore`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        ImageId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId(s.to_string())
    }
}

/// Axis-aligned pixel rectangle, half-open: `[x_min, x_max) x [y_min, y_max)`.
///
/// Coordinates are signed so that boxes emitted by a policy can be represented
/// before the zoom tool clamps them to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("degenerate box [{0}, {1}, {2}, {3}]: need x_min < x_max and y_min < y_max")]
pub struct InvalidBBox(pub i64, pub i64, pub i64, pub i64);

impl BBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self, InvalidBBox> {
        if x_min < x_max && y_min < y_max {
            Ok(BBox { x_min, y_min, x_max, y_max })
        } else {
            Err(InvalidBBox(x_min, y_min, x_max, y_max))
        }
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Shifts the box so that `(dx, dy)` becomes the origin.
    pub fn translate(&self, dx: i64, dy: i64) -> BBox {
        BBox { x_min: self.x_min - dx, y_min: self.y_min - dy, x_max: self.x_max - dx, y_max: self.y_max - dy }
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = InvalidBBox;

    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub bbox: BBox,
    pub label: String,
}

impl ToolCall {
    pub fn zoom(bbox: BBox, label: impl Into<String>) -> Self {
        ToolCall { tool_name: ZOOM_TOOL.to_string(), bbox, label: label.into() }
    }

    pub fn is_known_tool(&self) -> bool {
        self.tool_name == ZOOM_TOOL
    }
}

/// What the environment handed back for a tool call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOutcome {
    Image(ImageId),
    /// The call failed; the payload is a short machine-readable code.
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Think { text: String },
    ToolCall(ToolCall),
    ToolResult { outcome: ToolOutcome },
    Answer { text: String },
}

impl Segment {
    fn tag(&self) -> Tag {
        match self {
            Segment::Think { .. } => Tag::Think,
            Segment::ToolCall(_) => Tag::ToolCall,
            Segment::ToolResult { .. } => Tag::ToolResult,
            Segment::Answer { .. } => Tag::Answer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    ToolCapReached,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub question: String,
    pub original_image: ImageId,
    pub segments: Vec<Segment>,
    pub terminated: Termination,
}

impl Trajectory {
    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.segments.iter().filter_map(|s| match s {
            Segment::ToolCall(c) => Some(c),
            _ => None,
        })
    }

    pub fn tool_call_count(&self) -> usize {
        self.tool_calls().count()
    }

    /// Calls to a known tool whose result is an image.
    pub fn successful_tool_calls(&self) -> Vec<(&ToolCall, &ImageId)> {
        self.segments
            .windows(2)
            .filter_map(|w| match (&w[0], &w[1]) {
                (Segment::ToolCall(c), Segment::ToolResult { outcome: ToolOutcome::Image(id) })
                    if c.is_known_tool() =>
                {
                    Some((c, id))
                }
                _ => None,
            })
            .collect()
    }

    pub fn unknown_tool_calls(&self) -> usize {
        self.tool_calls().filter(|c| !c.is_known_tool()).count()
    }

    pub fn answer(&self) -> Option<&str> {
        match self.segments.last() {
            Some(Segment::Answer { text }) => Some(text),
            _ => None,
        }
    }

    pub fn is_answered(&self) -> bool {
        self.terminated == Termination::Answered
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseConfig {
    pub max_tool_calls: usize,
    /// When set, every image id in a tool result must start with `"<namespace>/"`.
    pub image_namespace: Option<String>,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig { max_tool_calls: DEFAULT_MAX_TOOL_CALLS, image_namespace: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unbalanced tags at byte {offset}: {detail}")]
    UnbalancedTags { offset: usize, detail: String },
    #[error("bad tool payload at byte {offset}: {detail}")]
    BadToolPayload { offset: usize, detail: String },
    #[error("bad tool result at byte {offset}: {detail}")]
    BadToolResult { offset: usize, detail: String },
    #[error("text outside any segment at byte {offset}")]
    StrayText { offset: usize },
    #[error("content after the answer at byte {offset}")]
    TrailingContentAfterAnswer { offset: usize },
    #[error("empty answer at byte {offset}")]
    EmptyAnswer { offset: usize },
    #[error("transcript must begin with <think>")]
    MissingLeadingThink,
    #[error("tool result at segment {index} has no preceding tool call")]
    OrphanToolResult { index: usize },
    #[error("tool call at segment {index} is not followed by a tool result")]
    MissingToolResult { index: usize },
    #[error("{count} tool calls exceed the cap of {cap}")]
    TooManyToolCalls { count: usize, cap: usize },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::UnbalancedTags { .. } => "unbalanced_tags",
            ParseError::BadToolPayload { .. } => "bad_tool_payload",
            ParseError::BadToolResult { .. } => "bad_tool_result",
            ParseError::StrayText { .. } => "stray_text",
            ParseError::TrailingContentAfterAnswer { .. } => "trailing_content_after_answer",
            ParseError::EmptyAnswer { .. } => "empty_answer",
            ParseError::MissingLeadingThink => "missing_leading_think",
            ParseError::OrphanToolResult { .. } => "orphan_tool_result",
            ParseError::MissingToolResult { .. } => "missing_tool_result",
            ParseError::TooManyToolCalls { .. } => "too_many_tool_calls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    ToolCall,
    ToolResult,
    Answer,
}

impl Tag {
    const ALL: [Tag; 4] = [Tag::Think, Tag::ToolCall, Tag::ToolResult, Tag::Answer];

    fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::ToolCall => "tool_call",
            Tag::ToolResult => "tool_result",
            Tag::Answer => "answer",
        }
    }

    fn open(self) -> &'static str {
        match self {
            Tag::Think => "<think>",
            Tag::ToolCall => "<tool_call>",
            Tag::ToolResult => "<tool_result>",
            Tag::Answer => "<answer>",
        }
    }

    fn close(self) -> &'static str {
        match self {
            Tag::Think => "</think>",
            Tag::ToolCall => "</tool_call>",
            Tag::ToolResult => "</tool_result>",
            Tag::Answer => "</answer>",
        }
    }
}

/// True if `text` contains any opening or closing segment tag.
pub fn contains_reserved_tag(text: &str) -> bool {
    Tag::ALL.iter().any(|t| text.contains(t.open()) || text.contains(t.close()))
}

#[derive(Deserialize)]
struct ToolPayload {
    name: String,
    bbox: Vec<serde_json::Value>,
    label: String,
}

fn parse_tool_payload(body: &str, offset: usize) -> Result<ToolCall, ParseError> {
    let bad = |detail: String| ParseError::BadToolPayload { offset, detail };
    let payload: ToolPayload = serde_json::from_str(body.trim()).map_err(|e| bad(e.to_string()))?;
    if payload.bbox.len() != 4 {
        return Err(bad(format!("bbox needs 4 coordinates, got {}", payload.bbox.len())));
    }
    let mut coords = [0i64; 4];
    for (slot, v) in coords.iter_mut().zip(&payload.bbox) {
        *slot = v.as_i64().ok_or_else(|| bad(format!("bbox coordinate {v} is not an integer")))?;
    }
    let bbox = BBox::try_from(coords).map_err(|e| bad(e.to_string()))?;
    if payload.label.trim().is_empty() {
        return Err(bad("label is empty".into()));
    }
    Ok(ToolCall { tool_name: payload.name, bbox, label: payload.label })
}

fn parse_tool_result(body: &str, offset: usize, cfg: &ParseConfig) -> Result<ToolOutcome, ParseError> {
    let bad = |detail: String| ParseError::BadToolResult { offset, detail };
    let body = body.trim();
    if let Some(id) = body.strip_prefix(IMAGE_PREFIX) {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(bad(format!("invalid image id {id:?}")));
        }
        if let Some(ns) = &cfg.image_namespace {
            let within = id.strip_prefix(ns.as_str()).is_some_and(|rest| rest.starts_with('/'));
            if !within {
                return Err(bad(format!("image id {id:?} outside namespace {ns:?}")));
            }
        }
        Ok(ToolOutcome::Image(ImageId::new(id)))
    } else if let Some(code) = body.strip_prefix(ERROR_PREFIX) {
        if code.is_empty() || code.chars().any(char::is_whitespace) {
            return Err(bad(format!("invalid error code {code:?}")));
        }
        Ok(ToolOutcome::Error(code.to_string()))
    } else {
        Err(bad(format!("expected {IMAGE_PREFIX}<id> or {ERROR_PREFIX}<code>")))
    }
}

/// Splits text into segments without checking their order.
///
/// Payloads are validated here. Stops with `TrailingContentAfterAnswer` as
/// soon as anything but whitespace follows an answer.
pub fn lex_segments(text: &str, cfg: &ParseConfig) -> Result<Vec<Segment>, ParseError> {
    let mut segments = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &text[pos..];
        let trimmed = rest.trim_start();
        pos += rest.len() - trimmed.len();
        if trimmed.is_empty() {
            return Ok(segments);
        }
        if matches!(segments.last(), Some(Segment::Answer { .. })) {
            return Err(ParseError::TrailingContentAfterAnswer { offset: pos });
        }
        let Some(tag) = Tag::ALL.into_iter().find(|t| trimmed.starts_with(t.open())) else {
            if Tag::ALL.iter().any(|t| trimmed.starts_with(t.close())) {
                return Err(ParseError::UnbalancedTags {
                    offset: pos,
                    detail: "closing tag without an opening tag".into(),
                });
            }
            return Err(ParseError::StrayText { offset: pos });
        };
        let body_start = pos + tag.open().len();
        let Some(close_rel) = text[body_start..].find(tag.close()) else {
            return Err(ParseError::UnbalancedTags {
                offset: pos,
                detail: format!("<{}> is never closed", tag.name()),
            });
        };
        let body = &text[body_start..body_start + close_rel];
        if contains_reserved_tag(body) {
            return Err(ParseError::UnbalancedTags {
                offset: pos,
                detail: format!("tag nested inside <{}>", tag.name()),
            });
        }
        let segment = match tag {
            Tag::Think => Segment::Think { text: body.to_string() },
            Tag::ToolCall => Segment::ToolCall(parse_tool_payload(body, pos)?),
            Tag::ToolResult => Segment::ToolResult { outcome: parse_tool_result(body, pos, cfg)? },
            Tag::Answer => {
                if body.trim().is_empty() {
                    return Err(ParseError::EmptyAnswer { offset: pos });
                }
                Segment::Answer { text: body.to_string() }
            }
        };
        segments.push(segment);
        pos = body_start + close_rel + tag.close().len();
    }
}

/// Checks segment ordering and infers how the trajectory ended.
fn check_structure(segments: &[Segment], cfg: &ParseConfig) -> Result<Termination, ParseError> {
    if let Some(first) = segments.first() {
        if first.tag() != Tag::Think {
            return Err(ParseError::MissingLeadingThink);
        }
    }
    let mut calls = 0;
    for (i, seg) in segments.iter().enumerate() {
        match seg.tag() {
            Tag::ToolCall => {
                calls += 1;
                if segments.get(i + 1).map(Segment::tag) != Some(Tag::ToolResult) {
                    return Err(ParseError::MissingToolResult { index: i });
                }
            }
            Tag::ToolResult => {
                if i == 0 || segments[i - 1].tag() != Tag::ToolCall {
                    return Err(ParseError::OrphanToolResult { index: i });
                }
            }
            Tag::Think | Tag::Answer => {}
        }
    }
    if calls > cfg.max_tool_calls {
        return Err(ParseError::TooManyToolCalls { count: calls, cap: cfg.max_tool_calls });
    }
    Ok(match segments.last() {
        Some(Segment::Answer { .. }) => Termination::Answered,
        _ if calls == cfg.max_tool_calls => Termination::ToolCapReached,
        _ => Termination::Malformed,
    })
}

/// Metadata carried alongside a transcript.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryMeta {
    pub id: String,
    pub question: String,
    pub original_image: ImageId,
}

pub fn parse_transcript(text: &str, meta: TrajectoryMeta, cfg: &ParseConfig) -> Result<Trajectory, ParseError> {
    let segments = lex_segments(text, cfg)?;
    let terminated = check_structure(&segments, cfg)?;
    Ok(Trajectory { id: meta.id, question: meta.question, original_image: meta.original_image, segments, terminated })
}

/// Accepts exactly the transcripts that parse and end in an answer.
pub fn is_well_formed(text: &str, cfg: &ParseConfig) -> bool {
    parse_transcript(text, TrajectoryMeta::default(), cfg).is_ok_and(|t| t.is_answered())
}

pub fn render_segment(seg: &Segment, out: &mut String) {
    let tag = seg.tag();
    out.push_str(tag.open());
    match seg {
        Segment::Think { text } | Segment::Answer { text } => out.push_str(text),
        Segment::ToolCall(call) => {
            // field order is part of the canonical form
            #[derive(Serialize)]
            struct Payload<'a> {
                name: &'a str,
                bbox: [i64; 4],
                label: &'a str,
            }
            let payload = Payload { name: &call.tool_name, bbox: call.bbox.into(), label: &call.label };
            out.push_str(&serde_json::to_string(&payload).expect("payload serializes"));
        }
        Segment::ToolResult { outcome: ToolOutcome::Image(id) } => {
            out.push_str(IMAGE_PREFIX);
            out.push_str(id.as_str());
        }
        Segment::ToolResult { outcome: ToolOutcome::Error(code) } => {
            out.push_str(ERROR_PREFIX);
            out.push_str(code);
        }
    }
    out.push_str(tag.close());
}

pub fn render_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for seg in segments {
        render_segment(seg, &mut out);
    }
    out
}

pub fn render_transcript(traj: &Trajectory) -> String {
    render_segments(&traj.segments)
}

/// On-disk trajectory record, one per JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub question: String,
    pub original_image: ImageRef,
    pub transcript: String,
    /// Answer key, when the producer knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<crate::reward::AnswerKey>,
    /// Precomputed per-call similarities, overriding embedder scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sims: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
}

impl TrajectoryRecord {
    pub fn meta(&self) -> TrajectoryMeta {
        TrajectoryMeta {
            id: self.id.clone(),
            question: self.question.clone(),
            original_image: self.original_image.id.clone(),
        }
    }

    pub fn parse(&self, cfg: &ParseConfig) -> Result<Trajectory, ParseError> {
        parse_transcript(&self.transcript, self.meta(), cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORKED: &str = r#"<think>check light</think><tool_call>{"name":"zoom_in","bbox":[10,10,50,50],"label":"traffic light"}</tool_call><tool_result>IMG:c1</tool_result><think>it is red</think><answer>B</answer>"#;

    fn parse(text: &str) -> Result<Trajectory, ParseError> {
        parse_transcript(text, TrajectoryMeta::default(), &ParseConfig::default())
    }

    #[test]
    fn worked_example_parses() {
        let t = parse(WORKED).unwrap();
        assert_eq!(t.tool_call_count(), 1);
        assert_eq!(t.answer(), Some("B"));
        assert_eq!(t.terminated, Termination::Answered);
        let call = t.tool_calls().next().unwrap();
        assert_eq!(call.bbox, BBox::new(10, 10, 50, 50).unwrap());
        assert_eq!(call.label, "traffic light");
        assert_eq!(t.successful_tool_calls().len(), 1);
    }

    #[test]
    fn trailing_after_answer() {
        let err = parse("<think>hi</think><answer>A</answer><think>extra</think>").unwrap_err();
        assert!(matches!(err, ParseError::TrailingContentAfterAnswer { .. }), "{err:?}");
    }

    #[test]
    fn inverted_bbox_is_bad_payload() {
        let err = parse(r#"<tool_call>{"bbox":[50,10,10,50],"label":"car"}</tool_call>"#).unwrap_err();
        assert!(matches!(err, ParseError::BadToolPayload { .. }), "{err:?}");
        let err = parse(r#"<think/><tool_call>{"name":"zoom_in","bbox":[50,10,10,50],"label":"car"}</tool_call>"#);
        assert!(err.is_err());
    }

    #[test]
    fn payload_validation() {
        for body in [
            r#"{"name":"zoom_in","bbox":[1,2,3],"label":"x"}"#,
            r#"{"name":"zoom_in","bbox":[1,2,3.5,4],"label":"x"}"#,
            r#"{"name":"zoom_in","bbox":[1,2,30,40],"label":"  "}"#,
            r#"{"name":"zoom_in","bbox":[1,2,30,40]}"#,
            r#"not json"#,
        ] {
            let text = format!("<think>t</think><tool_call>{body}</tool_call><tool_result>IMG:a</tool_result>");
            assert!(matches!(parse(&text), Err(ParseError::BadToolPayload { .. })), "{body}");
        }
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(parse("<think>a"), Err(ParseError::UnbalancedTags { .. })));
        assert!(matches!(parse("</think>"), Err(ParseError::UnbalancedTags { .. })));
        assert!(matches!(parse("<think>a<answer>b</answer></think>"), Err(ParseError::UnbalancedTags { .. })));
        assert!(matches!(
            parse("<think>a</think><tool_result>IMG:x</tool_result>"),
            Err(ParseError::OrphanToolResult { index: 1 })
        ));
        assert!(matches!(parse("hello <think>a</think>"), Err(ParseError::StrayText { offset: 0 })));
        assert!(matches!(parse("<answer>B</answer>"), Err(ParseError::MissingLeadingThink)));
        assert!(matches!(parse("<think>a</think><answer> </answer>"), Err(ParseError::EmptyAnswer { .. })));
        let no_result = r#"<think>a</think><tool_call>{"name":"zoom_in","bbox":[0,0,5,5],"label":"x"}</tool_call><answer>B</answer>"#;
        assert!(matches!(parse(no_result), Err(ParseError::MissingToolResult { index: 1 })));
    }

    fn with_calls(n: usize) -> String {
        let mut s = String::from("<think>look</think>");
        for i in 0..n {
            s.push_str(r#"<tool_call>{"name":"zoom_in","bbox":[0,0,20,20],"label":"car"}</tool_call>"#);
            s.push_str(&format!("<tool_result>IMG:c{i}</tool_result><think>more</think>"));
        }
        s.push_str("<answer>A</answer>");
        s
    }

    #[test]
    fn well_formedness() {
        let cfg = ParseConfig::default();
        assert!(is_well_formed(WORKED, &cfg));
        assert!(!is_well_formed("<think>no answer</think>", &cfg));
        assert!(is_well_formed(&with_calls(5), &cfg));
        assert!(!is_well_formed(&with_calls(6), &cfg));
        assert!(matches!(parse(&with_calls(6)), Err(ParseError::TooManyToolCalls { count: 6, cap: 5 })));
    }

    #[test]
    fn termination_inference() {
        let cfg = ParseConfig { max_tool_calls: 1, image_namespace: None };
        let capped = r#"<think>a</think><tool_call>{"name":"zoom_in","bbox":[0,0,5,5],"label":"x"}</tool_call><tool_result>IMG:c</tool_result>"#;
        let t = parse_transcript(capped, TrajectoryMeta::default(), &cfg).unwrap();
        assert_eq!(t.terminated, Termination::ToolCapReached);
        let t = parse("<think>a</think>").unwrap();
        assert_eq!(t.terminated, Termination::Malformed);
        let t = parse("  ").unwrap();
        assert!(t.segments.is_empty());
    }

    #[test]
    fn unknown_tool_parses_but_is_not_successful() {
        let text = r#"<think>a</think><tool_call>{"name":"teleport","bbox":[0,0,5,5],"label":"x"}</tool_call><tool_result>IMG:c</tool_result><answer>A</answer>"#;
        let t = parse(text).unwrap();
        assert_eq!(t.unknown_tool_calls(), 1);
        assert!(t.successful_tool_calls().is_empty());
    }

    #[test]
    fn error_results_are_not_successful() {
        let text = r#"<think>a</think><tool_call>{"name":"zoom_in","bbox":[0,0,5,5],"label":"x"}</tool_call><tool_result>ERR:out_of_frame</tool_result><answer>A</answer>"#;
        let t = parse(text).unwrap();
        assert_eq!(t.tool_call_count(), 1);
        assert!(t.successful_tool_calls().is_empty());
        assert_eq!(render_transcript(&t), text);
    }

    #[test]
    fn namespace_enforced() {
        let cfg = ParseConfig { max_tool_calls: 5, image_namespace: Some("q1".into()) };
        let ok = r#"<think>a</think><tool_call>{"name":"zoom_in","bbox":[0,0,5,5],"label":"x"}</tool_call><tool_result>IMG:q1/c0</tool_result>"#;
        assert!(parse_transcript(ok, TrajectoryMeta::default(), &cfg).is_ok());
        let foreign = ok.replace("q1/c0", "q2/c0");
        assert!(matches!(
            parse_transcript(&foreign, TrajectoryMeta::default(), &cfg),
            Err(ParseError::BadToolResult { .. })
        ));
    }

    #[test]
    fn canonical_render() {
        let t = Trajectory {
            id: "t".into(),
            question: "q".into(),
            original_image: ImageId::new("i0"),
            segments: vec![Segment::Think { text: "a".into() }, Segment::Answer { text: "yes".into() }],
            terminated: Termination::Answered,
        };
        assert_eq!(render_transcript(&t), "<think>a</think><answer>yes</answer>");
    }

    #[test]
    fn two_calls_render_two_tag_pairs() {
        let t = parse(&with_calls(2)).unwrap();
        let out = render_transcript(&t);
        assert_eq!(out.matches("<tool_call>").count(), 2);
        assert_eq!(out.matches("<tool_result>").count(), 2);
        assert_eq!(parse(&out).unwrap(), t);
    }

    #[test]
    fn whitespace_between_segments_is_ignored() {
        let spaced = WORKED.replace("><", ">\n  <");
        assert_eq!(parse(&spaced).unwrap(), parse(WORKED).unwrap());
    }
}
