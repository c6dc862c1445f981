//! Benchmark scoring: SURDS centerness and normalized exact match, the
//! DriveLMM twelve-criterion scorecard, and multiple-choice accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{JsonTransport, RetryPolicy, TransportError};
use crate::transcript::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("missing SURDS task {0}")]
    MissingTask(String),
    #[error("unknown SURDS task {0}")]
    ExtraTask(String),
    #[error("accuracy {value} for {task} outside [0, 100]")]
    OutOfRange { task: String, value: f64 },
    #[error("predictions ({0}) and keys ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("no records to evaluate")]
    EmptyInput,
    #[error("criterion {name} = {value} outside 1..=10")]
    InvalidCriterion { name: String, value: i64 },
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("bad judge response: {0}")]
    BadJudgeResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Centerness of `p` in `b`: `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`
/// from the border distances, and 0 for points outside the box.
pub fn centerness(p: Point, b: &BBox) -> f64 {
    let (x0, y0, x1, y1) = (b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64);
    if !(p.x.is_finite() && p.y.is_finite()) || p.x < x0 || p.x > x1 || p.y < y0 || p.y > y1 {
        return 0.0;
    }
    let ratio = |a: f64, c: f64| a.min(c) / a.max(c);
    (ratio(p.x - x0, x1 - p.x) * ratio(p.y - y0, y1 - p.y)).sqrt()
}

/// Lowercases, drops ASCII punctuation and the articles a/an/the, and
/// collapses whitespace.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let tokens: Vec<&str> = lowered.split_whitespace().filter(|t| !matches!(*t, "a" | "an" | "the")).collect();
    tokens.join(" ")
}

pub fn normalized_match(pred: &str, gt: &str) -> bool {
    normalize(pred) == normalize(gt)
}

/// Percent of positions where prediction and key match after normalization.
pub fn mcq_accuracy<P: AsRef<str>, K: AsRef<str>>(preds: &[P], keys: &[K]) -> Result<f64, EvalError> {
    if preds.len() != keys.len() {
        return Err(EvalError::LengthMismatch(preds.len(), keys.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = preds.iter().zip(keys).filter(|(p, k)| normalized_match(p.as_ref(), k.as_ref())).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SurdsTask {
    Yaw,
    Pixel,
    Depth,
    Dis,
    LR,
    FB,
}

impl SurdsTask {
    pub const ALL: [SurdsTask; 6] =
        [SurdsTask::Yaw, SurdsTask::Pixel, SurdsTask::Depth, SurdsTask::Dis, SurdsTask::LR, SurdsTask::FB];

    pub fn name(self) -> &'static str {
        match self {
            SurdsTask::Yaw => "Yaw",
            SurdsTask::Pixel => "Pixel",
            SurdsTask::Depth => "Depth",
            SurdsTask::Dis => "Dis",
            SurdsTask::LR => "LR",
            SurdsTask::FB => "FB",
        }
    }
}

impl fmt::Display for SurdsTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurdsTask {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yaw" => Ok(SurdsTask::Yaw),
            "pixel" => Ok(SurdsTask::Pixel),
            "depth" => Ok(SurdsTask::Depth),
            "dis" => Ok(SurdsTask::Dis),
            "lr" | "l/r" => Ok(SurdsTask::LR),
            "fb" | "f/b" => Ok(SurdsTask::FB),
            _ => Err(EvalError::ExtraTask(s.to_string())),
        }
    }
}

/// Arithmetic mean of the six per-task accuracies.
pub fn surds_overall<S: AsRef<str>>(task_scores: &BTreeMap<S, f64>) -> Result<f64, EvalError> {
    let mut seen = BTreeMap::new();
    for (name, &value) in task_scores {
        let task: SurdsTask = name.as_ref().parse()?;
        if !(0.0..=100.0).contains(&value) {
            return Err(EvalError::OutOfRange { task: task.to_string(), value });
        }
        if seen.insert(task, value).is_some() {
            return Err(EvalError::ExtraTask(name.as_ref().to_string()));
        }
    }
    if let Some(missing) = SurdsTask::ALL.iter().find(|t| !seen.contains_key(t)) {
        return Err(EvalError::MissingTask(missing.to_string()));
    }
    Ok(seen.values().sum::<f64>() / SurdsTask::ALL.len() as f64)
}

/// One SURDS evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SurdsRecord {
    Pixel { task: String, pred: Point, bbox: BBox },
    Text { task: String, pred: String, answer: String },
}

impl SurdsRecord {
    fn task(&self) -> &str {
        match self {
            SurdsRecord::Pixel { task, .. } | SurdsRecord::Text { task, .. } => task,
        }
    }

    /// Per-sample score in [0, 1].
    fn score(&self) -> f64 {
        match self {
            SurdsRecord::Pixel { pred, bbox, .. } => centerness(*pred, bbox),
            SurdsRecord::Text { pred, answer, .. } => f64::from(u8::from(normalized_match(pred, answer))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub per_task: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Per-task accuracy (mean sample score, in percent) and the overall mean.
pub fn evaluate_surds(records: &[SurdsRecord]) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sums: BTreeMap<SurdsTask, (f64, usize)> = BTreeMap::new();
    for r in records {
        let task: SurdsTask = r.task().parse()?;
        if matches!((task, r), (SurdsTask::Pixel, SurdsRecord::Text { .. })) {
            return Err(EvalError::ExtraTask(format!("{task} record without a point prediction")));
        }
        let entry = sums.entry(task).or_default();
        entry.0 += r.score();
        entry.1 += 1;
    }
    let per_task: BTreeMap<String, f64> =
        sums.iter().map(|(t, (sum, n))| (t.to_string(), 100.0 * sum / *n as f64)).collect();
    let overall = surds_overall(&per_task)?;
    Ok(EvalReport { benchmark: "surds".into(), per_task, overall })
}

/// Judge ratings on the twelve reasoning criteria, each in 1..=10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScoreCard")]
pub struct ScoreCard {
    pub faithfulness_step: u8,
    pub informativeness_step: u8,
    pub risk_assessment: u8,
    pub rule_adherence: u8,
    pub scene_awareness: u8,
    pub repetition_token: u8,
    pub hallucination: u8,
    pub semantic_coverage: u8,
    pub commonsense: u8,
    pub missing_step: u8,
    pub relevance: u8,
    pub missing_details: u8,
}

#[derive(Deserialize)]
struct RawScoreCard {
    faithfulness_step: i64,
    informativeness_step: i64,
    risk_assessment: i64,
    rule_adherence: i64,
    scene_awareness: i64,
    repetition_token: i64,
    hallucination: i64,
    semantic_coverage: i64,
    commonsense: i64,
    missing_step: i64,
    relevance: i64,
    missing_details: i64,
}

impl TryFrom<RawScoreCard> for ScoreCard {
    type Error = EvalError;

    fn try_from(r: RawScoreCard) -> Result<Self, Self::Error> {
        let check = |name: &str, v: i64| {
            if (1..=10).contains(&v) {
                Ok(v as u8)
            } else {
                Err(EvalError::InvalidCriterion { name: name.to_string(), value: v })
            }
        };
        Ok(ScoreCard {
            faithfulness_step: check("faithfulness_step", r.faithfulness_step)?,
            informativeness_step: check("informativeness_step", r.informativeness_step)?,
            risk_assessment: check("risk_assessment", r.risk_assessment)?,
            rule_adherence: check("rule_adherence", r.rule_adherence)?,
            scene_awareness: check("scene_awareness", r.scene_awareness)?,
            repetition_token: check("repetition_token", r.repetition_token)?,
            hallucination: check("hallucination", r.hallucination)?,
            semantic_coverage: check("semantic_coverage", r.semantic_coverage)?,
            commonsense: check("commonsense", r.commonsense)?,
            missing_step: check("missing_step", r.missing_step)?,
            relevance: check("relevance", r.relevance)?,
            missing_details: check("missing_details", r.missing_details)?,
        })
    }
}

impl ScoreCard {
    pub const CRITERIA: [&'static str; 12] = [
        "faithfulness_step",
        "informativeness_step",
        "risk_assessment",
        "rule_adherence",
        "scene_awareness",
        "repetition_token",
        "hallucination",
        "semantic_coverage",
        "commonsense",
        "missing_step",
        "relevance",
        "missing_details",
    ];

    pub fn uniform(v: u8) -> Self {
        ScoreCard::from_values([v; 12]).expect("uniform card in range")
    }

    pub fn from_values(v: [u8; 12]) -> Result<Self, EvalError> {
        if let Some(i) = v.iter().position(|x| !(1..=10).contains(x)) {
            return Err(EvalError::InvalidCriterion { name: Self::CRITERIA[i].into(), value: v[i] as i64 });
        }
        Ok(ScoreCard {
            faithfulness_step: v[0],
            informativeness_step: v[1],
            risk_assessment: v[2],
            rule_adherence: v[3],
            scene_awareness: v[4],
            repetition_token: v[5],
            hallucination: v[6],
            semantic_coverage: v[7],
            commonsense: v[8],
            missing_step: v[9],
            relevance: v[10],
            missing_details: v[11],
        })
    }

    pub fn values(&self) -> [u8; 12] {
        [
            self.faithfulness_step,
            self.informativeness_step,
            self.risk_assessment,
            self.rule_adherence,
            self.scene_awareness,
            self.repetition_token,
            self.hallucination,
            self.semantic_coverage,
            self.commonsense,
            self.missing_step,
            self.relevance,
            self.missing_details,
        ]
    }
}

/// Unweighted mean of the twelve criteria, scaled to a percent.
pub fn reasoning_score(card: &ScoreCard) -> f64 {
    card.values().iter().map(|&v| f64::from(v)).sum::<f64>() / 12.0 * 10.0
}

pub trait Judge: Send + Sync {
    fn judge(&self, reference: &str, candidate: &str) -> Result<ScoreCard, EvalError>;
}

/// Returns the same card for every request.
pub struct CannedJudge(pub ScoreCard);

impl Judge for CannedJudge {
    fn judge(&self, _reference: &str, _candidate: &str) -> Result<ScoreCard, EvalError> {
        Ok(self.0)
    }
}

/// Client for a `/judge` service.
pub struct RemoteJudge {
    transport: Box<dyn JsonTransport>,
    retry: RetryPolicy,
}

impl RemoteJudge {
    pub fn new(transport: Box<dyn JsonTransport>, retry: RetryPolicy) -> Self {
        RemoteJudge { transport, retry }
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, reference: &str, candidate: &str) -> Result<ScoreCard, EvalError> {
        let body = json!({ "reference": reference, "candidate": candidate });
        let resp = self.retry.run(|| self.transport.post("/judge", &body)).map_err(|e| match e {
            TransportError::Unavailable(m) => EvalError::JudgeUnavailable(m),
            other => EvalError::BadJudgeResponse(other.to_string()),
        })?;
        let card = resp.get("scorecard").cloned().unwrap_or(Value::Null);
        serde_json::from_value(card).map_err(|e| EvalError::BadJudgeResponse(e.to_string()))
    }
}

/// One DriveLMM evaluation record. A record carries its own scorecard or is
/// sent to the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveLmmRecord {
    pub id: String,
    #[serde(default)]
    pub reference: String,
    #[serde(default)]
    pub candidate: String,
    pub pred: String,
    pub answer: String,
    #[serde(default)]
    pub scorecard: Option<ScoreCard>,
}

/// Mean reasoning score (overall), per-criterion means and MCQ accuracy.
pub fn evaluate_drivelmm(records: &[DriveLmmRecord], judge: &dyn Judge) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let cards: Vec<ScoreCard> = records
        .iter()
        .map(|r| match r.scorecard {
            Some(c) => Ok(c),
            None => judge.judge(&r.reference, &r.candidate),
        })
        .collect::<Result<_, _>>()?;
    let n = cards.len() as f64;
    let mut per_task = BTreeMap::new();
    for (i, name) in ScoreCard::CRITERIA.iter().enumerate() {
        let mean = cards.iter().map(|c| f64::from(c.values()[i])).sum::<f64>() / n;
        per_task.insert((*name).to_string(), mean * 10.0);
    }
    let overall = cards.iter().map(reasoning_score).sum::<f64>() / n;
    let preds: Vec<&str> = records.iter().map(|r| r.pred.as_str()).collect();
    let keys: Vec<&str> = records.iter().map(|r| r.answer.as_str()).collect();
    per_task.insert("mcq".into(), mcq_accuracy(&preds, &keys)?);
    per_task.insert("reasoning".into(), overall);
    Ok(EvalReport { benchmark: "drivelmm".into(), per_task, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::RecordedTransport;

    fn bb(a: i64, b: i64, c: i64, d: i64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn centerness_examples() {
        let b = bb(0, 0, 100, 100);
        assert_eq!(centerness(Point { x: 50.0, y: 50.0 }, &b), 1.0);
        assert_eq!(centerness(Point { x: 12.0, y: 30.0 }, &bb(2, 10, 22, 50)), 1.0);
        assert_eq!(centerness(Point { x: 150.0, y: 50.0 }, &b), 0.0);
        assert_eq!(centerness(Point { x: 50.0, y: -0.5 }, &b), 0.0);
        let c = centerness(Point { x: 25.0, y: 50.0 }, &b);
        assert!((c - 0.5773502691896258).abs() < 1e-12);
        assert_eq!(centerness(Point { x: 0.0, y: 50.0 }, &b), 0.0);
        assert_eq!(centerness(Point { x: f64::NAN, y: 50.0 }, &b), 0.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The Car."), "car");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("  A   red LIGHT!! "), "red light");
        assert_eq!(normalize("an Apple, the end"), "apple end");
        assert_eq!(normalize("theater"), "theater");
    }

    #[test]
    fn match_examples() {
        assert!(normalized_match("The Car.", "car"));
        assert!(!normalized_match("left", "right"));
        assert!(normalized_match("", ""));
    }

    #[test]
    fn surds_rows() {
        let row = |v: [f64; 6]| -> BTreeMap<&str, f64> {
            ["Yaw", "Pixel", "Depth", "Dis", "LR", "FB"].into_iter().zip(v).collect()
        };
        assert_eq!(surds_overall(&row([50.0; 6])).unwrap(), 50.0);
        let ours = surds_overall(&row([9.35, 39.46, 36.72, 46.25, 46.51, 13.42])).unwrap();
        assert!((ours - 31.95).abs() <= 0.01, "{ours}");
        let random = surds_overall(&row([5.73, 1.12, 34.27, 8.76, 11.57, 11.89])).unwrap();
        assert!((random - 12.22).abs() <= 0.01, "{random}");
    }

    #[test]
    fn surds_task_errors() {
        let mut m: BTreeMap<&str, f64> =
            [("Yaw", 1.0), ("Pixel", 1.0), ("Depth", 1.0), ("Dis", 1.0), ("LR", 1.0)].into();
        assert_eq!(surds_overall(&m), Err(EvalError::MissingTask("FB".into())));
        m.insert("F/B", 1.0);
        assert!(surds_overall(&m).is_ok());
        m.insert("Speed", 1.0);
        assert_eq!(surds_overall(&m), Err(EvalError::ExtraTask("Speed".into())));
        m.remove("Speed");
        m.insert("FB", 2.0);
        assert!(matches!(surds_overall(&m), Err(EvalError::ExtraTask(_))));
        m.remove("FB");
        m.insert("Yaw", 101.0);
        assert!(matches!(surds_overall(&m), Err(EvalError::OutOfRange { .. })));
    }

    #[test]
    fn reasoning_score_examples() {
        assert_eq!(reasoning_score(&ScoreCard::uniform(10)), 100.0);
        assert_eq!(reasoning_score(&ScoreCard::uniform(1)), 10.0);
        let mut v = [5u8; 12];
        v[6] = 10;
        let card = ScoreCard::from_values(v).unwrap();
        assert_eq!(card.hallucination, 10);
        assert!((reasoning_score(&card) - 54.1667).abs() < 1e-3);
        assert!(ScoreCard::from_values([0; 12]).is_err());
    }

    #[test]
    fn scorecard_rejects_out_of_range_json() {
        let mut obj: serde_json::Map<String, Value> =
            ScoreCard::CRITERIA.iter().map(|c| (c.to_string(), json!(5))).collect();
        assert!(serde_json::from_value::<ScoreCard>(Value::Object(obj.clone())).is_ok());
        obj.insert("relevance".into(), json!(11));
        assert!(serde_json::from_value::<ScoreCard>(Value::Object(obj)).is_err());
    }

    #[test]
    fn mcq_examples() {
        assert_eq!(mcq_accuracy(&["A", "B"], &["A", "B"]).unwrap(), 100.0);
        assert_eq!(mcq_accuracy(&["A", "B"], &["A", "C"]).unwrap(), 50.0);
        let acc = mcq_accuracy(&["B", "c", "A"], &["b", "C", "D"]).unwrap();
        assert!((acc - 66.667).abs() < 0.01);
        assert_eq!(mcq_accuracy(&["A"], &["A", "B"]), Err(EvalError::LengthMismatch(1, 2)));
        assert_eq!(mcq_accuracy::<&str, &str>(&[], &[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn surds_records() {
        let recs: Vec<SurdsRecord> = serde_json::from_str(
            r#"[
            {"task":"Pixel","pred":{"x":50,"y":50},"bbox":[0,0,100,100]},
            {"task":"Pixel","pred":{"x":500,"y":50},"bbox":[0,0,100,100]},
            {"task":"Yaw","pred":"The front.","answer":"front"},
            {"task":"Depth","pred":"far","answer":"near"},
            {"task":"Dis","pred":"A","answer":"a"},
            {"task":"L/R","pred":"left","answer":"left"},
            {"task":"FB","pred":"back","answer":"front"}
        ]"#,
        )
        .unwrap();
        let r = evaluate_surds(&recs).unwrap();
        assert_eq!(r.per_task["Pixel"], 50.0);
        assert_eq!(r.per_task["Yaw"], 100.0);
        assert_eq!(r.per_task["Depth"], 0.0);
        assert!((r.overall - 350.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn drivelmm_with_remote_judge() {
        let card = ScoreCard::uniform(8);
        let t = RecordedTransport::new().on_post_sequence("/judge", vec![Ok(json!({"scorecard": card}))]);
        let judge = RemoteJudge::new(Box::new(t), RetryPolicy::no_delay(1));
        let recs = vec![
            DriveLmmRecord {
                id: "1".into(),
                reference: "r".into(),
                candidate: "c".into(),
                pred: "B".into(),
                answer: "b".into(),
                scorecard: None,
            },
            DriveLmmRecord {
                id: "2".into(),
                reference: "r".into(),
                candidate: "c".into(),
                pred: "A".into(),
                answer: "C".into(),
                scorecard: Some(ScoreCard::uniform(6)),
            },
        ];
        let r = evaluate_drivelmm(&recs, &judge).unwrap();
        assert_eq!(r.overall, 70.0);
        assert_eq!(r.per_task["mcq"], 50.0);
        assert_eq!(r.per_task["hallucination"], 70.0);
    }

    #[test]
    fn judge_down() {
        let t = RecordedTransport::new().on_post_sequence("/judge", vec![Err(TransportError::Unavailable("x".into()))]);
        let judge = RemoteJudge::new(Box::new(t), RetryPolicy::no_delay(2));
        assert!(matches!(judge.judge("a", "b"), Err(EvalError::JudgeUnavailable(_))));
    }
}
