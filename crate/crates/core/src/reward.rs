//! Process and outcome rewards for grounded tool-use trajectories.
//!
//! Stage 1 scores a trajectory as
//!
//! ```text
//! R = sum_t sim_t * lambda^(t-1)  +  alpha*R_acc + beta*R_f + gamma*[R_acc > 0]*R_tool
//! ```
//!
//! where `sim_t` is the image/label cosine of the t-th successful zoom call.
//! Stage 2 drops the process term and the tool bonus: `R = R_acc + R_f`.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedding, EmbeddingProvider};
use crate::eval::normalize;
use crate::transcript::{ImageId, ParseError, Trajectory};
use crate::zoom::{apply_zoom, ImageStore, ZoomError};

/// Tolerance used when re-deriving totals from their parts.
pub const DECOMPOSITION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clamp_similarity: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alpha: 1.0, beta: 0.5, gamma: 0.5, lambda: 0.5, clamp_similarity: true }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let weights_ok = [self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok {
            return Err(RewardError::InvalidWeights("alpha, beta and gamma must be finite and non-negative".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(RewardError::InvalidWeights(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            other => Err(format!("unknown stage {other}, expected 1 or 2")),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Stage::try_from(u8::deserialize(d)?).map_err(de::Error::custom)
    }
}

/// Correct answer for a question: an option letter or a truth value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnswerKey {
    Choice(char),
    Bool(bool),
}

impl AnswerKey {
    pub fn choice(letter: char) -> Self {
        AnswerKey::Choice(letter.to_ascii_uppercase())
    }

    /// The answer text a correct policy would give.
    pub fn canonical_text(&self) -> String {
        match self {
            AnswerKey::Choice(c) => c.to_string(),
            AnswerKey::Bool(b) => b.to_string(),
        }
    }

    /// Parses `"B"`, `"true"`, `"no"` and similar.
    pub fn parse(text: &str) -> Option<Self> {
        let t = text.trim();
        let mut chars = t.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_ascii_alphabetic() {
                return Some(AnswerKey::choice(c));
            }
        }
        parse_truth(t).map(AnswerKey::Bool)
    }

    /// Reads the answer a policy gave, in the shape this key expects.
    ///
    /// Choice answers are taken from the first token stripped of surrounding
    /// punctuation (`"B"`, `"(B)"`, `"B. red light"`). Truth answers accept
    /// true/false and yes/no after normalization.
    pub fn extract(&self, answer: &str) -> Option<AnswerKey> {
        match self {
            AnswerKey::Choice(_) => {
                let token = answer.split_whitespace().next()?;
                let token = token.trim_matches(|c: char| c.is_ascii_punctuation());
                let mut chars = token.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_alphabetic() => Some(AnswerKey::choice(c)),
                    _ => None,
                }
            }
            AnswerKey::Bool(_) => parse_truth(answer).map(AnswerKey::Bool),
        }
    }

    pub fn matches(&self, answer: &str) -> bool {
        self.extract(answer).as_ref() == Some(self)
    }
}

fn parse_truth(text: &str) -> Option<bool> {
    match normalize(text).as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

impl fmt::Display for AnswerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

impl Serialize for AnswerKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AnswerKey::Choice(c) => s.collect_str(c),
            AnswerKey::Bool(b) => s.serialize_bool(*b),
        }
    }
}

impl<'de> Deserialize<'de> for AnswerKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bool(bool),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Bool(b) => Ok(AnswerKey::Bool(b)),
            Raw::Text(t) => AnswerKey::parse(&t).ok_or_else(|| de::Error::custom(format!("invalid answer key {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("{got} similarities supplied for {expected} successful tool calls")]
    SimsMismatch { expected: usize, got: usize },
    #[error("non-finite similarity")]
    NonFinite,
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("tool call {index} could not be replayed: {source}")]
    Replay { index: usize, source: ZoomError },
}

/// Cosine of two embeddings, optionally floored at zero.
pub fn cosine_similarity(u: &Embedding, v: &Embedding, clamp: bool) -> Result<f64, RewardError> {
    if u.dim() != v.dim() {
        return Err(RewardError::DimensionMismatch(u.dim(), v.dim()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(RewardError::ZeroNorm);
    }
    let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
    let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
    Ok(if clamp { cos.max(0.0) } else { cos })
}

/// Decayed sum of per-call similarities; the first call has weight 1.
pub fn roi_grounding_reward(sims: &[f64], lambda: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for s in sims {
        total += s * weight;
        weight *= lambda;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeReward {
    pub r_acc: f64,
    pub r_format: f64,
    /// The tool bonus indicator, 1 when awarded; unweighted.
    pub r_tool: f64,
    pub r_outcome: f64,
    pub missing_answer: bool,
}

pub fn outcome_reward(traj: &Trajectory, key: &AnswerKey, w: &RewardWeights) -> OutcomeReward {
    let answer = traj.answer();
    let r_acc = if answer.is_some_and(|a| key.matches(a)) { 1.0 } else { 0.0 };
    let r_format = if traj.is_answered() { 1.0 } else { 0.0 };
    let r_tool = if r_acc > 0.0 && !traj.successful_tool_calls().is_empty() { 1.0 } else { 0.0 };
    OutcomeReward {
        r_acc,
        r_format,
        r_tool,
        r_outcome: w.alpha * r_acc + w.beta * r_format + w.gamma * r_tool,
        missing_answer: answer.is_none(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardFlags {
    /// The transcript failed to parse; every component is zero.
    #[serde(default)]
    pub malformed: bool,
    #[serde(default)]
    pub missing_answer: bool,
    #[serde(default)]
    pub unknown_tool_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub sims: Vec<f64>,
    pub r_process: f64,
    pub r_accuracy: f64,
    pub r_format: f64,
    /// The awarded tool term, already multiplied by gamma.
    pub r_tool: f64,
    pub r_total: f64,
    pub stage: Stage,
    pub weights: RewardWeights,
    pub tool_calls: usize,
    pub flags: RewardFlags,
}

impl RewardBreakdown {
    /// Zero reward for a transcript that did not parse.
    pub fn malformed(stage: Stage, weights: RewardWeights) -> Self {
        RewardBreakdown {
            sims: Vec::new(),
            r_process: 0.0,
            r_accuracy: 0.0,
            r_format: 0.0,
            r_tool: 0.0,
            r_total: 0.0,
            stage,
            weights,
            tool_calls: 0,
            flags: RewardFlags { malformed: true, missing_answer: true, unknown_tool_calls: 0 },
        }
    }

    /// Total rebuilt from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        match self.stage {
            Stage::Stage1 => {
                roi_grounding_reward(&self.sims, self.weights.lambda)
                    + self.weights.alpha * self.r_accuracy
                    + self.weights.beta * self.r_format
                    + self.r_tool
            }
            Stage::Stage2 => self.r_accuracy + self.r_format,
        }
    }

    pub fn is_consistent(&self) -> bool {
        let process_ok = match self.stage {
            Stage::Stage1 => {
                (roi_grounding_reward(&self.sims, self.weights.lambda) - self.r_process).abs() <= DECOMPOSITION_TOL
            }
            Stage::Stage2 => self.r_process == 0.0,
        };
        process_ok && (self.recompute_total() - self.r_total).abs() <= DECOMPOSITION_TOL
    }
}

pub fn stage1_total(
    traj: &Trajectory,
    key: &AnswerKey,
    sims: &[f64],
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    w.validate()?;
    let expected = traj.successful_tool_calls().len();
    if sims.len() != expected {
        return Err(RewardError::SimsMismatch { expected, got: sims.len() });
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(RewardError::NonFinite);
    }
    let outcome = outcome_reward(traj, key, w);
    let r_process = roi_grounding_reward(sims, w.lambda);
    Ok(RewardBreakdown {
        sims: sims.to_vec(),
        r_process,
        r_accuracy: outcome.r_acc,
        r_format: outcome.r_format,
        r_tool: w.gamma * outcome.r_tool,
        r_total: r_process + outcome.r_outcome,
        stage: Stage::Stage1,
        weights: *w,
        tool_calls: traj.tool_call_count(),
        flags: RewardFlags {
            malformed: false,
            missing_answer: outcome.missing_answer,
            unknown_tool_calls: traj.unknown_tool_calls(),
        },
    })
}

pub fn stage2_total(traj: &Trajectory, key: &AnswerKey, w: &RewardWeights) -> RewardBreakdown {
    let unit = RewardWeights { alpha: 1.0, beta: 1.0, gamma: 0.0, ..*w };
    let outcome = outcome_reward(traj, key, &unit);
    RewardBreakdown {
        sims: Vec::new(),
        r_process: 0.0,
        r_accuracy: outcome.r_acc,
        r_format: outcome.r_format,
        r_tool: 0.0,
        r_total: outcome.r_acc + outcome.r_format,
        stage: Stage::Stage2,
        weights: *w,
        tool_calls: traj.tool_call_count(),
        flags: RewardFlags {
            malformed: false,
            missing_answer: outcome.missing_answer,
            unknown_tool_calls: traj.unknown_tool_calls(),
        },
    }
}

/// Similarities of every successful zoom call, replayed against the
/// trajectory's original image.
pub fn grounding_sims(
    traj: &Trajectory,
    store: &ImageStore,
    provider: &dyn EmbeddingProvider,
    clamp: bool,
) -> Result<Vec<f64>, RewardError> {
    traj.successful_tool_calls()
        .into_iter()
        .enumerate()
        .map(|(index, (call, _))| {
            let crop_id = ImageId::new(format!("{}/replay-{index}", traj.id));
            let crop = apply_zoom(call, &traj.original_image, crop_id, store)
                .map_err(|source| RewardError::Replay { index, source })?;
            let image = provider.embed_image(&crop.image)?;
            let label = provider.embed_text(&call.label)?;
            cosine_similarity(&image, &label, clamp)
        })
        .collect()
}

/// Where stage-1 similarities come from.
pub enum SimSource<'a> {
    Given(&'a [f64]),
    Replay { store: &'a ImageStore, provider: &'a dyn EmbeddingProvider },
}

/// Scores a parse result; parse failures score zero.
pub fn score(
    parsed: &Result<Trajectory, ParseError>,
    key: &AnswerKey,
    stage: Stage,
    w: &RewardWeights,
    sims: SimSource<'_>,
) -> Result<RewardBreakdown, RewardError> {
    w.validate()?;
    let Ok(traj) = parsed else {
        return Ok(RewardBreakdown::malformed(stage, *w));
    };
    match stage {
        Stage::Stage2 => Ok(stage2_total(traj, key, w)),
        Stage::Stage1 => match sims {
            SimSource::Given(s) => stage1_total(traj, key, s, w),
            SimSource::Replay { store, provider } => {
                let s = grounding_sims(traj, store, provider, w.clamp_similarity)?;
                stage1_total(traj, key, &s, w)
            }
        },
    }
}

/// One reward report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub stage: Stage,
    pub sims: Vec<f64>,
    pub r_process: f64,
    pub r_acc: f64,
    pub r_format: f64,
    pub r_tool: f64,
    pub r_total: f64,
    pub tool_calls: usize,
    pub weights: RewardWeights,
    #[serde(default)]
    pub flags: RewardFlags,
}

impl RewardReport {
    pub fn new(id: impl Into<String>, question_id: Option<String>, b: &RewardBreakdown) -> Self {
        RewardReport {
            id: id.into(),
            question_id,
            stage: b.stage,
            sims: b.sims.clone(),
            r_process: b.r_process,
            r_acc: b.r_accuracy,
            r_format: b.r_format,
            r_tool: b.r_tool,
            r_total: b.r_total,
            tool_calls: b.tool_calls,
            weights: b.weights,
            flags: b.flags,
        }
    }

    pub fn breakdown(&self) -> RewardBreakdown {
        RewardBreakdown {
            sims: self.sims.clone(),
            r_process: self.r_process,
            r_accuracy: self.r_acc,
            r_format: self.r_format,
            r_tool: self.r_tool,
            r_total: self.r_total,
            stage: self.stage,
            weights: self.weights,
            tool_calls: self.tool_calls,
            flags: self.flags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::{parse_transcript, ParseConfig, TrajectoryMeta};

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn traj(calls: usize, answer: &str) -> Trajectory {
        let mut s = String::from("<think>t</think>");
        for i in 0..calls {
            s.push_str(r#"<tool_call>{"name":"zoom_in","bbox":[0,0,20,20],"label":"car"}</tool_call>"#);
            s.push_str(&format!("<tool_result>IMG:c{i}</tool_result>"));
        }
        s.push_str(&format!("<answer>{answer}</answer>"));
        parse_transcript(&s, TrajectoryMeta::default(), &ParseConfig::default()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = emb(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&u, &u, false).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0]), false).unwrap(), 0.0);
        let c = cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 1.0]), false).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-12);
    }

    #[test]
    fn cosine_clamp_and_errors() {
        let (a, b) = (emb(&[1.0, 0.0]), emb(&[-1.0, 0.0]));
        assert_eq!(cosine_similarity(&a, &b, false).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&a, &b, true).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &emb(&[1.0, 0.0, 0.0]), false), Err(RewardError::DimensionMismatch(2, 3)));
        assert_eq!(cosine_similarity(&a, &emb(&[0.0, 0.0]), false), Err(RewardError::ZeroNorm));
    }

    #[test]
    fn process_reward_examples() {
        assert_eq!(roi_grounding_reward(&[], 0.5), 0.0);
        assert!((roi_grounding_reward(&[0.9, 0.8], 0.5) - 1.3).abs() < 1e-15);
        assert_eq!(roi_grounding_reward(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(roi_grounding_reward(&[1.0, 1.0, 1.0], 1.0), 3.0);
    }

    #[test]
    fn outcome_examples() {
        let w = RewardWeights::default();
        let key = AnswerKey::choice('B');
        assert_eq!(outcome_reward(&traj(2, "B"), &key, &w).r_outcome, 2.0);
        assert_eq!(outcome_reward(&traj(3, "C"), &key, &w).r_outcome, 0.5);
        assert_eq!(outcome_reward(&traj(0, "B"), &key, &w).r_outcome, 1.5);
    }

    #[test]
    fn stage1_examples() {
        let w = RewardWeights::default();
        let key = AnswerKey::choice('B');
        let b = stage1_total(&traj(2, "B"), &key, &[0.9, 0.8], &w).unwrap();
        assert!((b.r_total - 3.3).abs() < 1e-12);
        assert!(b.is_consistent());
        let b = stage1_total(&traj(0, "A"), &key, &[], &w).unwrap();
        assert_eq!(b.r_total, 0.5);
        let m = score(&Err(ParseError::MissingLeadingThink), &key, Stage::Stage1, &w, SimSource::Given(&[])).unwrap();
        assert_eq!(m.r_total, 0.0);
        assert!(m.flags.malformed && m.is_consistent());
        assert_eq!(
            stage1_total(&traj(2, "B"), &key, &[0.9], &w),
            Err(RewardError::SimsMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn stage2_examples() {
        let w = RewardWeights::default();
        let key = AnswerKey::choice('B');
        assert_eq!(stage2_total(&traj(1, "B"), &key, &w).r_total, 2.0);
        assert_eq!(stage2_total(&traj(1, "D"), &key, &w).r_total, 1.0);
        let m = score(&Err(ParseError::MissingLeadingThink), &key, Stage::Stage2, &w, SimSource::Given(&[])).unwrap();
        assert_eq!(m.r_total, 0.0);
    }

    #[test]
    fn unanswered_trajectory_has_no_format_or_accuracy() {
        let t = parse_transcript("<think>hmm</think>", TrajectoryMeta::default(), &ParseConfig::default()).unwrap();
        let b = stage1_total(&t, &AnswerKey::Bool(true), &[], &RewardWeights::default()).unwrap();
        assert!(b.flags.missing_answer);
        assert_eq!((b.r_accuracy, b.r_format, b.r_total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn answer_extraction() {
        let b = AnswerKey::choice('b');
        assert!(b.matches("B"));
        assert!(b.matches(" (b). red light"));
        assert!(!b.matches("C"));
        assert!(!b.matches("Bus"));
        let t = AnswerKey::Bool(true);
        assert!(t.matches("Yes."));
        assert!(t.matches("TRUE"));
        assert!(!t.matches("false"));
        assert!(!t.matches("maybe"));
    }

    #[test]
    fn answer_key_serde() {
        let k: AnswerKey = serde_json::from_str("\"c\"").unwrap();
        assert_eq!(k, AnswerKey::Choice('C'));
        assert_eq!(serde_json::to_string(&k).unwrap(), "\"C\"");
        let k: AnswerKey = serde_json::from_str("false").unwrap();
        assert_eq!(k, AnswerKey::Bool(false));
        let k: AnswerKey = serde_json::from_str("\"true\"").unwrap();
        assert_eq!(k, AnswerKey::Bool(true));
        assert!(serde_json::from_str::<AnswerKey>("\"maybe\"").is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardWeights { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(RewardWeights { beta: -0.1, ..Default::default() }.validate().is_err());
        assert!(RewardWeights { lambda: 1.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn report_round_trip_keeps_consistency() {
        let b = stage1_total(&traj(2, "B"), &AnswerKey::choice('B'), &[0.9, 0.8], &RewardWeights::default()).unwrap();
        let line = serde_json::to_string(&RewardReport::new("t1", None, &b)).unwrap();
        assert!(line.contains("\"stage\":1"));
        let back: RewardReport = serde_json::from_str(&line).unwrap();
        assert!(back.breakdown().is_consistent());
        assert_eq!(back.breakdown(), b);
    }
}
