//! Turning open-ended scene Q&A into verifiable multiple-choice and
//! true/false items: candidate generation, rule-based scoring and rejection
//! sampling.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::normalize;
use crate::http::{JsonTransport, RetryPolicy, Semaphore, TransportError};
use crate::reward::AnswerKey;
use crate::rollout::{deserialize_options, option_letter, ChoiceOption, Question, QuestionKind};
use crate::transcript::contains_reserved_tag;

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_TOP_N: usize = 1;
pub const DEFAULT_K: usize = 4;
pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenQA {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    pub image: String,
}

impl OpenQA {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.question.trim().is_empty() || self.reference_answer.trim().is_empty() {
            return Err(DatagenError::InvalidSource(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub sample_index: usize,
}

/// An emitted item. Serializes as a question-file record plus
/// `source_id`, `quality_score` and `provenance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiableItem {
    pub id: String,
    pub source_id: String,
    #[serde(rename = "type")]
    pub kind: QuestionKind,
    pub question: String,
    #[serde(default, deserialize_with = "deserialize_options")]
    pub options: Vec<ChoiceOption>,
    pub answer: AnswerKey,
    pub image: String,
    pub quality_score: f64,
    pub provenance: Provenance,
}

impl VerifiableItem {
    pub fn to_question(&self) -> Question {
        Question {
            id: self.id.clone(),
            question: self.question.clone(),
            kind: self.kind,
            options: self.options.clone(),
            answer: self.answer,
            image: self.image.clone(),
        }
    }

    /// Text of the keyed option; the question itself for true/false items.
    pub fn key_text(&self) -> Option<&str> {
        match (self.kind, self.answer) {
            (QuestionKind::Mcq, AnswerKey::Choice(c)) => {
                self.options.iter().find(|o| o.letter == c).map(|o| o.text.as_str())
            }
            (QuestionKind::Tf, AnswerKey::Bool(_)) => Some(&self.question),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidItem {
    #[error("empty question")]
    EmptyQuestion,
    #[error("{0} options, expected between 2 and 6")]
    OptionCount(usize),
    #[error("option {index} has letter {got:?}, expected {expected:?}")]
    OptionLetter { index: usize, expected: char, got: char },
    #[error("option {0} has empty text")]
    EmptyOption(char),
    #[error("answer {0} does not name an option")]
    DanglingKey(char),
    #[error("true/false item with options")]
    TrueFalseOptions,
    #[error("answer type does not match item type")]
    KeyKind,
    #[error("quality score {0} outside [0, 1]")]
    QualityScore(f64),
    #[error("candidate is not an object of the expected shape: {0}")]
    Shape(String),
}

/// The structural validator applied to candidates and, again, to output.
pub fn validate_item(item: &VerifiableItem) -> Result<(), InvalidItem> {
    if item.question.trim().is_empty() {
        return Err(InvalidItem::EmptyQuestion);
    }
    if !(0.0..=1.0).contains(&item.quality_score) {
        return Err(InvalidItem::QualityScore(item.quality_score));
    }
    match (item.kind, item.answer) {
        (QuestionKind::Tf, AnswerKey::Bool(_)) => {
            if !item.options.is_empty() {
                return Err(InvalidItem::TrueFalseOptions);
            }
        }
        (QuestionKind::Mcq, AnswerKey::Choice(key)) => {
            let n = item.options.len();
            if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
                return Err(InvalidItem::OptionCount(n));
            }
            for (index, o) in item.options.iter().enumerate() {
                let expected = option_letter(index);
                if o.letter != expected {
                    return Err(InvalidItem::OptionLetter { index, expected, got: o.letter });
                }
                if o.text.trim().is_empty() {
                    return Err(InvalidItem::EmptyOption(o.letter));
                }
            }
            if !item.options.iter().any(|o| o.letter == key) {
                return Err(InvalidItem::DanglingKey(key));
            }
        }
        _ => return Err(InvalidItem::KeyKind),
    }
    Ok(())
}

/// Wire shape of one generator candidate.
#[derive(Debug, Clone, Deserialize)]
struct RawCandidate {
    #[serde(rename = "type")]
    kind: QuestionKind,
    question: String,
    #[serde(default, deserialize_with = "deserialize_options")]
    options: Vec<ChoiceOption>,
    answer: AnswerKey,
}

/// Builds and validates a candidate from a generator's JSON output.
pub fn candidate_from_value(
    raw: &Value,
    source: &OpenQA,
    generator: &str,
    sample_index: usize,
) -> Result<VerifiableItem, InvalidItem> {
    let c: RawCandidate = serde_json::from_value(raw.clone()).map_err(|e| InvalidItem::Shape(e.to_string()))?;
    let item = VerifiableItem {
        id: format!("{}-{sample_index}", source.id),
        source_id: source.id.clone(),
        kind: c.kind,
        question: c.question,
        options: c.options,
        answer: c.answer,
        image: source.image.clone(),
        quality_score: 0.0,
        provenance: Provenance { generator: generator.to_string(), sample_index },
    };
    validate_item(&item)?;
    Ok(item)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatagenError {
    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("generator rejected the request: {0}")]
    GeneratorRejected(String),
    #[error("source item {0} has an empty question or reference answer")]
    InvalidSource(String),
    #[error("invalid datagen config: {0}")]
    InvalidConfig(String),
    #[error("emitted item {id} failed validation: {reason}")]
    InvalidOutput { id: String, reason: InvalidItem },
}

/// Produces raw candidate JSON for a source item.
pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, source: &OpenQA, k: usize) -> Result<Vec<Value>, DatagenError>;
}

/// Replays fixed candidates: per source id, falling back to a default list.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedGenerator {
    #[serde(default = "scripted_id")]
    pub id: String,
    #[serde(default)]
    pub items: HashMap<String, Vec<Value>>,
    #[serde(default)]
    pub default: Vec<Value>,
}

fn scripted_id() -> String {
    "scripted".to_string()
}

impl ScriptedGenerator {
    pub fn uniform(candidates: Vec<Value>) -> Self {
        ScriptedGenerator { id: scripted_id(), items: HashMap::new(), default: candidates }
    }
}

impl Generator for ScriptedGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, source: &OpenQA, _k: usize) -> Result<Vec<Value>, DatagenError> {
        Ok(self.items.get(&source.id).unwrap_or(&self.default).clone())
    }
}

const DISTRACTOR_POOL: [&str; 12] = [
    "The vehicle is stopped at the intersection",
    "A pedestrian is crossing from the left",
    "The traffic light is green",
    "The road ahead is closed",
    "A cyclist is overtaking on the right",
    "The car is reversing into a parking space",
    "Construction cones block the right lane",
    "The truck is merging onto the highway",
    "There is no traffic in either direction",
    "A bus is pulling away from the stop",
    "The road is wet from rain",
    "Emergency vehicles are approaching",
];

/// Offline generator: keys the reference answer among seeded distractors,
/// or poses it (or a distractor) as a true/false statement.
#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    pub seed: u64,
}

impl TemplateGenerator {
    fn rng(&self, source: &OpenQA, sample: usize) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(source.id.as_bytes());
        h.update((sample as u64).to_le_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }

    fn candidate(&self, source: &OpenQA, sample: usize) -> Value {
        let mut rng = self.rng(source, sample);
        let reference = source.reference_answer.trim();
        let pool: Vec<&str> =
            DISTRACTOR_POOL.iter().copied().filter(|d| normalize(d) != normalize(reference)).collect();
        if sample % 3 == 2 {
            let truthful = rng.random_bool(0.5);
            let claim = if truthful { reference } else { pool[rng.random_range(0..pool.len())] };
            return json!({
                "type": "tf",
                "question": format!("{} True or false: {claim}.", source.question.trim()),
                "answer": truthful,
            });
        }
        let n = rng.random_range(MIN_OPTIONS + 1..=MAX_OPTIONS - 2);
        let mut texts: Vec<&str> = pool.choose_multiple(&mut rng, n - 1).copied().collect();
        let key = rng.random_range(0..n);
        texts.insert(key, reference);
        // every third multiple-choice sample carries a duplicated distractor
        if sample % 3 == 1 && n > 2 {
            let dup = if key == 0 { 1 } else { 0 };
            let other = (0..n).find(|&i| i != key && i != dup).unwrap_or(dup);
            texts[other] = texts[dup];
        }
        let options: Vec<Value> =
            texts.iter().enumerate().map(|(i, t)| json!({"letter": option_letter(i), "text": t})).collect();
        json!({
            "type": "mcq",
            "question": source.question.trim(),
            "options": options,
            "answer": option_letter(key).to_string(),
        })
    }
}

impl Generator for TemplateGenerator {
    fn id(&self) -> &str {
        "template"
    }

    fn generate(&self, source: &OpenQA, k: usize) -> Result<Vec<Value>, DatagenError> {
        Ok((0..k).map(|i| self.candidate(source, i)).collect())
    }
}

/// Remote MLLM generator: POST `/generate` `{"question","reference","k"}`
/// returning `{"candidates":[...]}`.
pub struct HttpGenerator {
    id: String,
    transport: Box<dyn JsonTransport>,
    retry: RetryPolicy,
}

impl HttpGenerator {
    pub fn new(id: impl Into<String>, transport: Box<dyn JsonTransport>, retry: RetryPolicy) -> Self {
        HttpGenerator { id: id.into(), transport, retry }
    }
}

impl Generator for HttpGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, source: &OpenQA, k: usize) -> Result<Vec<Value>, DatagenError> {
        let body = json!({"question": source.question, "reference": source.reference_answer, "k": k});
        let resp = self.retry.run(|| self.transport.post("/generate", &body)).map_err(|e| match e {
            TransportError::Unavailable(m) => DatagenError::GeneratorUnavailable(m),
            other => DatagenError::GeneratorRejected(other.to_string()),
        })?;
        match resp.get("candidates") {
            Some(Value::Array(c)) => Ok(c.clone()),
            _ => Err(DatagenError::GeneratorRejected("response lacks a candidates array".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    pub candidates: Vec<VerifiableItem>,
    /// Structurally invalid generator outputs.
    pub dropped: usize,
}

/// Up to `k` valid candidates from the first `k` generator outputs.
pub fn generate_candidates(
    source: &OpenQA,
    generator: &dyn Generator,
    k: usize,
) -> Result<CandidateBatch, DatagenError> {
    if k == 0 {
        return Err(DatagenError::InvalidConfig("k must be at least 1".into()));
    }
    source.validate()?;
    let raw = generator.generate(source, k)?;
    let mut candidates = Vec::new();
    let mut dropped = 0;
    for (i, value) in raw.iter().take(k).enumerate() {
        match candidate_from_value(value, source, generator.id(), i) {
            Ok(c) => candidates.push(c),
            Err(_) => dropped += 1,
        }
    }
    Ok(CandidateBatch { candidates, dropped })
}

/// Rule weights and the lexical-consistency threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleSet {
    pub w_format: f64,
    pub w_consistency: f64,
    pub w_distinct: f64,
    /// Share of the key's tokens that must occur in the reference answer.
    pub overlap_threshold: f64,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet { w_format: 0.3, w_consistency: 0.5, w_distinct: 0.2, overlap_threshold: 0.5 }
    }
}

impl RuleSet {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let ws = [self.w_format, self.w_consistency, self.w_distinct];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(DatagenError::InvalidConfig("rule weights must be non-negative with a positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(DatagenError::InvalidConfig("overlap_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn tokens(text: &str) -> BTreeSet<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Fraction of `claim`'s normalized tokens that occur in `reference`.
pub fn token_overlap(claim: &str, reference: &str) -> f64 {
    let c = tokens(claim);
    if c.is_empty() {
        return 0.0;
    }
    let r = tokens(reference);
    c.intersection(&r).count() as f64 / c.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleOutcome {
    pub format: bool,
    pub consistency: bool,
    pub distinct: bool,
}

pub fn evaluate_rules(cand: &VerifiableItem, source: &OpenQA, rules: &RuleSet) -> RuleOutcome {
    let format = validate_item(cand).is_ok()
        && !contains_reserved_tag(&cand.question)
        && cand.options.iter().all(|o| !normalize(&o.text).is_empty() && !contains_reserved_tag(&o.text));
    let consistency = match (cand.kind, cand.answer) {
        (QuestionKind::Mcq, AnswerKey::Choice(_)) => {
            cand.key_text().is_some_and(|t| token_overlap(t, &source.reference_answer) >= rules.overlap_threshold)
        }
        // a true statement must be supported by the reference, a false one must not
        (QuestionKind::Tf, AnswerKey::Bool(truth)) => {
            let claim = tf_claim(&cand.question, &source.question);
            (token_overlap(claim, &source.reference_answer) >= rules.overlap_threshold) == truth
        }
        _ => false,
    };
    let mut seen = BTreeSet::new();
    let distinct = cand.options.iter().all(|o| seen.insert(normalize(&o.text)));
    RuleOutcome { format, consistency, distinct }
}

/// The part of a true/false question that makes the claim: the text after a
/// repeated source question prefix, when present.
fn tf_claim<'a>(question: &'a str, source_question: &str) -> &'a str {
    let q = question.trim();
    let prefix = source_question.trim();
    let rest = q.strip_prefix(prefix).unwrap_or(q).trim_start();
    let rest = rest.strip_prefix("True or false:").or_else(|| rest.strip_prefix("True or False:")).unwrap_or(rest);
    rest.trim()
}

/// Weighted share of passed rules, in [0, 1].
pub fn score_candidate(cand: &VerifiableItem, source: &OpenQA, rules: &RuleSet) -> f64 {
    let o = evaluate_rules(cand, source, rules);
    let total = rules.w_format + rules.w_consistency + rules.w_distinct;
    let passed = rules.w_format * f64::from(o.format as u8)
        + rules.w_consistency * f64::from(o.consistency as u8)
        + rules.w_distinct * f64::from(o.distinct as u8);
    (passed / total).clamp(0.0, 1.0)
}

/// Drops candidates scoring below `threshold`, then keeps the `top_n` best per
/// source item, ties going to the earlier candidate. Output follows the order
/// in which source items first appear; kept items carry their score.
pub fn rejection_filter(scored: Vec<(VerifiableItem, f64)>, threshold: f64, top_n: usize) -> Vec<VerifiableItem> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, VerifiableItem, f64)>> = HashMap::new();
    for (index, (item, s)) in scored.into_iter().enumerate() {
        if s.is_nan() || s < threshold {
            continue;
        }
        if !groups.contains_key(&item.source_id) {
            order.push(item.source_id.clone());
        }
        groups.entry(item.source_id.clone()).or_default().push((index, item, s));
    }
    let mut out = Vec::new();
    for source in order {
        let mut group = groups.remove(&source).unwrap_or_default();
        group.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        out.extend(group.into_iter().take(top_n).map(|(_, mut item, s)| {
            item.quality_score = s;
            item
        }));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub k: usize,
    pub threshold: f64,
    pub top_n: usize,
    pub rules: RuleSet,
    pub max_in_flight: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
            top_n: DEFAULT_TOP_N,
            rules: RuleSet::default(),
            max_in_flight: 8,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.k == 0 {
            return Err(DatagenError::InvalidConfig("k must be at least 1".into()));
        }
        if self.top_n == 0 {
            return Err(DatagenError::InvalidConfig("top_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DatagenError::InvalidConfig("threshold must lie in [0, 1]".into()));
        }
        self.rules.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatagenStats {
    pub sources: usize,
    pub candidates: usize,
    pub dropped_invalid: usize,
    pub rejected: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatagenOutput {
    pub items: Vec<VerifiableItem>,
    pub stats: DatagenStats,
}

/// Generate, score and filter every source item. Output is in source order
/// and every emitted item is re-validated.
pub fn run_pipeline(
    sources: &[OpenQA],
    generator: &dyn Generator,
    cfg: &DatagenConfig,
) -> Result<DatagenOutput, DatagenError> {
    cfg.validate()?;
    let gate = Semaphore::new(cfg.max_in_flight);
    let batches: Vec<CandidateBatch> = sources
        .par_iter()
        .map(|s| {
            let _permit = gate.acquire();
            generate_candidates(s, generator, cfg.k)
        })
        .collect::<Result<_, _>>()?;

    let mut stats = DatagenStats { sources: sources.len(), ..Default::default() };
    let mut items = Vec::new();
    for (source, batch) in sources.iter().zip(batches) {
        stats.candidates += batch.candidates.len();
        stats.dropped_invalid += batch.dropped;
        let scored: Vec<_> = batch
            .candidates
            .into_iter()
            .map(|c| {
                let s = score_candidate(&c, source, &cfg.rules);
                (c, s)
            })
            .collect();
        let n = scored.len();
        let kept = rejection_filter(scored, cfg.threshold, cfg.top_n);
        stats.rejected += n - kept.len();
        items.extend(kept);
    }
    for item in &items {
        validate_item(item).map_err(|reason| DatagenError::InvalidOutput { id: item.id.clone(), reason })?;
    }
    stats.emitted = items.len();
    Ok(DatagenOutput { items, stats })
}

/// Checksum of the serialized output, for comparing runs.
pub fn output_digest(items: &[VerifiableItem]) -> [u8; 32] {
    let mut h = Sha256::new();
    for item in items {
        h.update(serde_json::to_vec(item).expect("items serialize"));
        h.update(b"\n");
    }
    h.finalize().into()
}
