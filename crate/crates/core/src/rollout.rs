//! The interleaved reasoning loop: query a policy, execute its zoom calls,
//! and assemble trajectories and scored rollout groups.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::Deserializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingProvider};
use crate::grpo::{GrpoError, RolloutGroup, DEFAULT_EPSILON};
use crate::reward::{score, AnswerKey, RewardBreakdown, RewardError, RewardWeights, SimSource, Stage};
use crate::transcript::{
    lex_segments, render_segments, ImageId, ImageRef, ParseConfig, Segment, Termination, ToolOutcome, Trajectory,
    TrajectoryRecord, DEFAULT_MAX_TOOL_CALLS,
};
use crate::zoom::{apply_zoom, ImageRecord, ImageStore};

pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Mcq,
    Tf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChoiceOption {
    pub letter: char,
    pub text: String,
}

impl<'de> Deserialize<'de> for ChoiceOption {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Entry {
            letter: char,
            text: String,
        }
        let e = Entry::deserialize(d)?;
        Ok(ChoiceOption { letter: e.letter, text: e.text })
    }
}

/// Options may be given as bare strings (lettered A, B, ... by position) or
/// as `{"letter","text"}` objects.
pub fn deserialize_options<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ChoiceOption>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Entry(ChoiceOption),
    }
    let raw = Option::<Vec<Repr>>::deserialize(d)?.unwrap_or_default();
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Repr::Text(text) => ChoiceOption { letter: option_letter(i), text },
            Repr::Entry(e) => e,
        })
        .collect())
}

pub fn option_letter(index: usize) -> char {
    (b'A' + (index % 26) as u8) as char
}

/// A question-file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
    #[serde(rename = "type")]
    pub kind: QuestionKind,
    #[serde(default, deserialize_with = "deserialize_options")]
    pub options: Vec<ChoiceOption>,
    pub answer: AnswerKey,
    /// Image path; also used as the image's id in the store.
    pub image: String,
}

impl Question {
    pub fn image_id(&self) -> ImageId {
        ImageId::new(self.image.clone())
    }

    /// A plausible but incorrect answer.
    pub fn wrong_answer(&self) -> AnswerKey {
        match self.answer {
            AnswerKey::Bool(b) => AnswerKey::Bool(!b),
            AnswerKey::Choice(c) => self
                .options
                .iter()
                .map(|o| AnswerKey::choice(o.letter))
                .find(|k| *k != AnswerKey::Choice(c))
                .unwrap_or(AnswerKey::choice(if c == 'A' { 'B' } else { 'A' })),
        }
    }

    /// All answers a policy could pick from.
    pub fn answer_space(&self) -> Vec<AnswerKey> {
        match self.kind {
            QuestionKind::Tf => vec![AnswerKey::Bool(true), AnswerKey::Bool(false)],
            QuestionKind::Mcq if self.options.is_empty() => vec![self.answer],
            QuestionKind::Mcq => self.options.iter().map(|o| AnswerKey::choice(o.letter)).collect(),
        }
    }
}

/// What a policy sees at each step.
pub struct PolicyContext<'a> {
    pub question: &'a Question,
    pub image: &'a ImageRecord,
    /// The transcript so far, rendered.
    pub prefix: &'a str,
    pub seed: u64,
    pub rollout_index: usize,
    pub step: usize,
    pub tool_calls: usize,
    /// Set once the tool-call cap is reached; further calls are rejected.
    pub must_answer: bool,
}

/// Produces the next emission: `<think>..</think>` followed by either a
/// `<tool_call>` or an `<answer>`. Must be deterministic for a fixed context.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    fn emit(&self, ctx: &PolicyContext<'_>) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_tool_calls: usize,
    pub group_size: usize,
    pub stage: Stage,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_tool_calls: DEFAULT_MAX_TOOL_CALLS,
            group_size: DEFAULT_GROUP_SIZE,
            stage: Stage::Stage1,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn parse_config(&self) -> ParseConfig {
        ParseConfig { max_tool_calls: self.max_tool_calls, image_namespace: None }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("invalid rollout config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

impl RolloutError {
    /// True when the failure came from an unreachable external service.
    pub fn is_environment(&self) -> bool {
        matches!(self, RolloutError::Reward(RewardError::Embed(EmbedError::ServiceUnavailable(_))))
    }
}

/// SplitMix64 finalizer, used to derive per-rollout and per-step seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

enum Emission {
    Call(Segment, Segment),
    Answer(Segment, Segment),
}

fn read_emission(text: &str) -> Option<Emission> {
    let cfg = ParseConfig { max_tool_calls: usize::MAX, image_namespace: None };
    let mut segs = lex_segments(text, &cfg).ok()?.into_iter();
    let (think, act, rest) = (segs.next()?, segs.next()?, segs.next());
    if rest.is_some() || !matches!(think, Segment::Think { .. }) {
        return None;
    }
    match act {
        Segment::ToolCall(_) => Some(Emission::Call(think, act)),
        Segment::Answer { .. } => Some(Emission::Answer(think, act)),
        _ => None,
    }
}

/// Runs one trajectory to completion.
///
/// The loop ends on an answer, on an unreadable emission (`Malformed`), or
/// when the policy still tries to call the tool after the cap has been
/// reached (`ToolCapReached`). Crops are registered in `store` under
/// `"<trajectory id>/crop-<n>"`.
pub fn run_rollout(
    policy: &dyn Policy,
    question: &Question,
    store: &ImageStore,
    cfg: &RolloutConfig,
    trajectory_id: &str,
    rollout_index: usize,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    let image_id = question.image_id();
    let image = store.get(&image_id).ok_or_else(|| RolloutError::UnknownImage(image_id.clone()))?;
    let mut segments: Vec<Segment> = Vec::new();
    let mut calls = 0;
    let terminated = loop {
        let prefix = render_segments(&segments);
        let must_answer = calls >= cfg.max_tool_calls;
        let ctx = PolicyContext {
            question,
            image: &image,
            prefix: &prefix,
            seed: mix_seed(seed, (segments.len() + calls) as u64),
            rollout_index,
            step: calls,
            tool_calls: calls,
            must_answer,
        };
        match read_emission(&policy.emit(&ctx)) {
            None => break Termination::Malformed,
            Some(Emission::Answer(think, answer)) => {
                segments.push(think);
                segments.push(answer);
                break Termination::Answered;
            }
            Some(Emission::Call(..)) if must_answer => break Termination::ToolCapReached,
            Some(Emission::Call(think, Segment::ToolCall(call))) => {
                let outcome = if call.is_known_tool() {
                    let crop_id = ImageId::new(format!("{trajectory_id}/crop-{calls}"));
                    match apply_zoom(&call, &image_id, crop_id.clone(), store) {
                        Ok(crop) => {
                            store.insert(crop.image);
                            ToolOutcome::Image(crop_id)
                        }
                        Err(e) => ToolOutcome::Error(e.code().to_string()),
                    }
                } else {
                    ToolOutcome::Error("unknown_tool".to_string())
                };
                segments.push(think);
                segments.push(Segment::ToolCall(call));
                segments.push(Segment::ToolResult { outcome });
                calls += 1;
            }
            Some(Emission::Call(..)) => unreachable!("read_emission pairs calls with ToolCall segments"),
        }
    };
    Ok(Trajectory {
        id: trajectory_id.to_string(),
        question: question.question.clone(),
        original_image: image_id,
        segments,
        terminated,
    })
}

pub struct RewardContext<'a> {
    pub weights: RewardWeights,
    pub provider: &'a dyn EmbeddingProvider,
    pub epsilon: f64,
}

impl<'a> RewardContext<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider) -> Self {
        RewardContext { weights: RewardWeights::default(), provider, epsilon: DEFAULT_EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutFailure {
    pub index: usize,
    pub error: RolloutError,
}

#[derive(Debug, Clone)]
pub struct GroupOutcome {
    pub group: RolloutGroup,
    pub breakdowns: Vec<RewardBreakdown>,
    /// Rollouts that could not be produced or scored; they score 0.
    pub failures: Vec<RolloutFailure>,
}

pub fn rollout_id(question_id: &str, index: usize) -> String {
    format!("{question_id}/r{index}")
}

/// Runs `cfg.group_size` rollouts, scores them for `cfg.stage` and fills in
/// group-relative advantages. Rollout `i` uses seed `mix_seed(cfg.seed, i)`.
pub fn run_group(
    policy: &dyn Policy,
    question: &Question,
    store: &ImageStore,
    cfg: &RolloutConfig,
    rewards: &RewardContext<'_>,
) -> Result<GroupOutcome, RolloutError> {
    if cfg.group_size == 0 {
        return Err(RolloutError::InvalidConfig("group_size must be at least 1".into()));
    }
    rewards.weights.validate()?;
    let parse_cfg = cfg.parse_config();
    let results: Vec<(Trajectory, Result<RewardBreakdown, RolloutError>)> = (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let id = rollout_id(&question.id, i);
            let traj = match run_rollout(policy, question, store, cfg, &id, i, mix_seed(cfg.seed, i as u64)) {
                Ok(t) => t,
                Err(e) => {
                    let empty = Trajectory {
                        id,
                        question: question.question.clone(),
                        original_image: question.image_id(),
                        segments: Vec::new(),
                        terminated: Termination::Malformed,
                    };
                    return (empty, Err(e));
                }
            };
            // Score through the text form so that rewards see exactly what gets logged.
            let parsed = crate::transcript::parse_transcript(
                &render_segments(&traj.segments),
                crate::transcript::TrajectoryMeta {
                    id: traj.id.clone(),
                    question: traj.question.clone(),
                    original_image: traj.original_image.clone(),
                },
                &parse_cfg,
            );
            let sims = SimSource::Replay { store, provider: rewards.provider };
            let scored =
                score(&parsed, &question.answer, cfg.stage, &rewards.weights, sims).map_err(RolloutError::from);
            (traj, scored)
        })
        .collect();

    let mut trajectories = Vec::with_capacity(results.len());
    let mut breakdowns = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (index, (traj, scored)) in results.into_iter().enumerate() {
        let breakdown = scored.unwrap_or_else(|error| {
            failures.push(RolloutFailure { index, error });
            RewardBreakdown::malformed(cfg.stage, rewards.weights)
        });
        trajectories.push(traj);
        breakdowns.push(breakdown);
    }
    let totals = breakdowns.iter().map(|b| b.r_total).collect();
    let group = RolloutGroup::new(question.id.clone(), trajectories, totals, rewards.epsilon)?;
    Ok(GroupOutcome { group, breakdowns, failures })
}

/// The trajectory as a JSONL record.
pub fn trajectory_record(traj: &Trajectory, question: &Question, image: &ImageRecord) -> TrajectoryRecord {
    TrajectoryRecord {
        id: traj.id.clone(),
        question_id: Some(question.id.clone()),
        question: traj.question.clone(),
        original_image: ImageRef { id: traj.original_image.clone(), width: image.width(), height: image.height() },
        transcript: render_segments(&traj.segments),
        answer: Some(question.answer),
        sims: None,
    }
}

impl fmt::Debug for dyn Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Policy({})", self.name())
    }
}

/// Chooses a sub-policy by rollout index, wrapping around.
pub struct Roster {
    name: String,
    members: Vec<Arc<dyn Policy>>,
}

impl Roster {
    pub fn new(members: Vec<Arc<dyn Policy>>) -> Self {
        assert!(!members.is_empty(), "roster needs at least one policy");
        let name = members.iter().map(|p| p.name()).collect::<Vec<_>>().join("+");
        Roster { name, members }
    }
}

impl Policy for Roster {
    fn name(&self) -> &str {
        &self.name
    }

    fn emit(&self, ctx: &PolicyContext<'_>) -> String {
        self.members[ctx.rollout_index % self.members.len()].emit(ctx)
    }
}

pub mod policies {
    //! Scripted policies for exercising the environment and rewards.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{Policy, PolicyContext};
    use crate::reward::AnswerKey;
    use crate::transcript::{render_segment, BBox, Segment, ToolCall};
    use crate::zoom::DEFAULT_MIN_SIDE;

    /// Object labels scripted policies draw from.
    pub const VOCABULARY: [&str; 10] =
        ["car", "pedestrian", "traffic light", "truck", "cyclist", "bus", "stop sign", "motorcycle", "cone", "barrier"];

    fn rng(ctx: &PolicyContext<'_>) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(ctx.seed)
    }

    fn think(text: &str) -> String {
        let mut out = String::new();
        render_segment(&Segment::Think { text: text.to_string() }, &mut out);
        out
    }

    pub fn emit_call(thought: &str, bbox: BBox, label: &str) -> String {
        let mut out = think(thought);
        render_segment(&Segment::ToolCall(ToolCall::zoom(bbox, label)), &mut out);
        out
    }

    pub fn emit_answer(thought: &str, answer: &AnswerKey) -> String {
        let mut out = think(thought);
        render_segment(&Segment::Answer { text: answer.canonical_text() }, &mut out);
        out
    }

    /// How a scripted policy answers.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Answering {
        Correct,
        Wrong,
        /// Uniform over the question's answer space.
        Random,
    }

    impl Answering {
        fn pick(self, ctx: &PolicyContext<'_>, rng: &mut ChaCha8Rng) -> AnswerKey {
            match self {
                Answering::Correct => ctx.question.answer,
                Answering::Wrong => ctx.question.wrong_answer(),
                Answering::Random => {
                    let space = ctx.question.answer_space();
                    space[rng.random_range(0..space.len())]
                }
            }
        }
    }

    /// A box with both sides at least `min_side`, fully inside the frame.
    pub fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32, min_side: u32) -> BBox {
        let (w, h) = (width as i64, height as i64);
        let side = min_side as i64;
        let bw = if w > side { rng.random_range(side..=w) } else { w };
        let bh = if h > side { rng.random_range(side..=h) } else { h };
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        BBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive extent")
    }

    pub struct AnswerImmediately(pub Answering);

    impl Policy for AnswerImmediately {
        fn name(&self) -> &str {
            "immediate"
        }

        fn emit(&self, ctx: &PolicyContext<'_>) -> String {
            let answer = self.0.pick(ctx, &mut rng(ctx));
            emit_answer("I can answer directly.", &answer)
        }
    }

    /// Calls the tool on random boxes every step, even after the cap.
    pub struct ToolSpammer {
        /// Answer (randomly) once further calls are refused, instead of insisting.
        pub yields_at_cap: bool,
    }

    impl Policy for ToolSpammer {
        fn name(&self) -> &str {
            "spam"
        }

        fn emit(&self, ctx: &PolicyContext<'_>) -> String {
            let mut rng = rng(ctx);
            if ctx.must_answer && self.yields_at_cap {
                return emit_answer("Out of zooms.", &Answering::Random.pick(ctx, &mut rng));
            }
            // occasionally off-frame or tiny, to exercise failed calls
            let bbox = if rng.random_bool(0.2) {
                let x = rng.random_range(-50..(ctx.image.width() as i64 + 50));
                let y = rng.random_range(-50..(ctx.image.height() as i64 + 50));
                BBox::new(x, y, x + rng.random_range(1..40), y + rng.random_range(1..40)).expect("positive extent")
            } else {
                random_box(&mut rng, ctx.image.width(), ctx.image.height(), 1)
            };
            let label = super::policies::VOCABULARY[rng.random_range(0..VOCABULARY.len())];
            emit_call("Let me look closer.", bbox, label)
        }
    }

    /// Zooms once onto the dominant annotated object with a small jitter
    /// (IoU with the object stays at least 0.5), names it, then answers correctly.
    pub struct Grounded;

    /// Shifts each edge of `tag` by a small seeded amount, keeping IoU >= 0.5.
    pub fn jitter_box(rng: &mut ChaCha8Rng, tag: BBox, width: u32, height: u32) -> BBox {
        for _ in 0..32 {
            let dx = (tag.width() / 8).max(1);
            let dy = (tag.height() / 8).max(1);
            let b = BBox::new(
                (tag.x_min + rng.random_range(-dx..=dx)).max(0),
                (tag.y_min + rng.random_range(-dy..=dy)).max(0),
                (tag.x_max + rng.random_range(-dx..=dx)).min(width as i64),
                (tag.y_max + rng.random_range(-dy..=dy)).min(height as i64),
            );
            if let Ok(b) = b {
                if b.iou(&tag) >= 0.5 && b.width() >= DEFAULT_MIN_SIDE as i64 && b.height() >= DEFAULT_MIN_SIDE as i64 {
                    return b;
                }
            }
        }
        tag
    }

    impl Policy for Grounded {
        fn name(&self) -> &str {
            "grounded"
        }

        fn emit(&self, ctx: &PolicyContext<'_>) -> String {
            let mut rng = rng(ctx);
            match ctx.image.dominant_tag() {
                Some(tag) if ctx.tool_calls == 0 && !ctx.must_answer => {
                    let bbox = jitter_box(&mut rng, tag.bbox, ctx.image.width(), ctx.image.height());
                    emit_call(&format!("The {} matters here.", tag.label), bbox, &tag.label)
                }
                _ => emit_answer("The crop settles it.", &ctx.question.answer),
            }
        }
    }

    /// Zooms onto a random region, claims to see an object that is not
    /// annotated anywhere in the image, then answers at random.
    pub struct Hallucinating;

    impl Policy for Hallucinating {
        fn name(&self) -> &str {
            "hallucinating"
        }

        fn emit(&self, ctx: &PolicyContext<'_>) -> String {
            let mut rng = rng(ctx);
            if ctx.tool_calls > 0 || ctx.must_answer {
                return emit_answer("Clearly visible.", &Answering::Random.pick(ctx, &mut rng));
            }
            let present: Vec<String> = ctx.image.content_tags().iter().map(|t| t.label.to_lowercase()).collect();
            let absent: Vec<&str> = VOCABULARY.iter().copied().filter(|l| !present.iter().any(|p| p == l)).collect();
            let label = if absent.is_empty() { "unicorn" } else { absent[rng.random_range(0..absent.len())] };
            let bbox = random_box(&mut rng, ctx.image.width(), ctx.image.height(), DEFAULT_MIN_SIDE);
            emit_call(&format!("I see a {label}."), bbox, label)
        }
    }

    /// Names the right object but zooms onto a random box, then answers correctly.
    pub struct RandomBox;

    impl Policy for RandomBox {
        fn name(&self) -> &str {
            "random"
        }

        fn emit(&self, ctx: &PolicyContext<'_>) -> String {
            let mut rng = rng(ctx);
            match ctx.image.dominant_tag() {
                Some(tag) if ctx.tool_calls == 0 && !ctx.must_answer => {
                    let bbox = random_box(&mut rng, ctx.image.width(), ctx.image.height(), DEFAULT_MIN_SIDE);
                    emit_call("Somewhere here.", bbox, &tag.label)
                }
                _ => emit_answer("Done.", &ctx.question.answer),
            }
        }
    }

    /// Emits text outside the grammar.
    pub struct Garbage;

    impl Policy for Garbage {
        fn name(&self) -> &str {
            "garbage"
        }

        fn emit(&self, _ctx: &PolicyContext<'_>) -> String {
            "I think the answer is B".to_string()
        }
    }
}

pub mod scenes {
    //! Seeded synthetic scenes with annotated objects.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{option_letter, ChoiceOption, Question, QuestionKind};
    use crate::reward::AnswerKey;
    use crate::transcript::{BBox, ImageId};
    use crate::zoom::{ContentTag, ImageRecord};

    const COLORS: [&str; 6] = ["red", "green", "yellow", "white", "black", "blue"];

    /// A 96..=192 px square-ish image with one or two non-overlapping tagged
    /// objects and a four-option question about the largest one.
    pub fn synthetic_scene(seed: u64, index: usize) -> (Question, ImageRecord) {
        let mut rng = ChaCha8Rng::seed_from_u64(super::mix_seed(seed, index as u64));
        let width: u32 = rng.random_range(96..=192);
        let height: u32 = rng.random_range(96..=192);
        let pixels = (0..width * height).map(|_| rng.random::<u8>()).collect();
        let mut labels: Vec<&str> = super::policies::VOCABULARY.to_vec();
        let mut tags: Vec<ContentTag> = Vec::new();
        let n_tags = rng.random_range(1..=2);
        while tags.len() < n_tags {
            let side_w = rng.random_range(24..=48i64);
            let side_h = rng.random_range(24..=48i64);
            let x0 = rng.random_range(0..=width as i64 - side_w);
            let y0 = rng.random_range(0..=height as i64 - side_h);
            let bbox = BBox::new(x0, y0, x0 + side_w, y0 + side_h).expect("positive extent");
            if tags.iter().any(|t| t.bbox.intersection(&bbox).is_some()) {
                continue;
            }
            let label = labels.remove(rng.random_range(0..labels.len()));
            tags.push(ContentTag { bbox, label: label.to_string() });
        }
        let id = format!("scene-{seed}-{index}");
        let image = ImageRecord::new(ImageId::new(id.clone()), width, height, pixels, tags).expect("valid scene");
        let subject = image.dominant_tag().expect("at least one tag").label.clone();
        let mut colors = COLORS.to_vec();
        let options: Vec<ChoiceOption> = (0..4)
            .map(|i| ChoiceOption {
                letter: option_letter(i),
                text: colors.remove(rng.random_range(0..colors.len())).into(),
            })
            .collect();
        let answer = AnswerKey::choice(option_letter(rng.random_range(0..4)));
        let question = Question {
            id: format!("q-{seed}-{index}"),
            question: format!("What color is the {subject}?"),
            kind: QuestionKind::Mcq,
            options,
            answer,
            image: id,
        };
        (question, image)
    }
}
