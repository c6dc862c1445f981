//! Interleaved multimodal chain-of-thought with a zoom tool: transcript
//! grammar, the zoom environment, grounding and outcome rewards, group
//! relative advantages, rollouts, verifiable-data generation and
//! evaluation metrics.

pub mod datagen;
pub mod embedding;
pub mod eval;
pub mod grpo;
pub mod http;
pub mod reward;
pub mod rollout;
pub mod transcript;
pub mod zoom;

pub use embedding::{EmbedError, Embedding, EmbeddingProvider, MockEmbedder, RemoteEmbedder};
pub use grpo::{group_advantages, GroupReport, RolloutGroup};
pub use reward::{AnswerKey, RewardBreakdown, RewardReport, RewardWeights, Stage};
pub use rollout::{Policy, Question, RolloutConfig};
pub use transcript::{
    parse_transcript, BBox, ImageId, ParseConfig, ParseError, Segment, Termination, ToolCall, ToolOutcome, Trajectory,
    TrajectoryRecord,
};
pub use zoom::{ContentTag, ImageRecord, ImageStore, ZoomError};
