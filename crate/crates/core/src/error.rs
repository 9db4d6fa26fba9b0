use thiserror::Error;

use crate::trajectory::SegmentKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("out-of-vocabulary word `{word}` at byte {offset}")]
    OutOfVocabulary { word: String, offset: usize },
    #[error("`{0}` cannot be a vocabulary word")]
    InvalidWord(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unclosed <{0}>")]
    UnclosedTag(SegmentKind),
    #[error("<{0}> out of order")]
    IllegalOrder(SegmentKind),
    #[error("second <{0}> segment")]
    DuplicateSegment(SegmentKind),
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("tag opened inside another segment")]
    NestedTag,
    #[error("</{0}> without a matching open tag")]
    UnexpectedClose(SegmentKind),
    #[error("text outside of any segment")]
    StrayText,
    #[error("step has neither a tool call nor an answer")]
    IncompleteStep,
    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
}

#[derive(Debug, Error)]
pub enum TrajectoryIoError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("step {step}: segment text contains a tag token")]
    TagInContent { step: usize },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("knowledge base of {kb_size} facts supports {available} objectives, {requested} requested")]
    InsufficientCapacity {
        kb_size: usize,
        requested: usize,
        available: usize,
    },
    #[error("invalid dataset request: {0}")]
    InvalidRequest(String),
    #[error("invalid knowledge base: {0}")]
    InvalidKnowledgeBase(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("token {0} is outside the vocabulary")]
    OutOfVocabulary(u32),
    #[error("continuation is empty")]
    EmptyContinuation,
    #[error("invalid policy shape: {0}")]
    InvalidShape(String),
    #[error("invalid sample config: {0}")]
    InvalidSampleConfig(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint vocabulary hash {found} does not match dataset vocabulary {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("step {step} of trajectory has no memory segment")]
    NoMemorySegment { step: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdvantageError {
    #[error("memory advantage for trajectory {traj}, step {step} has no memory segment")]
    IndexMismatch { traj: usize, step: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no demonstrations given")]
    EmptyDemoSet,
    #[error("demonstration {0} is not format-valid")]
    InvalidDemo(usize),
    #[error("advantages are not aligned with trajectory {0}")]
    MisalignedAdvantages(usize),
    #[error("non-finite gradient at update {update}")]
    NonFiniteGradient {
        update: usize,
        batch: Box<Vec<crate::trajectory::Trajectory>>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("`{key}` = {value} is out of range (accepted: {accepted})")]
    OutOfRange {
        key: String,
        value: String,
        accepted: String,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown preset `{0}` (expected desk or paper)")]
    UnknownPreset(String),
    #[error("{0}")]
    Io(String),
}
