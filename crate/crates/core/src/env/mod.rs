//! Synthetic multi-objective QA environment.

pub mod dataset;
pub mod episode;
pub mod judge;
pub mod kb;
pub mod normalize;

pub use dataset::{
    generate_dataset, generate_kb, Dataset, DatasetOptions, MultiObjectiveQuestion, Objective,
    ANSWER_JOINER, OBJECTIVE_JOINER,
};
pub use episode::{
    run_episode, EndlessSearch, EpisodeConfig, ImmediateAnswer, ScriptedSolver, StepPolicy,
    StepView,
};
pub use judge::{judge_answer, word_f1, Judgement};
pub use kb::{search, Fact, KnowledgeBase, ToolResult, RELATIONS};
pub use normalize::normalize_words;
