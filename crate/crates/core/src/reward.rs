//! Trajectory reward and the conditional-probability memory reward.

use serde::{Deserialize, Serialize};

use crate::env::dataset::{MultiObjectiveQuestion, ANSWER_JOINER};
use crate::env::judge::judge_answer;
use crate::error::RewardError;
use crate::policy::PolicyParams;
use crate::trajectory::{check_format, Context, SegmentKind, TagTokens, Trajectory};
use crate::vocab::{Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryReward {
    pub value: u8,
    pub format_ok: bool,
    pub answer_ok: bool,
}

/// 1 iff the trajectory is well formed and its answer is an exact match.
pub fn trajectory_reward(
    traj: &Trajectory,
    question: &MultiObjectiveQuestion,
    vocab: &Vocabulary,
) -> TrajectoryReward {
    let format_ok = check_format(traj).valid;
    let answer_ok = traj
        .predicted_answer
        .as_ref()
        .is_some_and(|a| judge_answer(&vocab.detokenize(a), &question.gold_answers).em == 1);
    TrajectoryReward {
        value: u8::from(format_ok && answer_ok),
        format_ok,
        answer_ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReward {
    /// Index of the trajectory within its rollout group.
    pub trajectory: usize,
    /// 1-based step holding the memory segment.
    pub step: usize,
    pub p_mem: f64,
    pub epsilon: f64,
    pub value: f64,
}

/// Geometric-mean probability of `answer` after `query + conditioning`,
/// computed as `exp(mean log p)`.
pub fn answer_conditional_probability(
    policy: &PolicyParams,
    query: &[Token],
    conditioning: &[Token],
    answer: &[Token],
) -> Result<f64, RewardError> {
    if answer.is_empty() {
        return Err(RewardError::EmptyAnswer);
    }
    let ctx = Context::new(query.to_vec(), conditioning.to_vec());
    Ok(geometric_mean(&policy.log_prob(&ctx, answer)?))
}

/// `exp(mean log p)` over per-token log-probabilities; 0 for an empty slice.
pub fn geometric_mean(log_probs: &[f64]) -> f64 {
    if log_probs.is_empty() {
        return 0.0;
    }
    (log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp()
}

/// Tokens that put the policy in answering position:
/// `<think> answer </think> <answer>`.
pub fn answer_prompt(vocab: &Vocabulary) -> [Token; 4] {
    let answer = vocab.get("answer").expect("function word");
    [
        TagTokens.open(SegmentKind::Think),
        answer,
        TagTokens.close(SegmentKind::Think),
        TagTokens.open(SegmentKind::Answer),
    ]
}

/// Memory reward of step `t`: the answer probability given the query and the
/// memory segment alone, minus the same probability given the query and
/// every earlier step in full. Both conditionings end in [`answer_prompt`].
pub fn memory_reward(
    policy: &PolicyParams,
    traj: &Trajectory,
    t: usize,
    gold_answer_tokens: &[Token],
    vocab: &Vocabulary,
) -> Result<MemoryReward, RewardError> {
    let step = traj
        .steps
        .get(t.wrapping_sub(1))
        .ok_or(RewardError::NoMemorySegment { step: t })?;
    let mem = step.memory().ok_or(RewardError::NoMemorySegment { step: t })?;
    let prompt = answer_prompt(vocab);

    let mut mem_cond = Vec::with_capacity(mem.span_len() + prompt.len());
    mem.push_span(&TagTokens, &mut mem_cond);
    mem_cond.extend_from_slice(&prompt);

    let mut prefix = Vec::new();
    for s in &traj.steps[..t - 1] {
        s.push_tokens(&mut prefix);
    }
    prefix.extend_from_slice(&prompt);

    let mut r = reward_from_conditionings(policy, &traj.query, &mem_cond, &prefix, gold_answer_tokens)?;
    r.step = t;
    Ok(r)
}

/// Memory reward from explicit conditioning sequences. `trajectory` and
/// `step` are left at 0.
pub fn reward_from_conditionings(
    policy: &PolicyParams,
    query: &[Token],
    memory: &[Token],
    prefix: &[Token],
    answer: &[Token],
) -> Result<MemoryReward, RewardError> {
    let p_mem = answer_conditional_probability(policy, query, memory, answer)?;
    let epsilon = answer_conditional_probability(policy, query, prefix, answer)?;
    Ok(MemoryReward {
        trajectory: 0,
        step: 0,
        p_mem,
        epsilon,
        value: p_mem - epsilon,
    })
}

/// Memory rewards for every step of `traj` that carries a memory segment.
pub fn memory_rewards(
    policy: &PolicyParams,
    traj: &Trajectory,
    index: usize,
    gold_answer_tokens: &[Token],
    vocab: &Vocabulary,
) -> Result<Vec<MemoryReward>, RewardError> {
    traj.steps
        .iter()
        .filter(|s| s.memory().is_some())
        .map(|s| {
            let mut r = memory_reward(policy, traj, s.index, gold_answer_tokens, vocab)?;
            r.trajectory = index;
            Ok(r)
        })
        .collect()
}

/// `s^ans`: gold answers joined by `;` and tokenized.
pub fn gold_answer_tokens(
    question: &MultiObjectiveQuestion,
    vocab: &Vocabulary,
) -> Result<Vec<Token>, RewardError> {
    Ok(vocab.tokenize(&question.gold_answers.join(ANSWER_JOINER))?)
}
