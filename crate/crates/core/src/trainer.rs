//! Behavior cloning, rollout collection and the clipped policy update.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    combine, memory_advantages, trajectory_advantages, AdvantageMap, GroupMode, RolloutGroup,
};
use crate::env::dataset::MultiObjectiveQuestion;
use crate::env::episode::{run_episode, EpisodeConfig};
use crate::env::kb::KnowledgeBase;
use crate::error::TrainError;
use crate::par::{fold_chunks, map_indexed, ExecMode};
use crate::policy::{Gradient, PolicyParams, SampleConfig};
use crate::reward::{gold_answer_tokens, memory_rewards, trajectory_reward};
use crate::rng::{derive, seeded};
use crate::trajectory::{check_format, Context, ContextMode, PolicyTurn, Trajectory};
use crate::vocab::{Token, Vocabulary};

/// Work items per chunk in gradient reductions.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient ascent.
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer `{s}`")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Gradient-ascent optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { n } else { 0 };
        Optimizer {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Moves `params` uphill along `grad`. A positive `max_norm` rescales
    /// larger gradients to that norm first. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient, lr: f64, max_norm: f64) -> f64 {
        let (delta, norm) = self.propose(grad, lr, max_norm);
        if lr != 0.0 {
            params.add_scaled(&delta, 1.0);
        }
        norm
    }

    /// The step [`step`](Self::step) would take, and the pre-clip norm.
    pub fn propose(&mut self, grad: &Gradient, lr: f64, max_norm: f64) -> (Gradient, f64) {
        let norm = grad.norm();
        let scale = if max_norm > 0.0 && norm > max_norm { max_norm / norm } else { 1.0 };
        let mut delta = Gradient {
            data: vec![0.0; grad.data.len()],
        };
        if lr == 0.0 {
            return (delta, norm);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (d, g) in delta.data.iter_mut().zip(&grad.data) {
                    *d = lr * scale * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (i, d) in delta.data.iter_mut().enumerate() {
                    let g = scale * grad.data[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    *d = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
                }
            }
        }
        (delta, norm)
    }
}

// ---------------------------------------------------------------------------
// Behavior cloning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Policy turns per minibatch.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub context_mode: ContextMode,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 10,
            learning_rate: 3e-3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            context_mode: ContextMode::Truncated,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    /// Mean per-token NLL over the demo set before training and after each
    /// epoch.
    pub nll: Vec<f64>,
}

/// Per-token mean negative log-likelihood of the policy tokens of `turns`.
pub fn demo_nll(params: &PolicyParams, turns: &[PolicyTurn], exec: ExecMode) -> Result<f64, TrainError> {
    let acc = fold_chunks(
        exec,
        turns.len(),
        CHUNK,
        || Ok((0.0, 0usize)),
        |acc: &mut Result<(f64, usize), TrainError>, i| {
            if let Ok((sum, n)) = acc {
                match params.log_prob(&turns[i].context, &turns[i].tokens) {
                    Ok(lp) => {
                        *sum -= lp.iter().sum::<f64>();
                        *n += lp.len();
                    }
                    Err(e) => *acc = Err(e.into()),
                }
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok((s, n)), Ok((s2, n2))) => {
                *s += s2;
                *n += n2;
            }
            (Ok(_), Err(e)) => *a = Err(e),
            _ => {}
        },
    );
    let (sum, n) = acc.unwrap_or(Ok((0.0, 0)))?;
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Supervised fine-tuning on the policy tokens of `demos`.
pub fn behavior_clone(
    params: &PolicyParams,
    demos: &[Trajectory],
    cfg: &BcConfig,
    exec: ExecMode,
) -> Result<(PolicyParams, BcReport), TrainError> {
    if demos.is_empty() {
        return Err(TrainError::EmptyDemoSet);
    }
    if let Some(i) = demos.iter().position(|d| !check_format(d).valid) {
        return Err(TrainError::InvalidDemo(i));
    }
    let turns: Vec<PolicyTurn> = demos
        .iter()
        .flat_map(|d| d.policy_turns(cfg.context_mode))
        .filter(|t| !t.tokens.is_empty())
        .collect();
    let mut params = params.clone();
    let mut nll = vec![demo_nll(&params, &turns, exec)?];
    let mut opt = Optimizer::new(cfg.optimizer, params.param_count());
    let mut order: Vec<usize> = (0..turns.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(cfg.seed, derive(0x6263, &[epoch as u64])));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let tokens: usize = batch.iter().map(|&i| turns[i].tokens.len()).sum();
            let w = 1.0 / tokens as f64;
            let grad = weighted_grad(&params, batch.len(), exec, |i| {
                let turn = &turns[batch[i]];
                (&turn.context, &turn.tokens[..], w)
            })?;
            if !grad.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    update: epoch,
                    batch: Box::new(Vec::new()),
                });
            }
            opt.step(&mut params, &grad, cfg.learning_rate, 0.0);
        }
        nll.push(demo_nll(&params, &turns, exec)?);
    }
    Ok((params, BcReport { nll }))
}

/// `sum_i w_i * grad log p(tokens_i | ctx_i)` reduced in a fixed order.
fn weighted_grad<'a>(
    params: &PolicyParams,
    n: usize,
    exec: ExecMode,
    item: impl Fn(usize) -> (&'a Context, &'a [Token], f64) + Sync + Send,
) -> Result<Gradient, TrainError> {
    let shape = *params.shape();
    let acc = fold_chunks(
        exec,
        n,
        CHUNK,
        || Ok(Gradient::zeros(&shape)),
        |acc: &mut Result<Gradient, TrainError>, i| {
            if let Ok(g) = acc {
                let (ctx, tokens, w) = item(i);
                if let Err(e) = params.accumulate_grad_with(ctx, tokens, g, |_, _| w) {
                    *acc = Err(e.into());
                }
            }
        },
        merge_results,
    );
    acc.unwrap_or_else(|| Ok(Gradient::zeros(&shape)))
}

fn merge_results<T: Mergeable>(a: &mut Result<T, TrainError>, b: Result<T, TrainError>) {
    match (a.as_mut(), b) {
        (Ok(x), Ok(y)) => x.merge(y),
        (Ok(_), Err(e)) => *a = Err(e),
        _ => {}
    }
}

trait Mergeable {
    fn merge(&mut self, other: Self);
}

impl Mergeable for Gradient {
    fn merge(&mut self, other: Self) {
        self.add_assign(&other);
    }
}

// ---------------------------------------------------------------------------
// Rollouts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub max_turns: usize,
    pub epochs_per_batch: usize,
    pub seed: u64,
    pub group_mode: GroupMode,
    pub updates: usize,
    pub optimizer: OptimizerKind,
    /// Gradient norm cap before each step; 0 disables.
    pub max_grad_norm: f64,
    pub context_mode: ContextMode,
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// When false every memory advantage is zeroed (trajectory-only credit).
    pub memory_credit: bool,
    /// Step halvings tried when a step lowers the batch objective; the
    /// update is skipped if none helps. 0 takes every step as proposed.
    pub max_backtracks: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            group_size: 8,
            batch_size: 16,
            learning_rate: 0.25,
            clip_epsilon: 0.2,
            kl_beta: 1e-3,
            max_turns: 8,
            epochs_per_batch: 1,
            seed: 0,
            group_mode: GroupMode::Pooled,
            updates: 300,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: 1.0,
            context_mode: ContextMode::Truncated,
            top_k: 3,
            temperature: 1.0,
            max_new_tokens: 48,
            memory_credit: true,
            max_backtracks: 12,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0) || !self.kl_beta.is_finite() {
            return bad("kl_beta must be >= 0");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be >= 0");
        }
        if self.max_turns == 0 || self.top_k == 0 || self.max_new_tokens == 0 {
            return bad("max_turns, top_k and max_new_tokens must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        Ok(())
    }

    pub fn episode(&self, seed: u64) -> EpisodeConfig {
        let mut sample = SampleConfig::step_defaults(seed);
        sample.temperature = self.temperature;
        sample.max_new_tokens = self.max_new_tokens;
        EpisodeConfig {
            max_turns: self.max_turns,
            context_mode: self.context_mode,
            top_k: self.top_k,
            sample,
        }
    }
}

/// Per-token log-probabilities of every policy token of `traj`, in the
/// order of [`crate::advantage::policy_token_kinds`].
pub fn trajectory_log_probs(
    params: &PolicyParams,
    traj: &Trajectory,
    mode: ContextMode,
) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(traj.generated_len());
    for turn in traj.policy_turns(mode) {
        if !turn.tokens.is_empty() {
            out.extend(params.log_prob(&turn.context, &turn.tokens)?);
        }
    }
    Ok(out)
}

/// Samples `group_size` episodes for one question and scores them.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    params: &PolicyParams,
    question_index: usize,
    question: &MultiObjectiveQuestion,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    seed: u64,
    exec: ExecMode,
) -> Result<RolloutGroup, TrainError> {
    if cfg.group_size < 2 {
        return Err(TrainError::InvalidConfig("group_size must be >= 2".into()));
    }
    let gold = gold_answer_tokens(question, vocab)?;
    let rollouts = map_indexed(exec, cfg.group_size, |i| -> Result<_, TrainError> {
        let ecfg = cfg.episode(derive(seed, &[i as u64]));
        let traj = run_episode(params, question, kb, vocab, &ecfg)?;
        let old = trajectory_log_probs(params, &traj, cfg.context_mode)?;
        let reward = trajectory_reward(&traj, question, vocab);
        let mem = memory_rewards(params, &traj, i, &gold, vocab)?;
        Ok((traj, old, reward, mem))
    });
    let mut group = RolloutGroup {
        question: question_index,
        trajectories: Vec::with_capacity(cfg.group_size),
        traj_rewards: Vec::with_capacity(cfg.group_size),
        mem_rewards: Vec::new(),
        old_log_probs: Vec::with_capacity(cfg.group_size),
    };
    for r in rollouts {
        let (traj, old, reward, mem) = r?;
        group.trajectories.push(traj);
        group.old_log_probs.push(old);
        group.traj_rewards.push(reward);
        group.mem_rewards.extend(mem);
    }
    Ok(group)
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub context_mode: ContextMode,
}

impl From<&TrainConfig> for SurrogateConfig {
    fn from(c: &TrainConfig) -> Self {
        SurrogateConfig {
            clip_epsilon: c.clip_epsilon,
            kl_beta: c.kl_beta,
            context_mode: c.context_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub value: f64,
    /// Mean KL estimate, averaged like the objective.
    pub kl: f64,
    pub clip_fraction: f64,
    pub tokens: usize,
    pub gradient: Gradient,
}

/// One token's clipped surrogate term and whether the clipped branch won
/// (strictly smaller than the unclipped one).
#[inline]
pub fn clipped_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Per-token KL estimate `r - log r - 1` with `r = pi_ref / pi_theta`, and
/// its derivative with respect to `log pi_theta`.
#[inline]
pub fn kl_term(log_p: f64, log_ref: f64) -> (f64, f64) {
    let d = log_ref - log_p;
    let r = d.exp();
    (r - d - 1.0, 1.0 - r)
}

/// Objective contribution, KL estimate, clip flag and gradient weight of one
/// token with advantage `a`.
#[inline]
fn token_term(lp: f64, old: f64, reference: f64, a: f64, cfg: &SurrogateConfig) -> (f64, f64, bool, f64) {
    let ratio = (lp - old).exp();
    let (term, clipped) = clipped_term(ratio, a, cfg.clip_epsilon);
    let (k3, dk3) = kl_term(lp, reference);
    let surrogate_w = if clipped { 0.0 } else { a * ratio };
    (term - cfg.kl_beta * k3, k3, clipped, surrogate_w - cfg.kl_beta * dk3)
}

struct SurrogateAcc {
    gradient: Gradient,
    value: f64,
    kl: f64,
    clipped: usize,
    tokens: usize,
}

impl Mergeable for SurrogateAcc {
    fn merge(&mut self, o: Self) {
        self.gradient.add_assign(&o.gradient);
        self.value += o.value;
        self.kl += o.kl;
        self.clipped += o.clipped;
        self.tokens += o.tokens;
    }
}

/// Value and gradient of the clipped, KL-regularized objective over a batch
/// of groups. Every trajectory weighs `1/N_total`, every token within it
/// `1/|tau_i|`.
pub fn surrogate_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    advantages: &[Vec<AdvantageMap>],
    cfg: &SurrogateConfig,
    exec: ExecMode,
) -> Result<SurrogateOutput, TrainError> {
    let items: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.trajectories.len()).map(move |i| (g, i)))
        .collect();
    let n_total = items.len().max(1) as f64;
    let shape = *params.shape();
    let acc = fold_chunks(
        exec,
        items.len(),
        CHUNK,
        || {
            Ok(SurrogateAcc {
                gradient: Gradient::zeros(&shape),
                value: 0.0,
                kl: 0.0,
                clipped: 0,
                tokens: 0,
            })
        },
        |acc: &mut Result<SurrogateAcc, TrainError>, flat| {
            if let Ok(a) = acc {
                let (g, i) = items[flat];
                if let Err(e) = accumulate_trajectory(params, reference, &groups[g], i, &advantages[g][i], cfg, n_total, flat, a) {
                    *acc = Err(e);
                }
            }
        },
        merge_results,
    );
    let a = acc.unwrap_or_else(|| {
        Ok(SurrogateAcc {
            gradient: Gradient::zeros(&shape),
            value: 0.0,
            kl: 0.0,
            clipped: 0,
            tokens: 0,
        })
    })?;
    Ok(SurrogateOutput {
        value: a.value,
        kl: a.kl,
        clip_fraction: if a.tokens == 0 { 0.0 } else { a.clipped as f64 / a.tokens as f64 },
        tokens: a.tokens,
        gradient: a.gradient,
    })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_trajectory(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &RolloutGroup,
    i: usize,
    adv: &AdvantageMap,
    cfg: &SurrogateConfig,
    n_total: f64,
    flat: usize,
    acc: &mut SurrogateAcc,
) -> Result<(), TrainError> {
    let traj = &group.trajectories[i];
    let old = group.old_log_probs.get(i).ok_or(TrainError::MisalignedAdvantages(flat))?;
    let len = traj.generated_len();
    if adv.tokens.len() != len || old.len() != len {
        return Err(TrainError::MisalignedAdvantages(flat));
    }
    if len == 0 {
        return Ok(());
    }
    let scale = 1.0 / (n_total * len as f64);
    let mut k = 0;
    for turn in traj.policy_turns(cfg.context_mode) {
        if turn.tokens.is_empty() {
            continue;
        }
        let refs = reference.log_prob(&turn.context, &turn.tokens)?;
        let base = k;
        let (mut value, mut kl, mut clipped) = (0.0, 0.0, 0usize);
        params.accumulate_grad_with(&turn.context, &turn.tokens, &mut acc.gradient, |l, lp| {
            let (v, k3, was_clipped, w) = token_term(lp, old[base + l], refs[l], adv.tokens[base + l], cfg);
            value += v;
            kl += k3;
            clipped += usize::from(was_clipped);
            scale * w
        })?;
        acc.value += scale * value;
        acc.kl += scale * kl;
        acc.clipped += clipped;
        acc.tokens += turn.tokens.len();
        k += turn.tokens.len();
    }
    Ok(())
}

/// The value of [`surrogate_objective`] without the gradient.
pub fn surrogate_value(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    advantages: &[Vec<AdvantageMap>],
    cfg: &SurrogateConfig,
    exec: ExecMode,
) -> Result<f64, TrainError> {
    let items: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.trajectories.len()).map(move |i| (g, i)))
        .collect();
    let n_total = items.len().max(1) as f64;
    let acc = fold_chunks(
        exec,
        items.len(),
        CHUNK,
        || Ok(0.0),
        |acc: &mut Result<f64, TrainError>, flat| {
            if let Ok(sum) = acc {
                let (g, i) = items[flat];
                match trajectory_value(params, reference, &groups[g], i, &advantages[g][i], cfg, flat) {
                    Ok(v) => *sum += v / n_total,
                    Err(e) => *acc = Err(e),
                }
            }
        },
        merge_results,
    );
    acc.unwrap_or(Ok(0.0))
}

fn trajectory_value(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &RolloutGroup,
    i: usize,
    adv: &AdvantageMap,
    cfg: &SurrogateConfig,
    flat: usize,
) -> Result<f64, TrainError> {
    let traj = &group.trajectories[i];
    let old = group.old_log_probs.get(i).ok_or(TrainError::MisalignedAdvantages(flat))?;
    let len = traj.generated_len();
    if adv.tokens.len() != len || old.len() != len {
        return Err(TrainError::MisalignedAdvantages(flat));
    }
    let mut value = 0.0;
    let mut k = 0;
    for turn in traj.policy_turns(cfg.context_mode) {
        if turn.tokens.is_empty() {
            continue;
        }
        let lps = params.log_prob(&turn.context, &turn.tokens)?;
        let refs = reference.log_prob(&turn.context, &turn.tokens)?;
        for (l, lp) in lps.into_iter().enumerate() {
            value += token_term(lp, old[k + l], refs[l], adv.tokens[k + l], cfg).0;
        }
        k += turn.tokens.len();
    }
    Ok(if len == 0 { 0.0 } else { value / len as f64 })
}

impl Mergeable for f64 {
    fn merge(&mut self, other: Self) {
        *self += other;
    }
}

/// Largest of `1, 1/2, .., 2^-max_backtracks` for which `params + f * delta`
/// does not lower the batch objective below `current`; 0 if none does.
#[allow(clippy::too_many_arguments)]
fn backtrack(
    params: &PolicyParams,
    delta: &Gradient,
    current: f64,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    advantages: &[Vec<AdvantageMap>],
    cfg: &SurrogateConfig,
    max_backtracks: usize,
    exec: ExecMode,
) -> Result<f64, TrainError> {
    let mut f = 1.0;
    for _ in 0..=max_backtracks {
        let mut trial = params.clone();
        trial.add_scaled(delta, f);
        let v = surrogate_value(&trial, reference, groups, advantages, cfg, exec)?;
        if v >= current {
            return Ok(f);
        }
        f *= 0.5;
    }
    Ok(0.0)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub update: usize,
    pub surrogate_value: f64,
    pub kl_value: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Fraction of the proposed step taken after backtracking.
    pub step_scale: f64,
    pub mean_reward_t: f64,
    pub mean_reward_m: f64,
    pub mean_p_mem: f64,
    pub format_rate: f64,
    pub mean_steps: f64,
}

/// Everything produced by one update, handed to the caller's hook.
pub struct UpdateEvent<'a> {
    pub report: &'a UpdateReport,
    pub params: &'a PolicyParams,
    pub groups: &'a [RolloutGroup],
    pub traj_advantages: &'a [Vec<f64>],
    pub mem_advantages: &'a [BTreeMap<(usize, usize), f64>],
}

/// Token advantages for a group, with memory credit optionally zeroed.
pub fn group_advantages(
    group: &RolloutGroup,
    mode: GroupMode,
    memory_credit: bool,
) -> Result<(Vec<f64>, BTreeMap<(usize, usize), f64>, Vec<AdvantageMap>), TrainError> {
    let a_t = trajectory_advantages(group);
    let mut a_m = memory_advantages(group, mode);
    if !memory_credit {
        a_m.values_mut().for_each(|v| *v = 0.0);
    }
    let maps = combine(group, &a_t, &a_m)?;
    Ok((a_t, a_m, maps))
}

/// Runs `cfg.updates` updates starting from `params`, regularized toward
/// `reference`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &PolicyParams,
    reference: &PolicyParams,
    questions: &[MultiObjectiveQuestion],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    exec: ExecMode,
    mut on_update: impl FnMut(&UpdateEvent<'_>),
) -> Result<(PolicyParams, Vec<UpdateReport>), TrainError> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(TrainError::InvalidConfig("no training questions".into()));
    }
    let mut params = params.clone();
    let mut opt = Optimizer::new(cfg.optimizer, params.param_count());
    let mut reports = Vec::with_capacity(cfg.updates);
    let surrogate_cfg = SurrogateConfig::from(cfg);
    let mut order: Vec<usize> = Vec::new();
    for update in 0..cfg.updates {
        // Walk through shuffled passes over the question set.
        if order.len() < cfg.batch_size {
            let mut pass: Vec<usize> = (0..questions.len()).collect();
            pass.shuffle(&mut seeded(cfg.seed, derive(0x7472, &[update as u64])));
            order.extend(pass);
        }
        let batch: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let old = params.snapshot();
        let groups: Vec<RolloutGroup> = map_indexed(exec, batch.len(), |b| {
            let qi = batch[b];
            let seed = derive(cfg.seed, &[update as u64, b as u64]);
            collect_group(&old, qi, &questions[qi], kb, vocab, cfg, seed, exec)
        })
        .into_iter()
        .collect::<Result<_, _>>()?;

        let mut traj_adv = Vec::with_capacity(groups.len());
        let mut mem_adv = Vec::with_capacity(groups.len());
        let mut maps = Vec::with_capacity(groups.len());
        for g in &groups {
            let (a_t, a_m, m) = group_advantages(g, cfg.group_mode, cfg.memory_credit)?;
            traj_adv.push(a_t);
            mem_adv.push(a_m);
            maps.push(m);
        }

        let mut out = None;
        let mut grad_norm = 0.0;
        let mut step_scale = 0.0;
        for _ in 0..cfg.epochs_per_batch.max(1) {
            let s = surrogate_objective(&params, reference, &groups, &maps, &surrogate_cfg, exec)?;
            if !s.gradient.is_finite() || !s.value.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    update,
                    batch: Box::new(groups.iter().flat_map(|g| g.trajectories.clone()).collect()),
                });
            }
            let (delta, norm) = opt.propose(&s.gradient, cfg.learning_rate, cfg.max_grad_norm);
            grad_norm = norm;
            step_scale = if cfg.max_backtracks == 0 || cfg.learning_rate == 0.0 {
                1.0
            } else {
                backtrack(&params, &delta, s.value, reference, &groups, &maps, &surrogate_cfg, cfg.max_backtracks, exec)?
            };
            if step_scale > 0.0 {
                params.add_scaled(&delta, step_scale);
            }
            out = Some(s);
        }
        let s = out.expect("at least one epoch");

        let trajs = groups.iter().flat_map(|g| &g.trajectories);
        let n = trajs.clone().count().max(1) as f64;
        let mems: Vec<_> = groups.iter().flat_map(|g| &g.mem_rewards).collect();
        let m = mems.len().max(1) as f64;
        let report = UpdateReport {
            update,
            surrogate_value: s.value,
            kl_value: s.kl,
            clip_fraction: s.clip_fraction,
            grad_norm,
            step_scale,
            mean_reward_t: groups
                .iter()
                .flat_map(|g| &g.traj_rewards)
                .map(|r| f64::from(r.value))
                .sum::<f64>()
                / n,
            mean_reward_m: mems.iter().map(|r| r.value).sum::<f64>() / m,
            mean_p_mem: mems.iter().map(|r| r.p_mem).sum::<f64>() / m,
            format_rate: groups
                .iter()
                .flat_map(|g| &g.traj_rewards)
                .filter(|r| r.format_ok)
                .count() as f64
                / n,
            mean_steps: trajs.map(|t| t.steps.len() as f64).sum::<f64>() / n,
        };
        on_update(&UpdateEvent {
            report: &report,
            params: &params,
            groups: &groups,
            traj_advantages: &traj_adv,
            mem_advantages: &mem_adv,
        });
        reports.push(report);
    }
    Ok((params, reports))
}
