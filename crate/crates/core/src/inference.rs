//! Greedy evaluation with token accounting, and memory-probability analysis.

use serde::{Deserialize, Serialize};

use crate::env::dataset::MultiObjectiveQuestion;
use crate::env::episode::{run_episode, EpisodeConfig, StepPolicy};
use crate::env::judge::judge_answer;
use crate::env::kb::KnowledgeBase;
use crate::error::RewardError;
use crate::par::{map_indexed, ExecMode};
use crate::policy::{PolicyParams, SampleConfig};
use crate::reward::{gold_answer_tokens, memory_reward};
use crate::trajectory::{token_usage, ContextMode, Termination, Trajectory};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_turns: usize,
    pub top_k: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_turns: 8,
            top_k: 3,
            max_new_tokens: 48,
        }
    }
}

impl EvalConfig {
    pub fn episode(&self, mode: ContextMode) -> EpisodeConfig {
        let mut sample = SampleConfig::step_defaults(0);
        sample.greedy = true;
        sample.max_new_tokens = self.max_new_tokens;
        EpisodeConfig {
            max_turns: self.max_turns,
            context_mode: mode,
            top_k: self.top_k,
            sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub question: usize,
    pub f1: f64,
    pub em: u8,
    pub total_tokens: usize,
    pub peak_tokens: usize,
    pub steps: usize,
    pub terminated: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub count: usize,
    /// Set when there was nothing to evaluate; the means are then 0.
    pub empty: bool,
    pub f1_mean: f64,
    pub em_mean: f64,
    pub tt_mean: f64,
    pub pt_mean: f64,
    pub rows: Vec<EvalRow>,
}

/// Greedy rollouts of every question. Failed episodes come back as `Err`
/// entries instead of aborting the run.
pub fn rollout_eval<P: StepPolicy + ?Sized>(
    policy: &P,
    questions: &[MultiObjectiveQuestion],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    mode: ContextMode,
    cfg: &EvalConfig,
    exec: ExecMode,
) -> Vec<Result<Trajectory, String>> {
    let ecfg = cfg.episode(mode);
    map_indexed(exec, questions.len(), |i| {
        run_episode(policy, &questions[i], kb, vocab, &ecfg).map_err(|e| e.to_string())
    })
}

/// Scores finished rollouts; token usage is counted under `mode`.
pub fn score_rollouts(
    rollouts: &[Result<Trajectory, String>],
    questions: &[MultiObjectiveQuestion],
    vocab: &Vocabulary,
    mode: ContextMode,
) -> EvalReport {
    let rows: Vec<EvalRow> = rollouts
        .iter()
        .zip(questions)
        .enumerate()
        .map(|(i, (r, q))| match r {
            Ok(traj) => {
                let pred = traj
                    .predicted_answer
                    .as_ref()
                    .map(|a| vocab.detokenize(a))
                    .unwrap_or_default();
                let j = if traj.predicted_answer.is_some() {
                    judge_answer(&pred, &q.gold_answers)
                } else {
                    crate::env::judge::Judgement { em: 0, f1: 0.0 }
                };
                let usage = token_usage(traj, mode);
                EvalRow {
                    question: i,
                    f1: j.f1,
                    em: j.em,
                    total_tokens: usage.total_tokens,
                    peak_tokens: usage.peak_step_tokens,
                    steps: traj.steps.len(),
                    terminated: Some(traj.terminated),
                    error: None,
                }
            }
            Err(e) => EvalRow {
                question: i,
                f1: 0.0,
                em: 0,
                total_tokens: 0,
                peak_tokens: 0,
                steps: 0,
                terminated: None,
                error: Some(e.clone()),
            },
        })
        .collect();
    let n = rows.len();
    let mean = |f: &dyn Fn(&EvalRow) -> f64| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / n as f64
        }
    };
    EvalReport {
        mode: mode.to_string(),
        count: n,
        empty: n == 0,
        f1_mean: mean(&|r| r.f1),
        em_mean: mean(&|r| f64::from(r.em)),
        tt_mean: mean(&|r| r.total_tokens as f64),
        pt_mean: mean(&|r| r.peak_tokens as f64),
        rows,
    }
}

/// Greedy evaluation of `policy` on `questions` under `mode`.
pub fn evaluate<P: StepPolicy + ?Sized>(
    policy: &P,
    questions: &[MultiObjectiveQuestion],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    mode: ContextMode,
    cfg: &EvalConfig,
    exec: ExecMode,
) -> EvalReport {
    let rollouts = rollout_eval(policy, questions, kb, vocab, mode, cfg, exec);
    score_rollouts(&rollouts, questions, vocab, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub share: f64,
    /// Mean F1 of the trajectories the bin's memory samples came from.
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProbability {
    pub step: usize,
    pub samples: usize,
    /// `None` when no trajectory has a memory segment at this step.
    pub mean_p_mem: Option<f64>,
    pub active_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityReport {
    pub samples: usize,
    pub bins: Vec<ProbabilityBin>,
    pub steps: Vec<StepProbability>,
    /// Every `(step, p_mem)` sample, in trajectory order.
    pub points: Vec<(usize, f64)>,
}

impl ProbabilityReport {
    /// Lower median of the step index over all memory samples.
    pub fn median_step(&self) -> Option<usize> {
        let mut steps: Vec<usize> = self.points.iter().map(|p| p.0).collect();
        steps.sort_unstable();
        steps.get(steps.len().saturating_sub(1) / 2).copied()
    }

    pub fn mean_p_mem_at(&self, step: usize) -> Option<f64> {
        self.steps.iter().find(|s| s.step == step).and_then(|s| s.mean_p_mem)
    }
}

/// Histogram of `p_mem` over `bins` equal bins of [0, 1] and the per-step
/// mean `p_mem` with the share of trajectories still running.
pub fn analyze_probabilities(
    params: &PolicyParams,
    trajectories: &[Trajectory],
    questions: &[MultiObjectiveQuestion],
    vocab: &Vocabulary,
    bins: usize,
) -> Result<ProbabilityReport, RewardError> {
    let bins = bins.max(1);
    let mut points = Vec::new();
    let mut counts = vec![0usize; bins];
    let mut f1_sums = vec![0.0; bins];
    let max_steps = trajectories.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut step_sums = vec![(0.0, 0usize); max_steps + 1];
    for (traj, q) in trajectories.iter().zip(questions) {
        let gold = gold_answer_tokens(q, vocab)?;
        let f1 = traj
            .predicted_answer
            .as_ref()
            .map_or(0.0, |a| judge_answer(&vocab.detokenize(a), &q.gold_answers).f1);
        for step in traj.steps.iter().filter(|s| s.memory().is_some()) {
            let p = memory_reward(params, traj, step.index, &gold, vocab)?.p_mem;
            let b = ((p * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
            f1_sums[b] += f1;
            step_sums[step.index].0 += p;
            step_sums[step.index].1 += 1;
            points.push((step.index, p));
        }
    }
    let total = points.len();
    let n = trajectories.len().max(1) as f64;
    Ok(ProbabilityReport {
        samples: total,
        bins: (0..bins)
            .map(|b| ProbabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: counts[b],
                share: if total == 0 { 0.0 } else { counts[b] as f64 / total as f64 },
                mean_f1: if counts[b] == 0 { 0.0 } else { f1_sums[b] / counts[b] as f64 },
            })
            .collect(),
        steps: (1..=max_steps)
            .map(|t| StepProbability {
                step: t,
                samples: step_sums[t].1,
                mean_p_mem: (step_sums[t].1 > 0).then(|| step_sums[t].0 / step_sums[t].1 as f64),
                active_share: trajectories.iter().filter(|tr| tr.steps.len() >= t).count() as f64 / n,
            })
            .collect(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, DatasetOptions, ImmediateAnswer, ScriptedSolver};
    use crate::policy::PolicyShape;

    fn data(k: usize, n: usize) -> (crate::env::Dataset, Vocabulary) {
        let d = generate_dataset(k, n, 80, 3, &DatasetOptions::default()).unwrap();
        let v = d.vocabulary().unwrap();
        (d, v)
    }

    #[test]
    fn oracle_scores_perfectly() {
        let (d, v) = data(2, 10);
        for policy in [&ScriptedSolver as &dyn StepPolicy, &ImmediateAnswer] {
            let r = evaluate(policy, &d.questions, &d.kb, &v, ContextMode::Truncated, &EvalConfig::default(), ExecMode::Sequential);
            assert_eq!(r.count, 10);
            assert_eq!((r.em_mean, r.f1_mean), (1.0, 1.0));
            assert!(r.rows.iter().all(|row| row.error.is_none()));
        }
    }

    #[test]
    fn truncated_context_uses_fewer_tokens() {
        let (d, v) = data(4, 6);
        let cfg = EvalConfig {
            max_turns: 16,
            ..EvalConfig::default()
        };
        let run = |m| evaluate(&ScriptedSolver, &d.questions, &d.kb, &v, m, &cfg, ExecMode::Sequential);
        let (t, f) = (run(ContextMode::Truncated), run(ContextMode::Full));
        assert_eq!(t.em_mean, 1.0);
        assert!(t.tt_mean < 0.7 * f.tt_mean, "{} vs {}", t.tt_mean, f.tt_mean);
        assert!(t.pt_mean <= f.pt_mean);
    }

    #[test]
    fn empty_question_set() {
        let (d, v) = data(2, 1);
        let r = evaluate(&ScriptedSolver, &[], &d.kb, &v, ContextMode::Full, &EvalConfig::default(), ExecMode::Parallel);
        assert!(r.empty);
        assert_eq!((r.count, r.em_mean, r.tt_mean), (0, 0.0, 0.0));
    }

    #[test]
    fn failed_rollouts_score_zero() {
        let (d, v) = data(2, 2);
        let rollouts = vec![Err("boom".to_string()), Err("again".to_string())];
        let r = score_rollouts(&rollouts, &d.questions, &v, ContextMode::Truncated);
        assert_eq!(r.count, 2);
        assert_eq!(r.f1_mean, 0.0);
        assert_eq!(r.rows[0].error.as_deref(), Some("boom"));
    }

    #[test]
    fn probability_report_invariants() {
        let (d, v) = data(3, 8);
        let trajs: Vec<Trajectory> = d
            .questions
            .iter()
            .map(|q| run_episode(&ScriptedSolver, q, &d.kb, &v, &EpisodeConfig::desk(0)).unwrap())
            .collect();
        let uniform = PolicyParams::zeros(PolicyShape::desk(v.len())).unwrap();
        let rep = analyze_probabilities(&uniform, &trajs, &d.questions, &v, 10).unwrap();
        assert!(rep.samples > 0);
        // Every answer token has probability 1/V under the uniform policy.
        assert_eq!(rep.bins[0].count, rep.samples);
        let share: f64 = rep.bins.iter().map(|b| b.share).sum();
        assert!((share - 1.0).abs() < 1e-12);
        assert!(rep.steps.windows(2).all(|w| w[1].active_share <= w[0].active_share));
        assert_eq!(rep.steps[0].active_share, 1.0);
        let p = 1.0 / v.len() as f64;
        assert!(rep.points.iter().all(|(_, x)| (x - p).abs() < 1e-12));
        let median = rep.median_step().unwrap();
        assert!((rep.mean_p_mem_at(median).unwrap() - p).abs() < 1e-12);

        let trained = PolicyParams::init(PolicyShape::desk(v.len()), 4).unwrap();
        let rep = analyze_probabilities(&trained, &trajs, &d.questions, &v, 7).unwrap();
        let share: f64 = rep.bins.iter().map(|b| b.share).sum();
        assert!((share - 1.0).abs() < 1e-12);
        assert_eq!(rep.bins.iter().map(|b| b.count).sum::<usize>(), rep.samples);
    }

    #[test]
    fn empty_probability_report() {
        let (_, v) = data(2, 1);
        let p = PolicyParams::zeros(PolicyShape::desk(v.len())).unwrap();
        let rep = analyze_probabilities(&p, &[], &[], &v, 4).unwrap();
        assert_eq!(rep.samples, 0);
        assert!(rep.steps.is_empty() && rep.median_step().is_none());
        assert!(rep.bins.iter().all(|b| b.share == 0.0));
    }
}
