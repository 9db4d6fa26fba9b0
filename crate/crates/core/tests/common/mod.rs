//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use mempo_core::advantage::{AdvantageMap, RolloutGroup};
use mempo_core::policy::{PolicyParams, PolicyShape};
use mempo_core::reward::TrajectoryReward;
use mempo_core::trainer::trajectory_log_probs;
use mempo_core::trajectory::{ContextMode, Segment, SegmentKind, Step, Termination, Trajectory};
use mempo_core::vocab::{Token, Vocabulary, TAGS};

pub fn word_vocab() -> Vocabulary {
    Vocabulary::new(["bako", "rimu", "tosa", "lemi", "capital", "river", "owner"]).unwrap()
}

/// Random content token: any non-tag token of `vocab`.
pub fn content_token(rng: &mut impl Rng, vocab: &Vocabulary) -> Token {
    Token(rng.gen_range(TAGS.len() as u32..vocab.len() as u32))
}

pub fn content(rng: &mut impl Rng, vocab: &Vocabulary, lo: usize, hi: usize) -> Vec<Token> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| content_token(rng, vocab)).collect()
}

/// A random step that follows `Mem? Think (ToolCall Information? | Answer)`,
/// with a memory segment required from step 2 on.
pub fn random_step(rng: &mut impl Rng, vocab: &Vocabulary, index: usize) -> Step {
    let mut segments = Vec::new();
    if index > 1 || rng.gen_bool(0.3) {
        segments.push(Segment::new(SegmentKind::Mem, content(rng, vocab, 1, 4)));
    }
    segments.push(Segment::new(SegmentKind::Think, content(rng, vocab, 0, 3)));
    if rng.gen_bool(0.5) {
        segments.push(Segment::new(SegmentKind::ToolCall, content(rng, vocab, 1, 3)));
        if rng.gen_bool(0.7) {
            segments.push(Segment::new(SegmentKind::Information, content(rng, vocab, 0, 6)));
        }
    } else {
        segments.push(Segment::new(SegmentKind::Answer, content(rng, vocab, 1, 3)));
    }
    Step { index, segments }
}

/// A policy of at most 100 parameters over a 12-token vocabulary.
pub fn tiny_shape() -> PolicyShape {
    PolicyShape {
        vocab: 12,
        dim: 1,
        hidden: 2,
        window: 2,
        recent: 1,
        query_slots: 0,
        memory_slots: 1,
        info_slots: 0,
        open_class_from: Some(10),
    }
}

pub fn random_params(rng: &mut impl Rng, shape: PolicyShape, scale: f64) -> PolicyParams {
    let data = (0..shape.param_count())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    PolicyParams::from_vec(shape, data).unwrap()
}

pub fn perturbed(rng: &mut impl Rng, p: &PolicyParams, scale: f64) -> PolicyParams {
    let mut q = p.clone();
    for x in q.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *x += scale * z;
    }
    q
}

fn tiny_content(rng: &mut impl Rng, n: usize) -> Vec<Token> {
    (0..n).map(|_| Token(rng.gen_range(10..12))).collect()
}

/// A well-formed answered trajectory over the tiny vocabulary.
pub fn tiny_trajectory(rng: &mut impl Rng) -> Trajectory {
    let turns = rng.gen_range(1..=3);
    let mut steps = Vec::new();
    for t in 1..=turns {
        let mut segments = Vec::new();
        if t > 1 {
            segments.push(Segment::new(SegmentKind::Mem, tiny_content(rng, 2)));
        }
        segments.push(Segment::new(SegmentKind::Think, tiny_content(rng, 1)));
        if t == turns {
            segments.push(Segment::new(SegmentKind::Answer, tiny_content(rng, 1)));
        } else {
            segments.push(Segment::new(SegmentKind::ToolCall, tiny_content(rng, 2)));
            segments.push(Segment::new(SegmentKind::Information, tiny_content(rng, 3)));
        }
        steps.push(Step { index: t, segments });
    }
    let answer = steps[turns - 1].segment(SegmentKind::Answer).unwrap().tokens.clone();
    Trajectory {
        query: tiny_content(rng, 2),
        predicted_answer: Some(answer),
        steps,
        terminated: Termination::Answered,
        malformed_tail: None,
    }
}

/// Groups of tiny trajectories sampled under `old`, with random per-token
/// advantages.
pub fn tiny_batch(
    rng: &mut impl Rng,
    old: &PolicyParams,
    groups: usize,
) -> (Vec<RolloutGroup>, Vec<Vec<AdvantageMap>>) {
    let mut gs = Vec::new();
    let mut maps = Vec::new();
    for q in 0..groups {
        let trajectories: Vec<Trajectory> = (0..3).map(|_| tiny_trajectory(rng)).collect();
        let old_log_probs = trajectories
            .iter()
            .map(|t| trajectory_log_probs(old, t, ContextMode::Truncated).unwrap())
            .collect();
        maps.push(
            trajectories
                .iter()
                .map(|t| AdvantageMap {
                    trajectory: 0.0,
                    memory: BTreeMap::new(),
                    tokens: (0..t.generated_len()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                })
                .collect(),
        );
        let reward = TrajectoryReward {
            value: 0,
            format_ok: true,
            answer_ok: false,
        };
        gs.push(RolloutGroup {
            question: q,
            traj_rewards: vec![reward; trajectories.len()],
            trajectories,
            mem_rewards: Vec::new(),
            old_log_probs,
        });
    }
    (gs, maps)
}
