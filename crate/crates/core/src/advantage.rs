//! Group-relative advantages and their token-level combination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::AdvantageError;
use crate::reward::{MemoryReward, TrajectoryReward};
use crate::trajectory::{SegmentKind, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StdMode {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ZeroStdPolicy {
    /// A group without spread yields all-zero advantages.
    #[default]
    AllZero,
}

/// How memory rewards are grouped before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Every memory segment of every trajectory in the group.
    #[default]
    Pooled,
    /// Memory segments at the same step index only.
    PerStep,
}

impl std::str::FromStr for GroupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(GroupMode::Pooled),
            "per_step" => Ok(GroupMode::PerStep),
            _ => Err(format!("unknown group mode `{s}`")),
        }
    }
}

impl std::fmt::Display for GroupMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupMode::Pooled => "pooled",
            GroupMode::PerStep => "per_step",
        })
    }
}

/// `(r - mean) / std` over the group.
pub fn group_normalize(rewards: &[f64], std_mode: StdMode, zero: ZeroStdPolicy) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return match zero {
            ZeroStdPolicy::AllZero => vec![0.0; n],
        };
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match std_mode {
        StdMode::Population => n as f64,
        StdMode::Sample => (n as f64 - 1.0).max(1.0),
    };
    let std = (ss / denom).sqrt();
    // Spread below rounding noise of the mean counts as none.
    if std == 0.0 || std <= f64::EPSILON * mean.abs() {
        return match zero {
            ZeroStdPolicy::AllZero => vec![0.0; n],
        };
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// The N rollouts for one question with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub question: usize,
    pub trajectories: Vec<Trajectory>,
    pub traj_rewards: Vec<TrajectoryReward>,
    /// One entry per memory segment, `(trajectory, step)` indexed.
    pub mem_rewards: Vec<MemoryReward>,
    /// Per trajectory, the sampling policy's log-probability of every
    /// policy token, aligned with [`policy_token_kinds`].
    pub old_log_probs: Vec<Vec<f64>>,
}

/// Segment kind of every policy-generated token of `traj`, in order,
/// including a malformed tail (reported as `None`).
pub fn policy_token_kinds(traj: &Trajectory) -> Vec<(usize, Option<SegmentKind>)> {
    let mut out = Vec::with_capacity(traj.generated_len());
    for step in &traj.steps {
        out.extend(step.generated_kinds().into_iter().map(|k| (step.index, Some(k))));
    }
    if let Some(tail) = &traj.malformed_tail {
        out.extend(std::iter::repeat((traj.steps.len() + 1, None)).take(tail.len()));
    }
    out
}

pub fn trajectory_advantages(group: &RolloutGroup) -> Vec<f64> {
    let r: Vec<f64> = group.traj_rewards.iter().map(|r| f64::from(r.value)).collect();
    group_normalize(&r, StdMode::Population, ZeroStdPolicy::AllZero)
}

/// `(trajectory, step) -> A^M`.
pub fn memory_advantages(group: &RolloutGroup, mode: GroupMode) -> BTreeMap<(usize, usize), f64> {
    let mut out = BTreeMap::new();
    let mut buckets: BTreeMap<usize, Vec<&MemoryReward>> = BTreeMap::new();
    for r in &group.mem_rewards {
        let key = match mode {
            GroupMode::Pooled => 0,
            GroupMode::PerStep => r.step,
        };
        buckets.entry(key).or_default().push(r);
    }
    for members in buckets.values() {
        let values: Vec<f64> = members.iter().map(|r| r.value).collect();
        let adv = group_normalize(&values, StdMode::Population, ZeroStdPolicy::AllZero);
        for (r, a) in members.iter().zip(adv) {
            out.insert((r.trajectory, r.step), a);
        }
    }
    out
}

/// Token-aligned advantages of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageMap {
    pub trajectory: f64,
    /// Step index -> A^M for steps with a memory segment.
    pub memory: BTreeMap<usize, f64>,
    /// One entry per policy-generated token.
    pub tokens: Vec<f64>,
}

/// Memory tokens get `A^T + A^M`, other policy tokens `A^T`. Environment
/// tokens get no entry at all.
pub fn combine(
    group: &RolloutGroup,
    traj_adv: &[f64],
    mem_adv: &BTreeMap<(usize, usize), f64>,
) -> Result<Vec<AdvantageMap>, AdvantageError> {
    for &(traj, step) in mem_adv.keys() {
        let has_mem = group
            .trajectories
            .get(traj)
            .and_then(|t| t.steps.get(step.wrapping_sub(1)))
            .is_some_and(|s| s.memory().is_some());
        if !has_mem {
            return Err(AdvantageError::IndexMismatch { traj, step });
        }
    }
    Ok(group
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            let a_t = traj_adv[i];
            let memory: BTreeMap<usize, f64> = mem_adv
                .range((i, 0)..(i + 1, 0))
                .map(|(&(_, step), &a)| (step, a))
                .collect();
            let tokens = policy_token_kinds(traj)
                .into_iter()
                .map(|(step, kind)| match (kind, memory.get(&step)) {
                    (Some(SegmentKind::Mem), Some(a_m)) => a_t + a_m,
                    _ => a_t,
                })
                .collect();
            AdvantageMap {
                trajectory: a_t,
                memory,
                tokens,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAuditRow {
    pub group: usize,
    pub traj_id: usize,
    pub reward_t: u8,
    pub adv_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAuditRow {
    pub group: usize,
    pub traj_id: usize,
    pub step: usize,
    pub reward_m: f64,
    pub adv_m: f64,
}

pub fn audit_rows(
    group: &RolloutGroup,
    traj_adv: &[f64],
    mem_adv: &BTreeMap<(usize, usize), f64>,
) -> (Vec<TrajectoryAuditRow>, Vec<MemoryAuditRow>) {
    let t = group
        .traj_rewards
        .iter()
        .zip(traj_adv)
        .enumerate()
        .map(|(i, (r, a))| TrajectoryAuditRow {
            group: group.question,
            traj_id: i,
            reward_t: r.value,
            adv_t: *a,
        })
        .collect();
    let m = group
        .mem_rewards
        .iter()
        .map(|r| MemoryAuditRow {
            group: group.question,
            traj_id: r.trajectory,
            step: r.step,
            reward_m: r.value,
            adv_m: mem_adv.get(&(r.trajectory, r.step)).copied().unwrap_or(0.0),
        })
        .collect();
    (t, m)
}
