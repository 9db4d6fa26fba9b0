//! Parallel against sequential execution for the three hot paths: rollout
//! collection, the surrogate gradient and greedy evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mempo_core::advantage::RolloutGroup;
use mempo_core::env::{generate_dataset, Dataset, DatasetOptions};
use mempo_core::inference::{evaluate, EvalConfig};
use mempo_core::par::ExecMode;
use mempo_core::policy::{PolicyParams, PolicyShape};
use mempo_core::trainer::{collect_group, group_advantages, surrogate_objective, SurrogateConfig, TrainConfig};
use mempo_core::trajectory::ContextMode;
use mempo_core::vocab::Vocabulary;

const MODES: [(&str, ExecMode); 2] = [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)];

fn fixture() -> (Dataset, Vocabulary, PolicyParams, TrainConfig) {
    let opts = DatasetOptions {
        max_facts_per_entity: 1,
        two_hop_fraction: 0.0,
    };
    let data = generate_dataset(2, 16, 200, 7, &opts).unwrap();
    let vocab = data.vocabulary().unwrap();
    let params = PolicyParams::init(PolicyShape::desk(vocab.len()), 1).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.max_turns = 4;
    cfg.max_new_tokens = 24;
    (data, vocab, params, cfg)
}

fn groups(d: &Dataset, v: &Vocabulary, p: &PolicyParams, cfg: &TrainConfig, n: usize) -> Vec<RolloutGroup> {
    (0..n)
        .map(|q| collect_group(p, q, &d.questions[q], &d.kb, v, cfg, q as u64, ExecMode::Sequential).unwrap())
        .collect()
}

fn bench_rollouts(c: &mut Criterion) {
    let (d, v, p, cfg) = fixture();
    let mut g = c.benchmark_group("rollout_group");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| collect_group(&p, 0, &d.questions[0], &d.kb, &v, &cfg, 3, mode).unwrap())
        });
    }
    g.finish();
}

fn bench_surrogate(c: &mut Criterion) {
    let (d, v, p, cfg) = fixture();
    let batch = groups(&d, &v, &p, &cfg, 4);
    let maps: Vec<_> = batch
        .iter()
        .map(|g| group_advantages(g, cfg.group_mode, true).unwrap().2)
        .collect();
    let scfg = SurrogateConfig::from(&cfg);
    let mut g = c.benchmark_group("surrogate_gradient");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| surrogate_objective(&p, &p, &batch, &maps, &scfg, mode).unwrap())
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let (d, v, p, _) = fixture();
    let ecfg = EvalConfig {
        max_turns: 4,
        top_k: 3,
        max_new_tokens: 24,
    };
    let mut g = c.benchmark_group("greedy_eval");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate(&p, &d.questions, &d.kb, &v, ContextMode::Truncated, &ecfg, mode))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_rollouts, bench_surrogate, bench_eval);
criterion_main!(benches);
