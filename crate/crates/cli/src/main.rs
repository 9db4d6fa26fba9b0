//! `mempo`: dataset generation, behavior cloning, training, evaluation and
//! analysis for the desk-scale lab.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error,
//! 3 non-finite gradient during training.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mempo_core::config::{sha256_hex, unix_now, Preset, RunConfig, RunManifest};
use mempo_core::env::{generate_dataset, run_episode, Dataset, DatasetOptions, EpisodeConfig, ScriptedSolver};
use mempo_core::error::TrainError;
use mempo_core::inference::{analyze_probabilities, rollout_eval, score_rollouts};
use mempo_core::par::{with_workers, ExecMode};
use mempo_core::policy::PolicyParams;
use mempo_core::reward::{gold_answer_tokens, memory_rewards, trajectory_reward};
use mempo_core::trainer::{behavior_clone, train, UpdateReport};
use mempo_core::trajectory::{read_jsonl, write_jsonl, ContextMode, Trajectory};
use mempo_core::vocab::{Token, Vocabulary};

#[derive(Parser)]
#[command(name = "mempo", version, about = "Memory-aware policy optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a knowledge base and multi-objective questions.
    GenData(GenDataArgs),
    /// Behavior-clone a policy on scripted demonstrations.
    Bc(BcArgs),
    /// Reinforcement-learning updates with trajectory and memory credit.
    Train(TrainArgs),
    /// Greedy evaluation with token accounting.
    Eval(EvalArgs),
    /// Trajectory and memory rewards for saved trajectories.
    Score(ScoreArgs),
    /// Memory-probability histogram and per-step means.
    Analyze(AnalyzeArgs),
    /// Summarize a training run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunOpts {
    /// `key = value` config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl RunOpts {
    fn load(&self) -> Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, preset)?,
            None => RunConfig::preset(preset),
        };
        if let Some(s) = self.seed {
            cfg.reseed(s);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Objectives per question.
    #[arg(long)]
    k: usize,
    /// Number of questions.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    kb_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DatasetOptions::default().max_facts_per_entity)]
    max_facts_per_entity: usize,
    #[arg(long, default_value_t = DatasetOptions::default().two_hop_fraction)]
    two_hop_fraction: f64,
    /// Also write `train.json` and `test.json`, the last `holdout`
    /// questions going to the test split.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args)]
struct BcArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Demonstrations from the first questions of the dataset (0: all).
    #[arg(long, default_value_t = 0)]
    demos: usize,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Starting checkpoint; a fresh initialization when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// KL reference checkpoint; defaults to the starting policy.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// truncated, full or window:<k>
    #[arg(long, default_value = "truncated")]
    mode: ContextMode,
    #[arg(long)]
    out: PathBuf,
    /// Also write the greedy rollouts as JSONL.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectories to analyze; greedy truncated rollouts when absent.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

/// Raised for invalid argument combinations that clap cannot express.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        1
    } else if matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteGradient { .. })) {
        3
    } else {
        2
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Bc(a) => bc(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report(a),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

struct Loaded {
    data: Dataset,
    vocab: Vocabulary,
    hash: String,
}

fn load_dataset(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let data = Dataset::from_json(&text).with_context(|| format!("loading {}", path.display()))?;
    let vocab = data.vocabulary()?;
    Ok(Loaded {
        data,
        vocab,
        hash: sha256_hex(text.as_bytes()),
    })
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PolicyParams::from_checkpoint(&text, &vocab.hash()).with_context(|| format!("loading {}", path.display()))
}

fn save_checkpoint(path: &Path, params: &PolicyParams, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, params.to_checkpoint(&vocab.hash())?).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes the manifest before work starts; call [`finish`] afterwards.
fn start_manifest(dir: &Path, command: &str, cfg: &RunConfig, data: Option<&Loaded>) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, cfg, cfg.train.seed);
    if let Some(d) = data {
        m.dataset_hash = Some(d.hash.clone());
        m.vocab_hash = Some(d.vocab.hash().0);
    }
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

fn finish(dir: &Path, mut m: RunManifest) -> Result<()> {
    m.finished = Some(unix_now());
    write_json(&dir.join("manifest.json"), &m)
}

/// Matches each trajectory to its question through the tokenized query.
fn match_questions(trajs: &[Trajectory], d: &Loaded) -> Result<Vec<usize>> {
    let mut by_query: HashMap<Vec<Token>, usize> = HashMap::new();
    for (i, q) in d.data.questions.iter().enumerate() {
        by_query.entry(q.query_tokens(&d.vocab)?).or_insert(i);
    }
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            by_query
                .get(&t.query)
                .copied()
                .ok_or_else(|| anyhow!("trajectory {i}: query is not in the dataset"))
        })
        .collect()
}

fn read_trajectories(path: &Path, vocab: &Vocabulary) -> Result<Vec<Trajectory>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_jsonl(BufReader::new(f), vocab).with_context(|| format!("loading {}", path.display()))
}

// ---------------------------------------------------------------------------
// Subcommands

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.holdout > a.n {
        return Err(UsageError(format!("--holdout {} exceeds --n {}", a.holdout, a.n)).into());
    }
    let opts = DatasetOptions {
        max_facts_per_entity: a.max_facts_per_entity,
        two_hop_fraction: a.two_hop_fraction,
    };
    create_dir(&a.out)?;
    let data = generate_dataset(a.k, a.n, a.kb_size, a.seed, &opts)?;
    let text = data.to_json()?;
    fs::write(a.out.join("dataset.json"), &text)?;
    if a.holdout > 0 {
        let (tr, te) = data.questions.split_at(a.n - a.holdout);
        for (name, qs) in [("train.json", tr), ("test.json", te)] {
            let part = Dataset {
                kb: data.kb.clone(),
                questions: qs.to_vec(),
            };
            fs::write(a.out.join(name), part.to_json()?)?;
        }
    }
    let mut m = RunManifest::new("gen-data", &RunConfig::preset(Preset::Desk), a.seed);
    m.config = format!(
        "k = {}\nn = {}\nkb_size = {}\nmax_facts_per_entity = {}\ntwo_hop_fraction = {:?}\nholdout = {}\n",
        a.k, a.n, a.kb_size, a.max_facts_per_entity, a.two_hop_fraction, a.holdout
    );
    m.dataset_hash = Some(sha256_hex(text.as_bytes()));
    m.vocab_hash = Some(data.vocabulary()?.hash().0);
    finish(&a.out, m)?;
    println!("{} questions, {} facts -> {}", data.questions.len(), data.kb.facts().len(), a.out.display());
    Ok(())
}

fn bc(a: BcArgs) -> Result<()> {
    let cfg = a.run.load()?;
    let d = load_dataset(&a.dataset)?;
    create_dir(&a.out_dir)?;
    let m = start_manifest(&a.out_dir, "bc", &cfg, Some(&d))?;
    let n = if a.demos == 0 { d.data.questions.len() } else { a.demos.min(d.data.questions.len()) };
    let ep = EpisodeConfig::desk(0);
    let demos = d.data.questions[..n]
        .iter()
        .map(|q| run_episode(&ScriptedSolver, q, &d.data.kb, &d.vocab, &ep))
        .collect::<Result<Vec<_>, _>>()?;
    let init = PolicyParams::init(cfg.model.shape(d.vocab.len()), cfg.model.init_seed)?;
    let (params, rep) = with_workers(a.run.workers, || {
        behavior_clone(&init, &demos, &cfg.bc, ExecMode::default())
    })?;
    save_checkpoint(&a.out_dir.join("bc.ckpt.json"), &params, &d.vocab)?;
    let mut w = csv_writer(&a.out_dir.join("bc_nll.csv"))?;
    w.write_record(["epoch", "nll"])?;
    for (e, v) in rep.nll.iter().enumerate() {
        w.write_record([e.to_string(), format!("{v:?}")])?;
    }
    w.flush()?;
    finish(&a.out_dir, m)?;
    println!("bc on {n} demos: nll {:.4} -> {:.4}", rep.nll[0], rep.nll[rep.nll.len() - 1]);
    Ok(())
}

#[derive(Serialize)]
struct TrajAudit {
    update: usize,
    question: usize,
    traj_id: usize,
    reward_t: u8,
    format_ok: bool,
    answer_ok: bool,
    steps: usize,
    advantage_t: f64,
}

#[derive(Serialize)]
struct MemAudit {
    update: usize,
    question: usize,
    traj_id: usize,
    step: usize,
    p_mem: f64,
    epsilon: f64,
    reward_m: f64,
    advantage_m: f64,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.run.load()?;
    let d = load_dataset(&a.dataset)?;
    let ckpt_dir = a.out_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let m = start_manifest(&a.out_dir, "train", &cfg, Some(&d))?;
    let init = match &a.init {
        Some(p) => load_checkpoint(p, &d.vocab)?,
        None => PolicyParams::init(cfg.model.shape(d.vocab.len()), cfg.model.init_seed)?,
    };
    let reference = match &a.reference {
        Some(p) => load_checkpoint(p, &d.vocab)?,
        None => init.clone(),
    };
    if reference.shape() != init.shape() {
        return Err(UsageError("reference and starting checkpoints differ in shape".into()).into());
    }

    let mut updates = csv_writer(&a.out_dir.join("updates.csv"))?;
    let mut traj_audit = csv_writer(&a.out_dir.join("audit_trajectories.csv"))?;
    let mut mem_audit = csv_writer(&a.out_dir.join("audit_memory.csv"))?;
    let mut hook_err: Option<anyhow::Error> = None;
    let result = with_workers(a.run.workers, || {
        train(&init, &reference, &d.data.questions, &d.data.kb, &d.vocab, &cfg.train, ExecMode::default(), |e| {
            if hook_err.is_some() {
                return;
            }
            let r = (|| -> Result<()> {
                let u = e.report.update;
                updates.serialize(e.report)?;
                for (g, group) in e.groups.iter().enumerate() {
                    for (i, tr) in group.traj_rewards.iter().enumerate() {
                        traj_audit.serialize(TrajAudit {
                            update: u,
                            question: group.question,
                            traj_id: i,
                            reward_t: tr.value,
                            format_ok: tr.format_ok,
                            answer_ok: tr.answer_ok,
                            steps: group.trajectories[i].steps.len(),
                            advantage_t: e.traj_advantages[g][i],
                        })?;
                    }
                    for mr in &group.mem_rewards {
                        mem_audit.serialize(MemAudit {
                            update: u,
                            question: group.question,
                            traj_id: mr.trajectory,
                            step: mr.step,
                            p_mem: mr.p_mem,
                            epsilon: mr.epsilon,
                            reward_m: mr.value,
                            advantage_m: e.mem_advantages[g].get(&(mr.trajectory, mr.step)).copied().unwrap_or(0.0),
                        })?;
                    }
                }
                if cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0 {
                    save_checkpoint(&ckpt_dir.join(format!("update_{:05}.json", u + 1)), e.params, &d.vocab)?;
                }
                Ok(())
            })();
            if let Err(err) = r {
                hook_err = Some(err);
            }
        })
    });
    updates.flush()?;
    traj_audit.flush()?;
    mem_audit.flush()?;
    if let Some(err) = hook_err {
        return Err(err);
    }
    let (params, reports) = match result {
        Ok(r) => r,
        Err(TrainError::NonFiniteGradient { update, batch }) => {
            let path = a.out_dir.join("nonfinite_batch.jsonl");
            write_jsonl(BufWriter::new(fs::File::create(&path)?), &batch, &d.vocab)?;
            eprintln!("offending batch written to {}", path.display());
            return Err(TrainError::NonFiniteGradient {
                update,
                batch: Box::default(),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&a.out_dir.join("final.ckpt.json"), &params, &d.vocab)?;
    finish(&a.out_dir, m)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!(
            "{} updates: mean R^T {:.3} -> {:.3}, KL {:.4}",
            reports.len(),
            first.mean_reward_t,
            last.mean_reward_t,
            last.kl_value
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.run.load()?;
    let d = load_dataset(&a.dataset)?;
    let params = load_checkpoint(&a.checkpoint, &d.vocab)?;
    let qs = &d.data.questions;
    let rollouts = with_workers(a.run.workers, || {
        rollout_eval(&params, qs, &d.data.kb, &d.vocab, a.mode, &cfg.eval, ExecMode::default())
    });
    let report = score_rollouts(&rollouts, qs, &d.vocab, a.mode);
    if let Some(p) = &a.trajectories {
        let ok: Vec<Trajectory> = rollouts.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
        write_jsonl(BufWriter::new(fs::File::create(p)?), &ok, &d.vocab)?;
    }
    write_json(&a.out, &report)?;
    println!(
        "{} questions ({}): EM {:.3} F1 {:.3} TT {:.1} PT {:.1}",
        report.count, report.mode, report.em_mean, report.f1_mean, report.tt_mean, report.pt_mean
    );
    Ok(())
}

/// One CSV row: a trajectory reward when `step` is empty, a memory reward
/// otherwise.
#[derive(Serialize)]
struct ScoreRow {
    traj_id: usize,
    step: Option<usize>,
    p_mem: Option<f64>,
    epsilon: Option<f64>,
    reward: f64,
}

fn score(a: ScoreArgs) -> Result<()> {
    let d = load_dataset(&a.dataset)?;
    let params = load_checkpoint(&a.checkpoint, &d.vocab)?;
    let trajs = read_trajectories(&a.trajectories, &d.vocab)?;
    let qidx = match_questions(&trajs, &d)?;
    let mut w = csv_writer(&a.out)?;
    for (i, (t, &qi)) in trajs.iter().zip(&qidx).enumerate() {
        let q = &d.data.questions[qi];
        w.serialize(ScoreRow {
            traj_id: i,
            step: None,
            p_mem: None,
            epsilon: None,
            reward: f64::from(trajectory_reward(t, q, &d.vocab).value),
        })?;
        let gold = gold_answer_tokens(q, &d.vocab)?;
        for r in memory_rewards(&params, t, i, &gold, &d.vocab)? {
            w.serialize(ScoreRow {
                traj_id: i,
                step: Some(r.step),
                p_mem: Some(r.p_mem),
                epsilon: Some(r.epsilon),
                reward: r.value,
            })?;
        }
    }
    w.flush()?;
    println!("scored {} trajectories -> {}", trajs.len(), a.out.display());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = a.run.load()?;
    let d = load_dataset(&a.dataset)?;
    let params = load_checkpoint(&a.checkpoint, &d.vocab)?;
    create_dir(&a.out_dir)?;
    let (trajs, questions) = match &a.trajectories {
        Some(p) => {
            let trajs = read_trajectories(p, &d.vocab)?;
            let qs = match_questions(&trajs, &d)?.into_iter().map(|i| d.data.questions[i].clone()).collect();
            (trajs, qs)
        }
        None => {
            let rollouts = with_workers(a.run.workers, || {
                rollout_eval(&params, &d.data.questions, &d.data.kb, &d.vocab, ContextMode::Truncated, &cfg.eval, ExecMode::default())
            });
            let mut trajs = Vec::new();
            let mut qs = Vec::new();
            for (r, q) in rollouts.into_iter().zip(&d.data.questions) {
                if let Ok(t) = r {
                    trajs.push(t);
                    qs.push(q.clone());
                }
            }
            (trajs, qs)
        }
    };
    let rep = analyze_probabilities(&params, &trajs, &questions, &d.vocab, a.bins)?;
    let mut w = csv_writer(&a.out_dir.join("bins.csv"))?;
    for b in &rep.bins {
        w.serialize(b)?;
    }
    w.flush()?;
    let mut w = csv_writer(&a.out_dir.join("steps.csv"))?;
    for s in &rep.steps {
        w.serialize(s)?;
    }
    w.flush()?;
    println!(
        "{} memory samples over {} trajectories, median step {:?}",
        rep.samples,
        trajs.len(),
        rep.median_step()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    updates: usize,
    first_quartile_reward_t: f64,
    last_quartile_reward_t: f64,
    first_quartile_reward_m: f64,
    last_quartile_reward_m: f64,
    last_quartile_p_mem: f64,
    last_quartile_format_rate: f64,
    final_kl: f64,
    max_grad_norm: f64,
    mean_step_scale: f64,
    checkpoints: Vec<String>,
}

fn report(a: ReportArgs) -> Result<()> {
    let path = a.run_dir.join("updates.csv");
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<UpdateReport> = r.deserialize().collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(anyhow!("{} has no updates", path.display()));
    }
    let q = rows.len().div_ceil(4);
    let mean = |rs: &[UpdateReport], f: fn(&UpdateReport) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
    let (head, tail) = (&rows[..q], &rows[rows.len() - q..]);
    let mut checkpoints: Vec<String> = fs::read_dir(a.run_dir.join("checkpoints"))
        .map(|it| it.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    checkpoints.sort();
    let s = RunSummary {
        updates: rows.len(),
        first_quartile_reward_t: mean(head, |r| r.mean_reward_t),
        last_quartile_reward_t: mean(tail, |r| r.mean_reward_t),
        first_quartile_reward_m: mean(head, |r| r.mean_reward_m),
        last_quartile_reward_m: mean(tail, |r| r.mean_reward_m),
        last_quartile_p_mem: mean(tail, |r| r.mean_p_mem),
        last_quartile_format_rate: mean(tail, |r| r.format_rate),
        final_kl: rows[rows.len() - 1].kl_value,
        max_grad_norm: rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
        mean_step_scale: mean(&rows, |r| r.step_scale),
        checkpoints,
    };
    write_json(&a.run_dir.join("summary.json"), &s)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&s)?)?;
    Ok(())
}
