//! The interaction loop and a few scripted policies.

use crate::env::dataset::MultiObjectiveQuestion;
use crate::env::kb::KnowledgeBase;
use crate::error::{EnvError, PolicyError};
use crate::policy::{PolicyParams, SampleConfig};
use crate::rng::derive;
use crate::trajectory::{
    build_context, parse_step, Context, ContextMode, Segment, SegmentKind, Step, TagTokens,
    Termination, Trajectory,
};
use crate::vocab::{Token, Vocabulary};

/// What a policy sees when asked for one step.
pub struct StepView<'a> {
    pub context: &'a Context,
    pub question: &'a MultiObjectiveQuestion,
    /// 1-based index of the step being generated.
    pub step: usize,
    pub vocab: &'a Vocabulary,
}

/// Anything that can produce the raw tokens of one step.
pub trait StepPolicy: Sync {
    fn generate(&self, view: &StepView<'_>, sample: &SampleConfig) -> Result<Vec<Token>, PolicyError>;
}

impl StepPolicy for PolicyParams {
    fn generate(&self, view: &StepView<'_>, sample: &SampleConfig) -> Result<Vec<Token>, PolicyError> {
        self.sample(view.context, sample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub context_mode: ContextMode,
    pub top_k: usize,
    /// `sample.seed` is the episode seed; each step derives its own.
    pub sample: SampleConfig,
}

impl EpisodeConfig {
    pub fn desk(seed: u64) -> Self {
        EpisodeConfig {
            max_turns: 8,
            context_mode: ContextMode::Truncated,
            top_k: 3,
            sample: SampleConfig::step_defaults(seed),
        }
    }
}

/// Runs one question to completion.
///
/// Output that does not parse as a step, or that writes its own
/// `<information>` segment, ends the episode with `FormatFailure`; the raw
/// tokens are kept in `malformed_tail`.
pub fn run_episode<P: StepPolicy + ?Sized>(
    policy: &P,
    question: &MultiObjectiveQuestion,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    cfg: &EpisodeConfig,
) -> Result<Trajectory, EnvError> {
    if cfg.max_turns == 0 || cfg.top_k == 0 {
        return Err(EnvError::InvalidRequest("max_turns and top_k must be >= 1".into()));
    }
    let query = question.query_tokens(vocab)?;
    let mut traj = Trajectory {
        query,
        steps: Vec::new(),
        predicted_answer: None,
        terminated: Termination::TurnLimit,
        malformed_tail: None,
    };
    for t in 1..=cfg.max_turns {
        let context = build_context(&traj.query, &traj.steps, cfg.context_mode);
        let mut sample = cfg.sample.clone();
        sample.seed = derive(cfg.sample.seed, &[t as u64]);
        let view = StepView {
            context: &context,
            question,
            step: t,
            vocab,
        };
        let raw = policy
            .generate(&view, &sample)
            .map_err(|e| EnvError::InvalidRequest(e.to_string()))?;
        let mut step = match parse_generated(&raw, t, vocab) {
            Some(step) => step,
            None => {
                traj.terminated = Termination::FormatFailure;
                traj.malformed_tail = Some(raw);
                return Ok(traj);
            }
        };
        if let Some(answer) = step.segment(SegmentKind::Answer) {
            traj.predicted_answer = Some(answer.tokens.clone());
            traj.terminated = Termination::Answered;
            traj.steps.push(step);
            return Ok(traj);
        }
        let call = step
            .segment(SegmentKind::ToolCall)
            .expect("a parsed step has a tool call or an answer");
        let result = kb.search(&vocab.detokenize(&call.tokens), cfg.top_k);
        let info = vocab.tokenize(&result.documents.join(" "))?;
        step.segments.push(Segment::new(SegmentKind::Information, info));
        traj.steps.push(step);
    }
    Ok(traj)
}

fn parse_generated(raw: &[Token], index: usize, vocab: &Vocabulary) -> Option<Step> {
    if raw.iter().any(|t| !vocab.contains(*t)) {
        return None;
    }
    let step = parse_step(&vocab.detokenize(raw), index, vocab).ok()?;
    // The environment owns <information>, and the parsed step must account
    // for every generated token so log-probabilities stay aligned.
    if step.segment(SegmentKind::Information).is_some() || step.generated_tokens() != raw {
        return None;
    }
    Some(step)
}

// ---------------------------------------------------------------------------
// Scripted policies

fn words(vocab: &Vocabulary, text: &str) -> Vec<Token> {
    vocab.tokenize(text).expect("scripted text is in vocabulary")
}

fn wrap(kind: SegmentKind, content: &[Token], out: &mut Vec<Token>) {
    out.push(TagTokens.open(kind));
    out.extend_from_slice(content);
    out.push(TagTokens.close(kind));
}

/// Answers at step 1 with the gold answers.
pub struct ImmediateAnswer;

impl StepPolicy for ImmediateAnswer {
    fn generate(&self, view: &StepView<'_>, _: &SampleConfig) -> Result<Vec<Token>, PolicyError> {
        let mut out = Vec::new();
        wrap(SegmentKind::Think, &words(view.vocab, "answer"), &mut out);
        wrap(SegmentKind::Answer, &words(view.vocab, &view.question.gold_text()), &mut out);
        Ok(out)
    }
}

/// Searches for the first subject forever.
pub struct EndlessSearch;

impl StepPolicy for EndlessSearch {
    fn generate(&self, view: &StepView<'_>, _: &SampleConfig) -> Result<Vec<Token>, PolicyError> {
        let subject = &view.question.objectives[0].hops[0].subject;
        let mut out = Vec::new();
        if view.step > 1 {
            wrap(SegmentKind::Mem, &words(view.vocab, subject), &mut out);
        }
        wrap(SegmentKind::Think, &words(view.vocab, "search"), &mut out);
        wrap(SegmentKind::ToolCall, &words(view.vocab, subject), &mut out);
        Ok(out)
    }
}

/// Solves objectives in order, one search per hop, and keeps resolved
/// answers (plus a pending bridge entity) in memory.
///
/// Its state is read back from the context alone: the latest memory, the
/// latest tool call and the tool response that followed it. It therefore
/// works under every context mode that keeps at least the previous step.
///
/// Step format, after the first step:
/// `<mem> a1 ; a2 </mem> <think> search </think> <tool_call> s r </tool_call>`.
pub struct ScriptedSolver;

#[derive(Debug, Default, Clone, PartialEq)]
struct SolverState {
    resolved: Vec<Token>,
    bridge: Option<Token>,
}

impl ScriptedSolver {
    fn state(view: &StepView<'_>) -> SolverState {
        let body = &view.context.body;
        let memory = last_segment(body, SegmentKind::Mem).unwrap_or_default();
        let entries: Vec<Token> = memory
            .split(|t| view.vocab.surface(*t) == ";")
            .filter_map(|e| e.first().copied())
            .collect();
        let (Some(call), Some(info)) = (
            last_segment(body, SegmentKind::ToolCall),
            last_segment(body, SegmentKind::Information),
        ) else {
            return SolverState::default();
        };
        let [subject, relation] = call[..] else {
            return SolverState::default();
        };
        let surface = |t: Token| view.vocab.surface(t);
        let located = view.question.objectives.iter().enumerate().find_map(|(j, o)| {
            o.hops
                .iter()
                .position(|h| h.subject == surface(subject) && h.relation == surface(relation))
                .map(|h| (j, h, o.hops.len()))
        });
        let Some((j, hop, hops)) = located else {
            return SolverState::default();
        };
        let mut state = SolverState {
            resolved: entries.iter().take(j).copied().collect(),
            bridge: entries.get(j).copied().filter(|_| hop > 0),
        };
        let object = info
            .windows(3)
            .find(|w| w[0] == subject && w[1] == relation)
            .map(|w| w[2]);
        if let Some(o) = object {
            if hop + 1 == hops {
                state.resolved.push(o);
                state.bridge = None;
            } else {
                state.bridge = Some(o);
            }
        }
        state
    }
}

/// Content of the last closed segment of `kind` in `body`.
fn last_segment(body: &[Token], kind: SegmentKind) -> Option<Vec<Token>> {
    let close = TagTokens.close(kind);
    let open = TagTokens.open(kind);
    let end = body.iter().rposition(|t| *t == close)?;
    let start = body[..end].iter().rposition(|t| *t == open)?;
    Some(body[start + 1..end].to_vec())
}

impl StepPolicy for ScriptedSolver {
    fn generate(&self, view: &StepView<'_>, _: &SampleConfig) -> Result<Vec<Token>, PolicyError> {
        let vocab = view.vocab;
        let state = ScriptedSolver::state(view);
        let semicolon = words(vocab, ";");
        let mut memory = Vec::new();
        for (i, t) in state.resolved.iter().chain(&state.bridge).enumerate() {
            if i > 0 {
                memory.extend_from_slice(&semicolon);
            }
            memory.push(*t);
        }
        let mut out = Vec::new();
        if view.step > 1 {
            wrap(SegmentKind::Mem, &memory, &mut out);
        }
        let objectives = &view.question.objectives;
        if state.resolved.len() >= objectives.len() {
            wrap(SegmentKind::Think, &words(vocab, "answer"), &mut out);
            wrap(SegmentKind::Answer, &memory, &mut out);
            return Ok(out);
        }
        let objective = &objectives[state.resolved.len()];
        let (subject, relation) = match state.bridge {
            Some(b) => (b, words(vocab, &objective.hops[1].relation)[0]),
            None => {
                let h = &objective.hops[0];
                (words(vocab, &h.subject)[0], words(vocab, &h.relation)[0])
            }
        };
        wrap(SegmentKind::Think, &words(vocab, "search"), &mut out);
        wrap(SegmentKind::ToolCall, &[subject, relation], &mut out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::dataset::{generate_dataset, DatasetOptions, Objective};
    use crate::env::kb::Fact;
    use crate::env::judge::judge_answer;
    use crate::trajectory::check_format;

    fn tiny() -> (KnowledgeBase, Vocabulary) {
        let kb = KnowledgeBase::from_facts(vec![
            Fact::new("bako", "capital", "rimu"),
            Fact::new("rimu", "river", "tosa"),
            Fact::new("tosa", "capital", "bako"),
            Fact::new("lemi", "river", "bako"),
        ])
        .unwrap();
        let vocab = kb.vocabulary().unwrap();
        (kb, vocab)
    }

    fn question(kb: &KnowledgeBase, chains: &[&[(&str, &str)]]) -> MultiObjectiveQuestion {
        MultiObjectiveQuestion::new(
            chains
                .iter()
                .map(|c| {
                    Objective::new(c.iter().map(|(s, r)| kb.lookup(s, r).unwrap().clone()).collect())
                })
                .collect(),
        )
    }

    #[test]
    fn immediate_answer_is_one_step() {
        let (kb, vocab) = tiny();
        let q = question(&kb, &[&[("bako", "capital")]]);
        let traj = run_episode(&ImmediateAnswer, &q, &kb, &vocab, &EpisodeConfig::desk(0)).unwrap();
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.terminated, Termination::Answered);
    }

    #[test]
    fn endless_search_hits_turn_limit() {
        let (kb, vocab) = tiny();
        let q = question(&kb, &[&[("bako", "capital")]]);
        let mut cfg = EpisodeConfig::desk(0);
        cfg.max_turns = 5;
        let traj = run_episode(&EndlessSearch, &q, &kb, &vocab, &cfg).unwrap();
        assert_eq!(traj.steps.len(), 5);
        assert_eq!(traj.terminated, Termination::TurnLimit);
        assert!(traj.predicted_answer.is_none());
    }

    #[test]
    fn scripted_solver_two_objectives() {
        let (kb, vocab) = tiny();
        let q = question(&kb, &[&[("bako", "capital")], &[("lemi", "river")]]);
        let traj = run_episode(&ScriptedSolver, &q, &kb, &vocab, &EpisodeConfig::desk(0)).unwrap();
        assert_eq!(traj.steps.len(), 3);
        for s in &traj.steps[..2] {
            assert!(s.segment(SegmentKind::Information).is_some());
        }
        let rendered: Vec<String> = traj
            .steps
            .iter()
            .map(|s| crate::trajectory::render_step(s, &vocab))
            .collect();
        assert_eq!(
            rendered[0],
            "<think>search</think>\n<tool_call>bako capital</tool_call>\n\
             <information>bako capital rimu . tosa capital bako . lemi river bako .</information>"
        );
        assert_eq!(
            rendered[2],
            "<mem>rimu ; bako</mem>\n<think>answer</think>\n<answer>rimu ; bako</answer>"
        );
        assert!(check_format(&traj).valid);
        let pred = vocab.detokenize(traj.predicted_answer.as_ref().unwrap());
        assert_eq!(judge_answer(&pred, &q.gold_answers).em, 1);
    }

    #[test]
    fn scripted_solver_two_hop_in_every_mode() {
        let (kb, vocab) = tiny();
        let q = question(&kb, &[&[("bako", "capital"), ("rimu", "river")]]);
        for mode in [ContextMode::Truncated, ContextMode::Full, ContextMode::Window(2)] {
            let mut cfg = EpisodeConfig::desk(0);
            cfg.context_mode = mode;
            let traj = run_episode(&ScriptedSolver, &q, &kb, &vocab, &cfg).unwrap();
            assert_eq!(traj.steps.len(), 3, "{mode}");
            assert_eq!(vocab.detokenize(traj.predicted_answer.as_ref().unwrap()), "tosa");
        }
    }

    #[test]
    fn solver_recovers_generated_datasets() {
        for (k, seed) in [(1, 1), (2, 2), (3, 3)] {
            let data = generate_dataset(k, 20, 300, seed, &DatasetOptions::default()).unwrap();
            let vocab = data.vocabulary().unwrap();
            let mut cfg = EpisodeConfig::desk(0);
            cfg.max_turns = 2 * k + 1;
            for q in &data.questions {
                let traj = run_episode(&ScriptedSolver, q, &data.kb, &vocab, &cfg).unwrap();
                let pred = vocab.detokenize(traj.predicted_answer.as_ref().expect("answered"));
                assert_eq!(judge_answer(&pred, &q.gold_answers).em, 1, "{}", q.query);
                assert!(check_format(&traj).valid);
            }
        }
    }

    struct Emit(String);

    impl StepPolicy for Emit {
        fn generate(&self, view: &StepView<'_>, _: &SampleConfig) -> Result<Vec<Token>, PolicyError> {
            Ok(view.vocab.tokenize(&self.0).unwrap())
        }
    }

    #[test]
    fn malformed_output_ends_the_episode() {
        let (kb, vocab) = tiny();
        let q = question(&kb, &[&[("bako", "capital")]]);
        for text in [
            "<think> search </think>",
            "<think> search </think> <tool_call> bako",
            "<think> search </think> <tool_call> bako </tool_call> <information> rimu </information>",
            "bako <think> search </think> <answer> rimu </answer>",
        ] {
            let p = Emit(text.to_string());
            let traj = run_episode(&p, &q, &kb, &vocab, &EpisodeConfig::desk(0)).unwrap();
            assert_eq!(traj.terminated, Termination::FormatFailure);
            assert!(traj.steps.is_empty());
            assert!(traj.malformed_tail.is_some());
        }
    }
}
