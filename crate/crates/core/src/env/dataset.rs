//! Synthetic multi-objective question generation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::kb::{Fact, KnowledgeBase, RELATIONS};
use crate::error::{EnvError, VocabError};
use crate::rng::seeded;
use crate::vocab::{Token, Vocabulary, FUNCTION_WORDS};

/// Separator between objective questions inside one query.
pub const OBJECTIVE_JOINER: &str = " also , ";

/// Separator between answers, both in gold strings and in memory segments.
pub const ANSWER_JOINER: &str = " ; ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub hops: Vec<Fact>,
    pub question: String,
    pub gold: String,
}

impl Objective {
    pub fn new(hops: Vec<Fact>) -> Self {
        assert!(!hops.is_empty() && hops.len() <= 2);
        let start = &hops[0].subject;
        let question = match hops.as_slice() {
            [h] => format!("what is the {} of {start} ?", h.relation),
            [h1, h2] => format!("what is the {} of the {} of {start} ?", h2.relation, h1.relation),
            _ => unreachable!(),
        };
        let gold = hops.last().expect("nonempty").object.clone();
        Objective {
            hops,
            question,
            gold,
        }
    }

    /// Every entity on the hop chain.
    pub fn entities(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.hops[0].subject.as_str())
            .chain(self.hops.iter().map(|h| h.object.as_str()))
    }

    fn is_well_formed(&self) -> bool {
        self.gold == self.hops.last().map_or("", |h| h.object.as_str())
            && self.hops.windows(2).all(|w| w[0].object == w[1].subject)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiObjectiveQuestion {
    pub objectives: Vec<Objective>,
    pub query: String,
    pub gold_answers: Vec<String>,
}

impl MultiObjectiveQuestion {
    pub fn new(objectives: Vec<Objective>) -> Self {
        let query = objectives
            .iter()
            .map(|o| o.question.as_str())
            .collect::<Vec<_>>()
            .join(OBJECTIVE_JOINER);
        let gold_answers = objectives.iter().map(|o| o.gold.clone()).collect();
        MultiObjectiveQuestion {
            objectives,
            query,
            gold_answers,
        }
    }

    pub fn k(&self) -> usize {
        self.objectives.len()
    }

    pub fn query_tokens(&self, vocab: &Vocabulary) -> Result<Vec<Token>, VocabError> {
        vocab.tokenize(&self.query)
    }

    /// Gold answers joined the way the policy is asked to emit them.
    pub fn gold_text(&self) -> String {
        self.gold_answers.join(ANSWER_JOINER)
    }
}

/// Knobs beyond the four required generation arguments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Each entity is the subject of between 1 and this many facts.
    pub max_facts_per_entity: usize,
    /// Probability that an objective is a two-hop chain.
    pub two_hop_fraction: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            max_facts_per_entity: 2,
            two_hop_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kb: KnowledgeBase,
    pub questions: Vec<MultiObjectiveQuestion>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    facts: Vec<Fact>,
    questions: Vec<MultiObjectiveQuestion>,
}

impl Dataset {
    pub fn vocabulary(&self) -> Result<Vocabulary, EnvError> {
        self.kb.vocabulary()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&DatasetFile {
            facts: self.kb.facts().to_vec(),
            questions: self.questions.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let file: DatasetFile = serde_json::from_str(text)
            .map_err(|e| EnvError::InvalidKnowledgeBase(e.to_string()))?;
        let kb = KnowledgeBase::from_facts(file.facts)?;
        for (i, q) in file.questions.iter().enumerate() {
            if q.objectives.is_empty()
                || q.gold_answers.len() != q.objectives.len()
                || !q.objectives.iter().all(Objective::is_well_formed)
            {
                return Err(EnvError::InvalidKnowledgeBase(format!(
                    "question {i} is inconsistent"
                )));
            }
        }
        Ok(Dataset {
            kb,
            questions: file.questions,
        })
    }
}

/// Pronounceable entity names: two or three consonant-vowel syllables.
fn entity_names(count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const ONSETS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let reserved: HashSet<&str> = RELATIONS
        .iter()
        .chain(FUNCTION_WORDS.iter())
        .chain(["a", "an", "the"].iter())
        .copied()
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = if rng.gen_bool(0.5) { 2 } else { 3 };
        let mut name = String::new();
        for _ in 0..syllables {
            name.push(ONSETS[rng.gen_range(0..ONSETS.len())] as char);
            name.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if !reserved.contains(name.as_str()) && seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Builds a closed fact graph of exactly `kb_size` facts. The graph depends
/// only on `(kb_size, seed, options)`, so datasets generated with different
/// `k`/`n` but the same seed share a knowledge base and vocabulary.
pub fn generate_kb(
    kb_size: usize,
    seed: u64,
    options: &DatasetOptions,
) -> Result<KnowledgeBase, EnvError> {
    let max_facts = options.max_facts_per_entity;
    if max_facts == 0 || max_facts > RELATIONS.len() {
        return Err(EnvError::InvalidRequest(format!(
            "max_facts_per_entity must be in 1..={}",
            RELATIONS.len()
        )));
    }
    if kb_size < 2 {
        return Err(EnvError::InsufficientCapacity {
            kb_size,
            requested: 2,
            available: kb_size,
        });
    }
    let mut rng = seeded(seed, 0x6b62);
    let mut counts = Vec::new();
    let mut total = 0;
    while total < kb_size {
        let c = rng.gen_range(1..=max_facts).min(kb_size - total);
        counts.push(c);
        total += c;
    }
    if counts.len() < 2 {
        // A closed graph with one subject would need self loops.
        counts = vec![kb_size - 1, 1];
    }
    let names = entity_names(counts.len(), &mut rng);
    let mut facts = Vec::with_capacity(kb_size);
    for (i, &c) in counts.iter().enumerate() {
        let mut rels: Vec<&str> = RELATIONS.to_vec();
        rels.shuffle(&mut rng);
        let mut rels = rels[..c].to_vec();
        rels.sort_unstable();
        for r in rels {
            let mut o = rng.gen_range(0..names.len() - 1);
            if o >= i {
                o += 1;
            }
            facts.push(Fact::new(&names[i], r, &names[o]));
        }
    }
    KnowledgeBase::from_facts(facts)
}

/// Candidate objectives: every fact, plus two-hop chains without a cycle
/// back to the start.
fn candidate_objectives(kb: &KnowledgeBase) -> (Vec<Objective>, Vec<Objective>) {
    let one: Vec<Objective> = kb.facts().iter().map(|f| Objective::new(vec![f.clone()])).collect();
    let mut two = Vec::new();
    for f1 in kb.facts() {
        for f2 in kb.facts().iter().filter(|f| f.subject == f1.object) {
            if f2.object != f1.subject {
                two.push(Objective::new(vec![f1.clone(), f2.clone()]));
            }
        }
    }
    (one, two)
}

/// Every hop's `subject relation` search ranks the subject's own document
/// first. Overlap ties with documents naming the subject as an object can
/// otherwise hide the fact from the solver.
fn reachable(kb: &KnowledgeBase, objective: &Objective) -> bool {
    objective.hops.iter().all(|h| {
        let r = kb.search(&format!("{} {}", h.subject, h.relation), 1);
        r.doc_ids.first().copied() == kb.entity_id(&h.subject)
    })
}

/// Generates a knowledge base and `n` questions of `k` entity-disjoint
/// objectives each. Objectives are never reused across questions.
pub fn generate_dataset(
    k: usize,
    n: usize,
    kb_size: usize,
    seed: u64,
    options: &DatasetOptions,
) -> Result<Dataset, EnvError> {
    if k == 0 || n == 0 {
        return Err(EnvError::InvalidRequest("k and n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&options.two_hop_fraction) {
        return Err(EnvError::InvalidRequest("two_hop_fraction must be in [0, 1]".into()));
    }
    let kb = generate_kb(kb_size, seed, options)?;
    let (mut one, mut two) = candidate_objectives(&kb);
    if options.two_hop_fraction == 0.0 {
        two.clear();
    }
    if options.two_hop_fraction == 1.0 {
        one.clear();
    }
    let requested = n * k;
    let mut rng = seeded(seed, 0x7175);
    one.shuffle(&mut rng);
    two.shuffle(&mut rng);
    // Unreachable objectives count as already used.
    let mut used_one: Vec<bool> = one.iter().map(|o| !reachable(&kb, o)).collect();
    let mut used_two: Vec<bool> = two.iter().map(|o| !reachable(&kb, o)).collect();
    let available = used_one.iter().chain(&used_two).filter(|u| !**u).count();
    let capacity = |available| EnvError::InsufficientCapacity {
        kb_size,
        requested,
        available,
    };
    if available < requested {
        return Err(capacity(available));
    }

    let mut questions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut objectives: Vec<Objective> = Vec::with_capacity(k);
        let mut taken: HashSet<String> = HashSet::new();
        for _ in 0..k {
            let prefer_two = !two.is_empty() && (one.is_empty() || rng.gen_bool(options.two_hop_fraction));
            let pools: [(&Vec<Objective>, &mut Vec<bool>); 2] = if prefer_two {
                [(&two, &mut used_two), (&one, &mut used_one)]
            } else {
                [(&one, &mut used_one), (&two, &mut used_two)]
            };
            let mut picked = None;
            for (pool, used) in pools {
                if let Some(j) = (0..pool.len())
                    .find(|&j| !used[j] && pool[j].entities().all(|e| !taken.contains(e)))
                {
                    used[j] = true;
                    picked = Some(pool[j].clone());
                    break;
                }
            }
            let obj = picked.ok_or_else(|| {
                capacity(
                    used_one.iter().filter(|u| !**u).count() + used_two.iter().filter(|u| !**u).count(),
                )
            })?;
            taken.extend(obj.entities().map(str::to_string));
            objectives.push(obj);
        }
        questions.push(MultiObjectiveQuestion::new(objectives));
    }
    Ok(Dataset { kb, questions })
}
