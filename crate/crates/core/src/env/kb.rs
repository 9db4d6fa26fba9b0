//! Fact store, entity documents and lexical search.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::env::normalize::normalize_words;
use crate::error::EnvError;
use crate::vocab::Vocabulary;

/// Relation words used by the generator.
pub const RELATIONS: [&str; 16] = [
    "capital", "founder", "river", "mayor", "author", "composer", "director", "spouse", "mentor",
    "rival", "neighbor", "creator", "owner", "leader", "partner", "successor",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    #[serde(rename = "s")]
    pub subject: String,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(rename = "o")]
    pub object: String,
}

impl Fact {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Fact {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
struct Document {
    text: String,
    words: HashSet<String>,
}

/// Immutable fact set with one document per subject entity.
///
/// Entities are numbered by first appearance as a subject; that number is
/// the document id used for tie-breaking in [`KnowledgeBase::search`].
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    facts: Vec<Fact>,
    entities: Vec<String>,
    entity_ids: HashMap<String, usize>,
    documents: Vec<Document>,
    by_key: HashMap<(String, String), usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub query: String,
    pub doc_ids: Vec<usize>,
    pub documents: Vec<String>,
}

impl KnowledgeBase {
    /// Validates the fact set: nonempty fields, unique (subject, relation)
    /// pairs, and every object is itself a subject.
    pub fn from_facts(facts: Vec<Fact>) -> Result<Self, EnvError> {
        let bad = |m: String| EnvError::InvalidKnowledgeBase(m);
        let mut entities = Vec::new();
        let mut entity_ids = HashMap::new();
        let mut by_key = HashMap::new();
        for (i, f) in facts.iter().enumerate() {
            if f.subject.is_empty() || f.relation.is_empty() || f.object.is_empty() {
                return Err(bad(format!("fact {i} has an empty field")));
            }
            if by_key
                .insert((f.subject.clone(), f.relation.clone()), i)
                .is_some()
            {
                return Err(bad(format!(
                    "duplicate (subject, relation) = ({}, {})",
                    f.subject, f.relation
                )));
            }
            if !entity_ids.contains_key(&f.subject) {
                entity_ids.insert(f.subject.clone(), entities.len());
                entities.push(f.subject.clone());
            }
        }
        for f in &facts {
            if !entity_ids.contains_key(&f.object) {
                return Err(bad(format!("object `{}` has no document", f.object)));
            }
        }
        let mut per_entity: Vec<Vec<&Fact>> = vec![Vec::new(); entities.len()];
        for f in &facts {
            per_entity[entity_ids[&f.subject]].push(f);
        }
        let documents = per_entity
            .into_iter()
            .map(|mut fs| {
                fs.sort_by(|a, b| a.relation.cmp(&b.relation));
                let text = fs
                    .iter()
                    .map(|f| format!("{} {} {} .", f.subject, f.relation, f.object))
                    .collect::<Vec<_>>()
                    .join(" ");
                let words = normalize_words(&text).into_iter().collect();
                Document { text, words }
            })
            .collect();
        Ok(KnowledgeBase {
            facts,
            entities,
            entity_ids,
            documents,
            by_key,
        })
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn document(&self, id: usize) -> &str {
        &self.documents[id].text
    }

    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn lookup(&self, subject: &str, relation: &str) -> Option<&Fact> {
        self.by_key
            .get(&(subject.to_string(), relation.to_string()))
            .map(|&i| &self.facts[i])
    }

    pub fn relations(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.facts.iter().map(|f| f.relation.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Relations (sorted) then entities (by document id).
    pub fn vocabulary(&self) -> Result<Vocabulary, EnvError> {
        Ok(Vocabulary::new(
            self.relations().iter().chain(self.entities.iter()),
        )?)
    }

    /// Number of distinct normalized words `query` shares with document `id`.
    pub fn overlap(&self, query_words: &HashSet<String>, id: usize) -> usize {
        self.documents[id].words.intersection(query_words).count()
    }

    /// Ranks documents by lexical overlap with `query`, highest first, ties
    /// broken by ascending document id. Documents with no overlap are never
    /// returned.
    pub fn search(&self, query: &str, top_k: usize) -> ToolResult {
        let words: HashSet<String> = normalize_words(query).into_iter().collect();
        let mut scored: Vec<(usize, usize)> = (0..self.documents.len())
            .filter_map(|id| {
                let s = self.overlap(&words, id);
                (s > 0).then_some((id, s))
            })
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        ToolResult {
            query: query.to_string(),
            doc_ids: scored.iter().map(|&(id, _)| id).collect(),
            documents: scored
                .iter()
                .map(|&(id, _)| self.documents[id].text.clone())
                .collect(),
        }
    }
}

/// Free-function form of [`KnowledgeBase::search`].
pub fn search(kb: &KnowledgeBase, query: &str, top_k: usize) -> ToolResult {
    kb.search(query, top_k)
}
