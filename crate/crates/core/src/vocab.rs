//! Closed word-level vocabulary.
//!
//! Every segment tag is a single reserved token, punctuation marks are split
//! off into their own tokens, and everything else is a whitespace-separated
//! word that must already be known. There is no unknown-token fallback.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::VocabError;

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Tag tokens, in vocabulary order. Open/close pairs alternate.
pub const TAGS: [&str; 10] = [
    "<mem>",
    "</mem>",
    "<think>",
    "</think>",
    "<tool_call>",
    "</tool_call>",
    "<information>",
    "</information>",
    "<answer>",
    "</answer>",
];

/// Punctuation characters that always tokenize on their own.
pub const PUNCTUATION: [char; 4] = [';', '?', ',', '.'];

/// Plain words every vocabulary carries (question scaffolding and think verbs).
pub const FUNCTION_WORDS: [&str; 7] = ["what", "is", "the", "of", "also", "search", "answer"];

/// Number of reserved tokens; dataset words get ids from here on.
pub const RESERVED_TOKENS: usize = TAGS.len() + PUNCTUATION.len() + FUNCTION_WORDS.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    lookup: HashMap<String, Token>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved tokens plus `words`.
    ///
    /// Duplicates (including words that collide with reserved tokens) are
    /// dropped; the order of first appearance is kept so the id assignment is
    /// a pure function of the input order.
    pub fn new<I, S>(words: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            surfaces: Vec::new(),
            lookup: HashMap::new(),
        };
        for tag in TAGS {
            vocab.push(tag);
        }
        for p in PUNCTUATION {
            vocab.push(&p.to_string());
        }
        for w in FUNCTION_WORDS {
            vocab.push(w);
        }
        for w in words {
            let w = w.as_ref();
            if w.is_empty()
                || w.chars().any(|c| c.is_whitespace() || c == '<' || c == '>')
                || w.chars().any(|c| PUNCTUATION.contains(&c))
            {
                return Err(VocabError::InvalidWord(w.to_string()));
            }
            vocab.push(w);
        }
        Ok(vocab)
    }

    fn push(&mut self, surface: &str) {
        if self.lookup.contains_key(surface) {
            return;
        }
        let id = Token(self.surfaces.len() as u32);
        self.surfaces.push(surface.to_string());
        self.lookup.insert(surface.to_string(), id);
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, token: Token) -> &str {
        &self.surfaces[token.index()]
    }

    pub fn get(&self, surface: &str) -> Option<Token> {
        self.lookup.get(surface).copied()
    }

    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.surfaces.len()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Token for an opening (`close == false`) or closing tag of `kind`.
    pub fn tag(&self, kind: crate::trajectory::SegmentKind, close: bool) -> Token {
        Token((kind.ordinal() * 2 + usize::from(close)) as u32)
    }

    /// `Some((kind, is_close))` when `token` is one of the reserved tags.
    pub fn as_tag(&self, token: Token) -> Option<(crate::trajectory::SegmentKind, bool)> {
        let i = token.index();
        if i < TAGS.len() {
            Some((crate::trajectory::SegmentKind::ALL[i / 2], i % 2 == 1))
        } else {
            None
        }
    }

    /// Splits `text` into tokens. Tags and punctuation become their own
    /// tokens; any other run of non-whitespace characters must be a word of
    /// this vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>, VocabError> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = text[i..].chars().next().expect("in bounds");
            if c.is_whitespace() {
                i += c.len_utf8();
                continue;
            }
            if c == '<' {
                let end = text[i..]
                    .find('>')
                    .map(|e| i + e + 1)
                    .ok_or(VocabError::OutOfVocabulary {
                        word: text[i..].to_string(),
                        offset: i,
                    })?;
                let tag = &text[i..end];
                out.push(self.get(tag).ok_or_else(|| VocabError::OutOfVocabulary {
                    word: tag.to_string(),
                    offset: i,
                })?);
                i = end;
                continue;
            }
            if PUNCTUATION.contains(&c) {
                out.push(self.get(&c.to_string()).expect("punctuation is reserved"));
                i += 1;
                continue;
            }
            let start = i;
            while i < bytes.len() {
                let c = text[i..].chars().next().expect("in bounds");
                if c.is_whitespace() || c == '<' || PUNCTUATION.contains(&c) {
                    break;
                }
                i += c.len_utf8();
            }
            let word = &text[start..i];
            out.push(self.get(word).ok_or_else(|| VocabError::OutOfVocabulary {
                word: word.to_string(),
                offset: start,
            })?);
        }
        Ok(out)
    }

    /// Joins tokens with single spaces. Inverse of [`Vocabulary::tokenize`]
    /// for tag-free sequences.
    pub fn detokenize(&self, tokens: &[Token]) -> String {
        let mut s = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(self.surface(*t));
        }
        s
    }

    /// SHA-256 over the ordered surfaces, hex encoded.
    pub fn hash(&self) -> VocabHash {
        let mut h = Sha256::new();
        for s in &self.surfaces {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        VocabHash(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabHash(pub String);

impl fmt::Display for VocabHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
