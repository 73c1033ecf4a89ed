use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scene::Predicate;
use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 8] = ["cup", "chair", "table", "lamp", "dog", "cat", "car", "tree"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "black"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const DIRECTIONS: [&str; 4] = ["left", "right", "above", "below"];
pub const MAX_COUNT: usize = 8;

pub const N_CATEGORIES: usize = CATEGORIES.len();
pub const N_COLORS: usize = COLORS.len();
pub const N_SIZES: usize = SIZES.len();

/// Answers the template set can produce.
pub const BASE_ANSWERS: usize = 2 + N_CATEGORIES + N_COLORS + N_SIZES + DIRECTIONS.len() + MAX_COUNT + 1;

pub const PAD: u32 = 0;

const TEMPLATE_WORDS: &[&str] = &[
    "is", "the", "to", "left", "or", "right", "of", "on", "above", "below", "higher", "lower", "than", "there", "a", "any",
    "what", "color", "which", "does", "have", "size", "how", "big", "look", "can", "you", "see", "many", "are", "number",
    "objects", "two", "close", "each", "other", "pair", "near", "object", "thing", "?",
];

/// Stable id assignments for question tokens, answers and predicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
    pub predicates: Vec<String>,
    #[serde(skip)]
    token_ids: BTreeMap<String, u32>,
    #[serde(skip)]
    answer_ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds the vocabulary; `answer_classes` ≥ [`BASE_ANSWERS`] pads the
    /// answer list with never-used classes.
    pub fn new(answer_classes: usize) -> Result<Self> {
        if answer_classes < BASE_ANSWERS {
            return Err(Error::Config {
                path: "corpus.answer_classes".into(),
                reason: format!("must be at least {BASE_ANSWERS}"),
            });
        }
        let mut tokens = vec!["<pad>".to_string()];
        for w in TEMPLATE_WORDS.iter().chain(&CATEGORIES).chain(&COLORS).chain(&SIZES) {
            if !tokens.iter().any(|t| t == w) {
                tokens.push((*w).to_string());
            }
        }
        let mut answers: Vec<String> = ["yes", "no"].iter().map(|s| s.to_string()).collect();
        answers.extend(CATEGORIES.iter().chain(&COLORS).chain(&SIZES).chain(&DIRECTIONS).map(|s| s.to_string()));
        answers.extend((0..=MAX_COUNT).map(|n| n.to_string()));
        for k in answers.len()..answer_classes {
            answers.push(format!("<unused-{k}>"));
        }
        let predicates = Predicate::ALL.iter().map(|p| p.name().to_string()).collect();
        Ok(Self::from_parts(tokens, answers, predicates))
    }

    fn from_parts(tokens: Vec<String>, answers: Vec<String>, predicates: Vec<String>) -> Self {
        let token_ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let answer_ids = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Vocab { tokens, answers, predicates, token_ids, answer_ids }
    }

    /// Restores lookup tables after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_parts(self.tokens, self.answers, self.predicates)
    }

    /// SHA-256 over the token, answer and predicate lists.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn token(&self, word: &str) -> u32 {
        *self.token_ids.get(word).unwrap_or_else(|| panic!("word `{word}` missing from vocabulary"))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn answer(&self, name: &str) -> usize {
        *self.answer_ids.get(name).unwrap_or_else(|| panic!("answer `{name}` missing from vocabulary"))
    }

    pub fn answer_name(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.token(w)).collect()
    }

    /// Words for a token sequence, skipping padding.
    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<&str>> {
        tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.word(t).ok_or_else(|| Error::Parse(format!("unknown token id {t}"))))
            .collect()
    }

    pub fn yes_no(&self, v: bool) -> usize {
        self.answer(if v { "yes" } else { "no" })
    }

    pub fn category_answer(&self, c: usize) -> usize {
        self.answer(CATEGORIES[c])
    }

    pub fn color_answer(&self, c: usize) -> usize {
        self.answer(COLORS[c])
    }

    pub fn size_answer(&self, s: usize) -> usize {
        self.answer(SIZES[s])
    }

    pub fn count_answer(&self, n: usize) -> usize {
        self.answer(&n.min(MAX_COUNT).to_string())
    }
}
