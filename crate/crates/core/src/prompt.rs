//! Whitespace tokenization, the toy vocabulary and user-token bindings.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder for the learnable subject token.
pub const USER_TOKEN: &str = "<v>";
/// Placeholder for the class word inside prompt templates.
pub const CLASS_PLACEHOLDER: &str = "<class>";
/// Rare token the subject embedding starts from.
pub const DEFAULT_INIT_TOKEN: &str = "ktn";
pub const DEFAULT_TEMPLATE: &str = "a photo of a <v> <class>";

/// Words the toy corpus is built from, followed by unused filler tokens.
const WORDS: &[&str] = &[
    "a",
    "photo",
    "of",
    "man",
    "woman",
    "blond",
    "brown",
    "black",
    "red",
    "gray",
    "pale",
    "tan",
    "dark",
    "bearded",
    "ktn",
    "sks",
    "person",
    "face",
    "portrait",
    "picture",
    "the",
    "with",
    "and",
    "in",
    "young",
    "old",
    "smiling",
    "serious",
    "hair",
    "skin",
    "eyes",
    "blue",
    "green",
    "light",
    "studio",
    "outdoor",
    "close",
    "up",
    "shot",
    "headshot",
    "image",
    "style",
    "painting",
    "sketch",
    "drawing",
    "art",
    "by",
    "on",
    "at",
    "wearing",
    "shirt",
    "hat",
    "glasses",
    "background",
    "white",
    "bright",
    "soft",
    "lit",
    "xqz",
    "zwx",
    "pkr",
    "vlm",
    "qjn",
];

/// Exact-match word vocabulary. Row `i` of the text embedding table belongs
/// to `tokens()[i]`; [`USER_TOKEN`] is never part of the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t == USER_TOKEN || t.split_whitespace().count() != 1 {
                return Err(Error::Config(format!("invalid vocabulary entry `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn toy() -> Self {
        Self::new(WORDS.iter().map(|w| w.to_string()).collect()).expect("toy vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        if self.index.is_empty() && !self.tokens.is_empty() {
            // deserialized without the index
            return self
                .tokens
                .iter()
                .position(|t| t == token)
                .ok_or_else(|| Error::Vocabulary(token.to_string()));
        }
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token).is_ok()
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_string).collect()
}

/// A conditioning prompt with the subject token and class token located,
/// plus the subject token's own embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBinding {
    pub tokens: Vec<String>,
    pub v_index: usize,
    pub o_index: usize,
    pub template: String,
    pub class_word: String,
    pub init_token: String,
    /// `1 × d_text` learnable embedding of [`USER_TOKEN`].
    pub user_embedding: Array2<f64>,
}

impl PromptBinding {
    /// Resolves `template` against `class_word` and seeds the subject
    /// embedding with a copy of `init_token`'s row of `embedding_table`.
    pub fn new(
        vocab: &Vocabulary,
        embedding_table: &Array2<f64>,
        template: &str,
        class_word: &str,
        init_token: &str,
    ) -> Result<Self> {
        vocab.id(class_word)?;
        let init_id = vocab.id(init_token)?;
        let filled = if template.contains(CLASS_PLACEHOLDER) {
            template.replace(CLASS_PLACEHOLDER, class_word)
        } else {
            template.to_string()
        };
        let tokens = tokenize(&filled);
        let v_positions: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_str() == USER_TOKEN)
            .map(|(i, _)| i)
            .collect();
        let v_index = match v_positions.as_slice() {
            [i] => *i,
            [] => {
                return Err(Error::Argument(format!(
                    "template `{template}` has no {USER_TOKEN} token"
                )))
            }
            _ => {
                return Err(Error::Argument(format!(
                    "template `{template}` has several {USER_TOKEN} tokens"
                )))
            }
        };
        let o_index = tokens
            .iter()
            .enumerate()
            .rev()
            .find(|(_, t)| t.as_str() == class_word)
            .map(|(i, _)| i)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "template `{template}` never mentions class `{class_word}`"
                ))
            })?;
        for t in &tokens {
            if t != USER_TOKEN {
                vocab.id(t)?;
            }
        }
        let user_embedding = embedding_table
            .row(init_id)
            .to_owned()
            .insert_axis(ndarray::Axis(0));
        Ok(Self {
            tokens,
            v_index,
            o_index,
            template: template.to_string(),
            class_word: class_word.to_string(),
            init_token: init_token.to_string(),
            user_embedding,
        })
    }

    pub fn prompt(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.v_index >= n || self.o_index >= n {
            return Err(Error::Argument(format!(
                "binding indices ({}, {}) outside prompt of {n} tokens",
                self.v_index, self.o_index
            )));
        }
        if self.v_index == self.o_index {
            return Err(Error::Argument(
                "subject and class token share a position".into(),
            ));
        }
        Ok(())
    }
}
