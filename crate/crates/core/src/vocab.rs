//! Closed word-level vocabulary with role, sequence-control and hallucination
//! marker tokens.
//!
//! Special tokens always occupy ids `0..7` in [`Special::ALL`] order; content
//! tokens (digits, minus sign, template words) follow in lexicographic order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::VocabError;

pub type TokenId = u32;

/// Reserved roles with a dedicated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Special {
    Tutor,
    Student,
    Eot,
    Eos,
    Pad,
    HalOpen,
    HalClose,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Tutor,
        Special::Student,
        Special::Eot,
        Special::Eos,
        Special::Pad,
        Special::HalOpen,
        Special::HalClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Tutor => "<tutor>",
            Special::Student => "<student>",
            Special::Eot => "<eot>",
            Special::Eos => "<eos>",
            Special::Pad => "<pad>",
            Special::HalOpen => "[hal]",
            Special::HalClose => "[/hal]",
        }
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Symbols every numeric answer can be spelled with.
pub const NUMBER_SYMBOLS: [&str; 11] = ["-", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    specials: BTreeMap<Special, TokenId>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the literal words used by utterance templates.
    /// Digits and the minus sign are always included.
    pub fn build<'a>(template_words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut content: BTreeSet<String> = NUMBER_SYMBOLS.iter().map(|s| s.to_string()).collect();
        for w in template_words {
            if Special::ALL.iter().any(|s| s.as_str() == w) {
                continue;
            }
            content.insert(w.to_string());
        }
        let tokens = Special::ALL
            .iter()
            .map(|s| s.as_str().to_string())
            .chain(content)
            .collect::<Vec<_>>();
        Self::from_tokens(tokens).expect("freshly built vocabulary is well formed")
    }

    /// Rebuilds a vocabulary from a persisted token listing. The first seven
    /// entries must be the special tokens in canonical order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < Special::ALL.len() {
            return Err(VocabError::Malformed("missing special tokens".into()));
        }
        let mut specials = BTreeMap::new();
        for (i, s) in Special::ALL.iter().enumerate() {
            if tokens[i] != s.as_str() {
                return Err(VocabError::Malformed(format!(
                    "expected {} at id {i}, found {:?}",
                    s.as_str(),
                    tokens[i]
                )));
            }
            specials.insert(*s, i as TokenId);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(VocabError::Malformed(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(VocabError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, specials, index })
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

    pub fn special(&self, role: Special) -> TokenId {
        self.specials[&role]
    }

    pub fn specials(&self) -> &BTreeMap<Special, TokenId> {
        &self.specials
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < Special::ALL.len()
    }

    pub fn id(&self, token: &str) -> Result<TokenId, VocabError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::InvalidId { id, size: self.tokens.len() })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace().map(|unit| self.id(unit)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let words = ids.iter().map(|&id| self.token(id)).collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    specials: BTreeMap<Special, TokenId>,
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabRepr { tokens: self.tokens.clone(), specials: self.specials.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = VocabRepr::deserialize(d)?;
        let vocab = Vocab::from_tokens(repr.tokens).map_err(serde::de::Error::custom)?;
        if vocab.specials != repr.specials {
            return Err(serde::de::Error::custom("special-role map disagrees with token listing"));
        }
        Ok(vocab)
    }
}
