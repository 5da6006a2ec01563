//! Character-level tokenization with reserved special tokens.
//!
//! One token per Unicode scalar value, which handles Chinese and
//! ASCII alike without a merge table. Ids 0..5 are reserved:
//! PAD, UNK, CLS, SEP, MASK.

use std::collections::HashMap;

use crate::corpus::{ExpandedExample, LabelSet};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Bidirectional character/id map. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    char_to_id: HashMap<char, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary over every character occurring in corpus
    /// texts, template literals, or labels, in first-occurrence order.
    pub fn build(
        corpus: &[ExpandedExample],
        templates: &[&PromptTemplate],
        labels: &LabelSet,
    ) -> Vocab {
        let mut v = Vocab {
            id_to_token: SPECIALS.iter().map(|s| s.to_string()).collect(),
            char_to_id: HashMap::new(),
        };
        let add = |c: char, v: &mut Vocab| {
            if !v.char_to_id.contains_key(&c) {
                v.char_to_id.insert(c, v.id_to_token.len());
                v.id_to_token.push(c.to_string());
            }
        };
        for ex in corpus {
            for c in ex.text.chars() {
                add(c, &mut v);
            }
        }
        for t in templates {
            for c in t.literal_chars() {
                add(c, &mut v);
            }
        }
        for l in labels.labels() {
            for c in l.chars() {
                add(c, &mut v);
            }
        }
        v
    }

    /// Restores a vocabulary from the ordered token list of a
    /// checkpoint manifest.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len()
            || tokens[..SPECIALS.len()] != SPECIALS.map(String::from)
        {
            return Err(Error::Vocab { reason: "token list does not start with the reserved specials".into() });
        }
        let mut char_to_id = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(SPECIALS.len()) {
            let mut chars = tok.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::Vocab { reason: format!("non-character token {tok:?} at id {id}") });
            };
            if char_to_id.insert(c, id).is_some() {
                return Err(Error::Vocab { reason: format!("duplicate token {tok:?}") });
            }
        }
        Ok(Vocab { id_to_token: tokens, char_to_id })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_list(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id_of_char(&self, c: char) -> TokenId {
        self.char_to_id.get(&c).copied().unwrap_or(UNK)
    }

    /// One id per Unicode scalar value; unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id_of_char(c)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.id_to_token[id].as_str()).collect()
    }

    /// True when every character of `text` has its own id.
    pub fn covers(&self, text: &str) -> bool {
        text.chars().all(|c| self.char_to_id.contains_key(&c))
    }
}
