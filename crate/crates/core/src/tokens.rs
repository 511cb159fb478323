//! Word-level tokenizer with a fixed inside/outside slot layout.
//!
//! A tokenized prompt always has `1 + 2 * budget` positions:
//! `[<bos>, budget inside slots, budget outside slots]`. Unused slots hold
//! `<pad>` and still belong to their side, so the inside columns `J_in` and
//! outside columns `J_out` of the cross-attention map depend only on the
//! budget.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const BOS_WORD: &str = "<bos>";
pub const PAD_WORD: &str = "<pad>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, W>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = W>,
        W: Into<String>,
    {
        let mut vocab = Self {
            words: vec![BOS_WORD.into(), PAD_WORD.into()],
            ids: BTreeMap::from([(BOS_WORD.into(), BOS_ID), (PAD_WORD.into(), PAD_ID)]),
        };
        for w in words {
            let w = w.into();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid word {w:?}")));
            }
            if vocab.ids.contains_key(&w) {
                return Err(Error::Vocabulary(format!("duplicate word {w:?}")));
            }
            vocab.ids.insert(w.clone(), vocab.words.len());
            vocab.words.push(w);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        match self.ids.get(word) {
            Some(&id) if id > PAD_ID => Ok(id),
            _ => Err(Error::UnknownWord(word.to_string())),
        }
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.ids)?)
    }

    /// Parses a `{word: id}` object. Ids must be dense and the reserved ids
    /// must map to the reserved words.
    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(s)?;
        let mut words = vec![None; map.len()];
        for (w, &id) in &map {
            let slot = words
                .get_mut(id)
                .ok_or_else(|| Error::Vocabulary(format!("id {id} for {w:?} is not dense")))?;
            if slot.replace(w.clone()).is_some() {
                return Err(Error::Vocabulary(format!("id {id} assigned twice")));
            }
        }
        let words: Vec<String> = words.into_iter().map(Option::unwrap).collect();
        if words.len() < 2 || words[BOS_ID] != BOS_WORD || words[PAD_ID] != PAD_WORD {
            return Err(Error::Vocabulary("reserved ids 0/1 must be <bos>/<pad>".into()));
        }
        Self::new(words.into_iter().skip(2))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPair {
    pub inside: Vec<String>,
    pub outside: Vec<String>,
}

impl PromptPair {
    pub fn new(inside: &str, outside: &str) -> Self {
        Self {
            inside: inside.split_whitespace().map(str::to_string).collect(),
            outside: outside.split_whitespace().map(str::to_string).collect(),
        }
    }

    /// Parses the `"inside|outside"` form used on the command line.
    pub fn parse(s: &str) -> Self {
        let (i, o) = s.split_once('|').unwrap_or((s, ""));
        Self::new(i, o)
    }

    pub fn inside_text(&self) -> String {
        self.inside.join(" ")
    }

    pub fn outside_text(&self) -> String {
        self.outside.join(" ")
    }
}

impl std::fmt::Display for PromptPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}|{}", self.inside_text(), self.outside_text())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    pub budget: usize,
}

impl TokenizedPrompt {
    pub const BOS_INDEX: usize = 0;

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bos_index(&self) -> usize {
        Self::BOS_INDEX
    }

    pub fn inside_columns(&self) -> std::ops::Range<usize> {
        1..1 + self.budget
    }

    pub fn outside_columns(&self) -> std::ops::Range<usize> {
        1 + self.budget..1 + 2 * self.budget
    }

    /// Positions whose token id differs from `other` (same budget).
    pub fn changed_columns(&self, other: &Self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&other.ids)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn tokenize(prompt: &PromptPair, vocab: &Vocabulary, budget: usize) -> Result<TokenizedPrompt> {
    let mut ids = Vec::with_capacity(1 + 2 * budget);
    ids.push(BOS_ID);
    for (side, words) in [("inside", &prompt.inside), ("outside", &prompt.outside)] {
        if words.len() > budget {
            return Err(Error::Budget {
                side,
                len: words.len(),
                budget,
            });
        }
        for w in words {
            ids.push(vocab.id(w)?);
        }
        ids.resize(ids.len() + budget - words.len(), PAD_ID);
    }
    Ok(TokenizedPrompt { ids, budget })
}

pub fn null_prompt(budget: usize) -> TokenizedPrompt {
    let mut ids = vec![PAD_ID; 1 + 2 * budget];
    ids[0] = BOS_ID;
    TokenizedPrompt { ids, budget }
}

pub fn detokenize(tokens: &TokenizedPrompt, vocab: &Vocabulary) -> Result<PromptPair> {
    let side = |range: std::ops::Range<usize>| -> Result<Vec<String>> {
        tokens.ids[range]
            .iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| {
                vocab
                    .word(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown id {id}")))
            })
            .collect()
    };
    Ok(PromptPair {
        inside: side(tokens.inside_columns())?,
        outside: side(tokens.outside_columns())?,
    })
}
