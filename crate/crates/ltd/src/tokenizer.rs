//! Word-level target-text tokenizer.
//!
//! Target phrases are category names (or the literal `[all]`). A sequence is
//! `[CLS]` followed by each phrase's lowercased words and a terminating
//! `[SEP]`, padded to the fixed target-query count. Phrase `i`'s tokens carry
//! segment id `i` so the model can tell targets apart.

use std::collections::HashMap;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const ALL: u32 = 3;
pub const UNK: u32 = 4;

/// Phrase spelling that selects every object of interest.
pub const ALL_PHRASE: &str = "[all]";

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("target-query capacity {0} is too small; need at least 2 for [CLS],[SEP]")]
    CapacityTooSmall(usize),
    #[error("empty target phrase at position {0}")]
    EmptyPhrase(usize),
}

/// Special tokens plus the words of every category name, in category order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_category_names<S: AsRef<str>>(names: &[S]) -> Vocab {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for special in ["[PAD]", "[CLS]", "[SEP]", ALL_PHRASE, "[UNK]"] {
            vocab.push(special);
        }
        for name in names {
            for word in name.as_ref().to_lowercase().split_whitespace() {
                if !vocab.index.contains_key(word) {
                    vocab.push(word);
                }
            }
        }
        vocab
    }

    fn push(&mut self, token: &str) {
        self.index.insert(token.to_string(), self.tokens.len() as u32);
        self.tokens.push(token.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Word id, or `UNK` for out-of-vocabulary words.
    pub fn encode_word(&self, word: &str) -> u32 {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }
}

/// Tokenized target text padded to the model's target-query count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    /// true where the position is padding
    pub pad_mask: Vec<bool>,
    /// leading phrases that fit the capacity; instances referencing dropped
    /// phrases must not be supervised
    pub phrases_kept: usize,
}

impl TokenSequence {
    /// Tokenize `phrases` into a `capacity`-long sequence. Phrases that do
    /// not fit are dropped whole from the end, never mid-phrase.
    pub fn build<S: AsRef<str>>(
        phrases: &[S],
        vocab: &Vocab,
        capacity: usize,
    ) -> Result<TokenSequence, TokenizeError> {
        if capacity < 2 {
            return Err(TokenizeError::CapacityTooSmall(capacity));
        }
        let mut token_ids = vec![CLS];
        let mut segment_ids = vec![0u32];
        let mut phrases_kept = 0;

        for (ordinal, phrase) in phrases.iter().enumerate() {
            let phrase = phrase.as_ref();
            let word_ids: Vec<u32> = if phrase == ALL_PHRASE {
                vec![ALL]
            } else {
                let ids: Vec<u32> = phrase
                    .to_lowercase()
                    .split_whitespace()
                    .map(|w| vocab.encode_word(w))
                    .collect();
                if ids.is_empty() {
                    return Err(TokenizeError::EmptyPhrase(ordinal));
                }
                ids
            };
            if token_ids.len() + word_ids.len() + 1 > capacity {
                break;
            }
            for id in word_ids {
                token_ids.push(id);
                segment_ids.push(ordinal as u32);
            }
            token_ids.push(SEP);
            segment_ids.push(ordinal as u32);
            phrases_kept += 1;
        }

        if phrases_kept == 0 {
            // no targets: the sequence is exactly [CLS],[SEP]
            token_ids = vec![CLS, SEP];
            segment_ids = vec![0, 0];
        }

        let mut pad_mask = vec![false; token_ids.len()];
        while token_ids.len() < capacity {
            token_ids.push(PAD);
            segment_ids.push(0);
            pad_mask.push(true);
        }
        Ok(TokenSequence {
            token_ids,
            segment_ids,
            pad_mask,
            phrases_kept,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Count of non-padding positions.
    pub fn effective_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }
}
