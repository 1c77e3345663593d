//! Character-level tokenizer.
//!
//! Ids 0..3 are reserved: PAD, EOS, UNK. The rest of the vocabulary is the
//! sorted set of characters seen in the corpus, so two corpora with the same
//! character set always produce the same mapping.

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const RESERVED: usize = 3;

/// Serializes as the bare character list; the lookup table is rebuilt on
/// deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub struct Vocab {
    /// Characters in id order (id = RESERVED + index).
    chars: String,
    lookup: HashMap<char, u32>,
}

impl From<Vocab> for String {
    fn from(v: Vocab) -> String {
        v.chars
    }
}

impl From<String> for Vocab {
    fn from(chars: String) -> Vocab {
        Vocab::from_chars(chars)
    }
}

impl Vocab {
    /// Builds the vocabulary from corpus text: the sorted set of distinct
    /// characters, behind the three reserved ids.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        if set.is_empty() {
            return Err(Error::Tokenizer("corpus has no characters".into()));
        }
        Ok(Vocab::from_chars(set.into_iter().collect()))
    }

    /// Rebuilds a vocabulary from its serialized character list.
    pub fn from_chars(chars: String) -> Vocab {
        let lookup = chars
            .chars()
            .enumerate()
            .map(|(i, c)| (c, (RESERVED + i) as u32))
            .collect();
        Vocab { chars, lookup }
    }

    /// The character list in id order, for serialization.
    pub fn chars(&self) -> &str {
        &self.chars
    }

    pub fn size(&self) -> usize {
        RESERVED + self.lookup.len()
    }

    /// Encodes text one character per token; unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars()
            .map(|c| self.lookup.get(&c).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Decodes ids back to text. PAD and EOS decode to nothing, UNK to the
    /// replacement character, out-of-range ids to the replacement character.
    pub fn decode(&self, ids: &[u32]) -> String {
        let table: Vec<char> = self.chars.chars().collect();
        ids.iter()
            .filter_map(|&id| match id {
                PAD_ID | EOS_ID => None,
                UNK_ID => Some('\u{FFFD}'),
                _ => Some(
                    table
                        .get(id as usize - RESERVED)
                        .copied()
                        .unwrap_or('\u{FFFD}'),
                ),
            })
            .collect()
    }
}
