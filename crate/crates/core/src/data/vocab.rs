use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Example;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Descriptor tokens occupy ids `FIRST_DESCRIPTOR .. FIRST_DESCRIPTOR + MAX_TASKS`.
pub const FIRST_DESCRIPTOR: u32 = 4;
pub const MAX_TASKS: usize = 8;
/// First id handed to a data character.
pub const FIRST_CHAR: u32 = FIRST_DESCRIPTOR + MAX_TASKS as u32;

/// Character-level vocabulary with a fixed block of reserved ids.
///
/// Ids 0..=3 are PAD, BOS, EOS, UNK; ids 4..12 are task descriptors; data
/// characters follow in codepoint order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, u32>,
}

impl Vocabulary {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, FIRST_CHAR + i as u32))
            .collect();
        Self { chars, index }
    }

    /// Every character of every input and target, across all given examples.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        Self::from_chars(
            examples
                .into_iter()
                .flat_map(|e| e.input.chars().chain(e.target.chars())),
        )
    }

    pub fn len(&self) -> usize {
        FIRST_CHAR as usize + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn descriptor(task: usize) -> u32 {
        assert!(task < MAX_TASKS, "task index {task} exceeds {MAX_TASKS}");
        FIRST_DESCRIPTOR + task as u32
    }

    pub fn token_id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        s.chars().map(|c| self.token_id(c)).collect()
    }

    /// Target ids with the closing EOS.
    pub fn encode_target(&self, s: &str) -> Vec<u32> {
        let mut ids = self.encode(s);
        ids.push(EOS);
        ids
    }

    /// Reserved ids other than UNK are dropped; UNK renders as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id >= FIRST_CHAR {
                    self.chars.get((id - FIRST_CHAR) as usize).copied()
                } else if id == UNK {
                    Some('\u{fffd}')
                } else {
                    None
                }
            })
            .collect()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, FIRST_CHAR + i as u32))
            .collect();
    }
}
