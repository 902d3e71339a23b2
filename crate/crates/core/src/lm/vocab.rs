//! Character vocabulary with three reserved markers. BOS/EOS/PAD take ids
//! 0/1/2; content characters follow in construction order. One shared
//! character set across all models keeps per-token logit addition
//! well-defined.

use std::collections::HashMap;

use crate::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const RESERVED: usize = 3;

/// Total symbol budget, reserved markers included.
pub const MAX_SYMBOLS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.len() + RESERVED > MAX_SYMBOLS {
            return Err(Error::Vocab(format!(
                "{} content symbols exceed the budget of {}",
                chars.len(),
                MAX_SYMBOLS - RESERVED
            )));
        }
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, RESERVED + i).is_some() {
                return Err(Error::Vocab(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Vocab { chars, index })
    }

    /// The shared character set of the lab tasks: digits, operators, the
    /// lowercase alphabet, and the cipher frame markers.
    pub fn lab() -> Vocab {
        Vocab::new("0123456789+=abcdefghijklmnopqrstuvwxyzT:").expect("static set fits")
    }

    /// Tiny vocabulary for the exhaustively enumerable task.
    pub fn micro() -> Vocab {
        Vocab::new("abc=").expect("static set fits")
    }

    pub fn size(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn content_chars(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id_of(c).ok_or_else(|| Error::Vocab(format!("symbol {c:?} not in vocabulary"))))
            .collect()
    }

    /// Token ids back to text. Reserved markers render as U+FFFD so they can
    /// never masquerade as task content.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| if id >= RESERVED && id < self.size() { self.chars[id - RESERVED] } else { '\u{FFFD}' })
            .collect()
    }

    /// Completion text under the task reading: everything up to (excluding)
    /// the first EOS.
    pub fn completion_text(&self, ids: &[usize]) -> String {
        let upto = ids.iter().position(|&id| id == EOS).unwrap_or(ids.len());
        self.decode(&ids[..upto])
    }

    pub fn describe(&self, id: usize) -> String {
        match id {
            BOS => "<bos>".to_string(),
            EOS => "<eos>".to_string(),
            PAD => "<pad>".to_string(),
            _ if id < self.size() => self.chars[id - RESERVED].to_string(),
            _ => format!("<invalid {id}>"),
        }
    }
}
