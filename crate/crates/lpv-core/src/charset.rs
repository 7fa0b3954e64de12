//! Character classes and fixed-length label encoding.

use crate::{Error, Result};

/// Encoded ground truth: class ids for the text symbols, then `[EOS]`, then
/// `[PAD]` up to the slot count T.
pub type LabelSeq = Vec<usize>;

/// Ordered symbol list plus the two structural classes `[EOS]` and `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
}

impl Charset {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(Error::Config(format!("duplicate charset symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Config("empty charset".into()));
        }
        Ok(Charset { symbols })
    }

    /// The 12-letter set the built-in vocabulary is written in.
    pub fn desk() -> Self {
        Charset::new("acdegimnorst".chars().collect()).unwrap()
    }

    /// Digits plus lowercase letters: a 38-class head including the two
    /// structural symbols.
    pub fn alnum() -> Self {
        let symbols = ('0'..='9').chain('a'..='z').collect();
        Charset::new(symbols).unwrap()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Total class count C, including `[EOS]` and `[PAD]`.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn eos_id(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad_id(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbol_of(&self, class: usize) -> Option<char> {
        self.symbols.get(class).copied()
    }

    /// Encode `text` into T slots: symbols, `[EOS]`, `[PAD]`-fill.
    /// The text must leave room for `[EOS]`, i.e. `len(text) ≤ T−1`.
    pub fn encode(&self, text: &str, t_slots: usize) -> Result<LabelSeq> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() + 1 > t_slots {
            return Err(Error::Data(format!(
                "text {text:?} too long for {t_slots} label slots"
            )));
        }
        let mut label = Vec::with_capacity(t_slots);
        for c in chars {
            let id = self
                .class_of(c)
                .ok_or_else(|| Error::Data(format!("symbol {c:?} not in charset")))?;
            label.push(id);
        }
        label.push(self.eos_id());
        label.resize(t_slots, self.pad_id());
        Ok(label)
    }

    /// Text form of a label: symbols up to the first `[EOS]`.
    pub fn decode_label(&self, label: &[usize]) -> String {
        let mut out = String::new();
        for &id in label {
            if id == self.eos_id() {
                break;
            }
            if let Some(c) = self.symbol_of(id) {
                out.push(c);
            }
        }
        out
    }
}
