use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const CONCAT: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_SYMBOLS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<concat>"];

/// Data symbols of the synthetic corpora; `"0"` is the inserted filler
/// token of the second experiment, not padding.
pub const SYNTHETIC_SYMBOLS: [&str; 6] = ["0", "1", "2", "3", "4", "5"];

/// Bijective symbol ↔ id map. Specials occupy ids `0..4` in the order
/// PAD, BOS, EOS, CONCAT; data symbols follow densely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(data_symbols: &[S]) -> Result<Self> {
        let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend(data_symbols.iter().map(|s| s.as_ref().to_owned()));
        Self::from_symbols(symbols)
    }

    fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Argument(format!(
                    "symbol {s:?} is empty or contains whitespace"
                )));
            }
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::Argument(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    /// The shared vocabulary of the synthetic experiments: specials followed
    /// by `"0"`..`"5"`.
    pub fn synthetic() -> Self {
        Self::new(&SYNTHETIC_SYMBOLS).expect("static symbols are valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Parses space-separated symbols. Only data symbols and CONCAT are
    /// accepted inside a sentence.
    pub fn encode(&self, text: &str) -> std::result::Result<Sentence, String> {
        let mut tokens = Vec::new();
        for sym in text.split_whitespace() {
            match self.id(sym) {
                Some(id) if id == CONCAT || !Self::is_special(id) => tokens.push(id),
                Some(_) => return Err(format!("special symbol {sym:?} not allowed in a sentence")),
                None => return Err(format!("unknown symbol {sym:?}")),
            }
        }
        Ok(Sentence(tokens))
    }

    pub fn decode(&self, sentence: &[TokenId]) -> String {
        sentence
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One symbol per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let symbols: Vec<String> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if symbols.len() < NUM_SPECIALS || symbols[..NUM_SPECIALS] != SPECIAL_SYMBOLS {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("vocabulary must start with {}", SPECIAL_SYMBOLS.join(", ")),
            });
        }
        Self::from_symbols(symbols)
    }
}

/// A token-id sequence. Never contains PAD.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sentence(pub Vec<TokenId>);

impl Sentence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Sentence(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.0
    }
}

impl AsRef<[TokenId]> for Sentence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

impl Deref for Sentence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Sentence {
    fn from(v: Vec<TokenId>) -> Self {
        Sentence(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_layout() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.len(), 10);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<concat>"), Some(CONCAT));
        assert_eq!(v.id("0"), Some(4));
        assert_eq!(v.id("5"), Some(9));
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.symbol(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn encode_rejects_unknown_and_specials() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.encode("2 1").unwrap(), Sentence(vec![6, 5]));
        assert!(v.encode("9").unwrap_err().contains("\"9\""));
        assert!(v.encode("1 <pad>").is_err());
        assert_eq!(v.encode("2 <concat> 2").unwrap().len(), 3);
    }

    #[test]
    fn duplicate_symbols_rejected() {
        assert!(Vocabulary::new(&["a", "a"]).is_err());
        assert!(Vocabulary::new(&["<s>"]).is_err());
    }
}
