//! Vocabularies, parallel corpora, the synthetic generators, and the TSV
//! corpus format.
//!
//! Corpus files hold one pair per line as `source<TAB>target`, tokens
//! separated by single spaces. Lines starting with `#` and blank lines are
//! skipped.

pub mod synthetic;
pub mod vocab;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

pub use synthetic::{admissible_exp2, expand_exp1, gen_exp1, gen_exp2, pad_exp2, split_exp2};
pub use vocab::{Sentence, TokenId, Vocabulary, BOS, CONCAT, EOS, PAD};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<(Sentence, Sentence)>,
    vocab: Arc<Vocabulary>,
    name: String,
}

impl ParallelCorpus {
    pub fn new(
        pairs: Vec<(Sentence, Sentence)>,
        vocab: Arc<Vocabulary>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let v = vocab.len() as TokenId;
        for (i, (s, t)) in pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(Error::Argument(format!("pair {i} has an empty side")));
            }
            if let Some(&bad) = s.iter().chain(t.iter()).find(|&&id| id >= v || id == PAD) {
                return Err(Error::InvalidToken {
                    token: format!("#{bad}"),
                    reason: format!("pair {i}: not a sentence token of this vocabulary"),
                });
            }
        }
        Ok(ParallelCorpus {
            pairs,
            vocab,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn pairs(&self) -> &[(Sentence, Sentence)] {
        &self.pairs
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }

    pub fn mean_source_len(&self) -> f64 {
        self.sources().map(|s| s.len()).sum::<usize>() as f64 / self.len().max(1) as f64
    }

    pub fn mean_target_len(&self) -> f64 {
        self.targets().map(|s| s.len()).sum::<usize>() as f64 / self.len().max(1) as f64
    }

    pub fn max_source_len(&self) -> usize {
        self.sources().map(|s| s.len()).max().unwrap_or(0)
    }

    pub fn max_target_len(&self) -> usize {
        self.targets().map(|s| s.len()).max().unwrap_or(0)
    }

    /// Same sources, new targets (index-aligned).
    pub fn with_targets(&self, targets: Vec<Sentence>, name: impl Into<String>) -> Result<Self> {
        if targets.len() != self.len() {
            return Err(Error::Argument(format!(
                "{} targets for {} sources",
                targets.len(),
                self.len()
            )));
        }
        let pairs = self.sources().cloned().zip(targets).collect();
        Self::new(pairs, self.vocab.clone(), name)
    }

    pub fn map_targets(
        &self,
        f: impl Fn(&Sentence) -> Sentence,
        name: impl Into<String>,
    ) -> Result<Self> {
        self.with_targets(self.targets().map(f).collect(), name)
    }

    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let (a, b) = self.pairs.split_at(n.min(self.len()));
        Ok((
            Self::new(
                a.to_vec(),
                self.vocab.clone(),
                format!("{}[..{n}]", self.name),
            )?,
            Self::new(
                b.to_vec(),
                self.vocab.clone(),
                format!("{}[{n}..]", self.name),
            )?,
        ))
    }

    /// True when some source occurs with two different targets.
    pub fn has_instance_multimodality(&self) -> bool {
        let mut seen: HashMap<&Sentence, &Sentence> = HashMap::with_capacity(self.len());
        self.pairs
            .iter()
            .any(|(s, t)| *seen.entry(s).or_insert(t) != t)
    }

    pub fn sources_distinct(&self) -> bool {
        let mut seen = std::collections::HashSet::with_capacity(self.len());
        self.sources().all(|s| seen.insert(s))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, t) in &self.pairs {
            let _ = writeln!(out, "{}\t{}", self.vocab.decode(s), self.vocab.decode(t));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: Arc<Vocabulary>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Self::parse(&text, vocab, &path.display().to_string(), name)
    }

    /// Parses TSV text. Columns beyond the second are ignored.
    pub fn parse(
        text: &str,
        vocab: Arc<Vocabulary>,
        origin: &str,
        name: impl Into<String>,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: origin.to_owned(),
                line: i + 1,
                message,
            };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(src), Some(tgt)) = (cols.next(), cols.next()) else {
                return Err(err("expected `source<TAB>target`".into()));
            };
            let src = vocab.encode(src).map_err(|m| err(format!("source: {m}")))?;
            let tgt = vocab.encode(tgt).map_err(|m| err(format!("target: {m}")))?;
            if src.is_empty() || tgt.is_empty() {
                return Err(err("empty source or target".into()));
            }
            pairs.push((src, tgt));
        }
        Self::new(pairs, vocab, name)
    }
}

/// Reads a file of source sentences, one per line.
pub fn load_sources(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        // accept corpus files too: only the first column is the source
        let src = line.split('\t').next().unwrap_or("");
        out.push(vocab.encode(src).map_err(|message| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}
