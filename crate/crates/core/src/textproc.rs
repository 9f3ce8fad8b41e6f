//! Tokenization and vocabulary.
//!
//! Text is lowercased, split on whitespace, and each whitespace-delimited
//! chunk is further split into maximal runs of alphanumeric and
//! non-alphanumeric characters. Ids 0 and 1 are reserved for padding and
//! unknown tokens; the rest are assigned by descending frequency with
//! lexicographic tie-breaking so that a vocabulary depends only on the
//! multiset of tokens in its corpus.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 35;

/// Splits text into lowercase surface tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lowered.split_whitespace() {
        let mut current = String::new();
        let mut current_alnum = None;
        for c in chunk.chars() {
            let alnum = c.is_alphanumeric();
            if current_alnum.is_some_and(|a| a != alnum) {
                tokens.push(std::mem::take(&mut current));
            }
            current.push(c);
            current_alnum = Some(alnum);
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Token ↔ id mapping with reserved `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("empty vocabulary is valid")
    }
}

impl Vocabulary {
    /// Builds a vocabulary from the non-reserved tokens, in id order starting at 2.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Format(format!("empty token at id {id}")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Format(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn learned_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// Writes one token per line; line `i` (1-based) holds id `i - 1`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = Vec::new();
        for line in reader.lines() {
            lines.push(line?);
        }
        Self::from_lines(lines)
    }

    fn from_lines(lines: Vec<String>) -> Result<Self> {
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(Error::Format(
                "vocabulary file must start with `<pad>` and `<unk>`".into(),
            ));
        }
        Self::from_tokens(lines.into_iter().skip(2))
    }
}

/// Counts tokens over the corpus and keeps those seen at least `min_count` times.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Token ids for one text, truncated to a maximum length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub original_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps text to ids, keeping the first `max_len` tokens.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let tokens = tokenize(text);
    let original_length = tokens.len();
    let ids = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect();
    Ok(TokenSequence { ids, original_length })
}
