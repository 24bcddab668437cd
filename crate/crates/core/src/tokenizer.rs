//! Word-level tokenizer with fixed-length encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::corpus::{Corpus, Label};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// One token of the input: the lowercased form used for lookup and the
/// original surface form shown to users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub normalized: String,
    pub surface: String,
}

/// Splits on whitespace; every punctuation character becomes its own token.
/// Apostrophes inside a word stay attached ("don't").
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<Token>| {
        if !word.is_empty() {
            tokens.push(Token {
                normalized: word.to_lowercase(),
                surface: std::mem::take(word),
            });
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() || (c == '\'' && !word.is_empty()) {
            word.push(c);
        } else {
            flush(&mut word, &mut tokens);
            if !c.is_whitespace() {
                tokens.push(Token {
                    normalized: c.to_lowercase().collect(),
                    surface: c.to_string(),
                });
            }
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from reserved tokens followed by `tokens` in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(tokens.into_iter().map(Into::into));
        Self::from_id_list(id_to_token)
    }

    fn from_id_list(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < 2 || id_to_token[PAD_ID] != PAD_TOKEN || id_to_token[UNK_ID] != UNK_TOKEN {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if tok.is_empty() || tok.contains(['\n', '\r']) {
                return Err(Error::invalid(format!("invalid vocabulary token at id {id}")));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Tokens after the two reserved ones, in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let lines = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_id_list(lines)
    }
}

/// Counts lowercased tokens, drops those below `min_freq`, and keeps the
/// `max_size - 2` most frequent (ties broken lexicographically).
pub fn build_vocab(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(Error::invalid(format!("vocabulary size {max_size} leaves no room for tokens")));
    }
    corpus.validate()?;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in &corpus.statements {
        for t in tokenize(&s.text) {
            *counts.entry(t.normalized).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - 2);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// A fixed-length, padded token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    /// `true` for real tokens; always a run of `true` followed by `false`.
    pub mask: Vec<bool>,
    /// Surface form of every real token.
    pub words: Vec<String>,
    pub label: Option<Label>,
}

impl EncodedExample {
    pub fn real_len(&self) -> usize {
        self.words.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Truncates to the first `max_len` tokens and right-pads with [`PAD_ID`].
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<EncodedExample> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::DegenerateInput);
    }
    let real = tokens.len().min(max_len);
    let mut ids = Vec::with_capacity(max_len);
    let mut words = Vec::with_capacity(real);
    for t in tokens.into_iter().take(real) {
        ids.push(vocab.id(&t.normalized));
        words.push(t.surface);
    }
    ids.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(EncodedExample {
        ids,
        mask,
        words,
        label: None,
    })
}

/// Token count of the longest statement, capped at `max_len`. Padding a
/// corpus to this length gives the same outputs as padding to `max_len`.
pub fn fit_length(corpus: &Corpus, max_len: usize) -> usize {
    corpus
        .statements
        .iter()
        .map(|s| tokenize(&s.text).len())
        .max()
        .unwrap_or(1)
        .clamp(1, max_len.max(1))
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedExample>> {
    corpus
        .statements
        .iter()
        .map(|s| {
            let mut e = encode(&s.text, vocab, max_len)?;
            e.label = Some(s.label);
            Ok(e)
        })
        .collect()
}
