//! Statement corpora: CSV ingest, transcript cleaning, splits, label
//! balance and synthetic data.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground truth of a statement. Serialized as `1` (deceptive) / `0` (truthful).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Truthful,
    Deceptive,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Label::Truthful),
            1 => Some(Label::Deceptive),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Truthful => 0,
            Label::Deceptive => 1,
        }
    }

    pub fn is_deceptive(self) -> bool {
        self == Label::Deceptive
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Truthful => "truthful",
            Label::Deceptive => "deceptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub id: u64,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub statements: Vec<Statement>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(statements: Vec<Statement>, provenance: impl Into<String>) -> Result<Self> {
        let corpus = Corpus {
            statements,
            provenance: provenance.into(),
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks that the corpus is non-empty, ids are unique and texts non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.statements.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::with_capacity(self.statements.len());
        for s in &self.statements {
            if !seen.insert(s.id) {
                return Err(Error::DuplicateId(s.id));
            }
            if s.text.trim().is_empty() {
                return Err(Error::invalid(format!("statement {} has empty text", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.statements.iter().map(|s| s.label).collect()
    }

    /// Writes the corpus in the same `ID,Text,GT` layout `parse_corpus` reads.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_corpus(self, writer, &ColumnLayout::default())
    }
}

/// Header names of the id, text and label columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnLayout {
    pub id: String,
    pub text: String,
    pub label: String,
}

impl Default for ColumnLayout {
    fn default() -> Self {
        ColumnLayout {
            id: "ID".into(),
            text: "Text".into(),
            label: "GT".into(),
        }
    }
}

/// Reads a comma-separated table with a header row naming the layout's
/// columns. An input with only a header yields an empty corpus, which
/// [`Corpus::validate`] rejects.
pub fn parse_corpus<R: Read>(source: R, layout: &ColumnLayout) -> Result<Corpus> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MalformedRow {
                line: 1,
                message: format!("header has no {name:?} column"),
            })
    };
    let (id_col, text_col, label_col) = (column(&layout.id)?, column(&layout.text)?, column(&layout.label)?);

    let mut statements = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or_default();
        let id: u64 = field(id_col).trim().parse().map_err(|_| Error::MalformedRow {
            line,
            message: format!("id {:?} is not a non-negative integer", field(id_col)),
        })?;
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
        let raw_label = field(label_col).trim();
        let label = raw_label
            .parse::<u8>()
            .ok()
            .and_then(Label::from_bit)
            .ok_or_else(|| Error::InvalidLabel {
                line,
                value: raw_label.to_string(),
            })?;
        let text = field(text_col).to_string();
        if text.trim().is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: "empty text".into(),
            });
        }
        statements.push(Statement { id, text, label });
    }
    Ok(Corpus {
        statements,
        provenance: "csv".into(),
    })
}

pub fn write_corpus<W: Write>(corpus: &Corpus, writer: W, layout: &ColumnLayout) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([&layout.id, &layout.text, &layout.label])
        .map_err(csv_error)?;
    for s in &corpus.statements {
        w.write_record([s.id.to_string(), s.text.clone(), s.label.bit().to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedRow {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// What `clean_transcript` strips from raw interview transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningRules {
    pub filler_lexicon: Vec<String>,
    pub annotation_delimiters: Vec<(char, char)>,
    pub interviewer_prefixes: Vec<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            filler_lexicon: ["uhm", "um", "err", "erm", "uh"].map(String::from).to_vec(),
            annotation_delimiters: vec![('(', ')'), ('[', ']')],
            interviewer_prefixes: ["INTERVIEWER:", "Interviewer:", "Q:"].map(String::from).to_vec(),
        }
    }
}

impl CleaningRules {
    pub fn validate(&self) -> Result<()> {
        if self.filler_lexicon.is_empty() {
            return Err(Error::invalid("filler lexicon is empty"));
        }
        if self.filler_lexicon.iter().any(|f| f.is_empty() || f.chars().any(char::is_whitespace)) {
            return Err(Error::invalid("filler entries must be single non-empty words"));
        }
        for &(open, close) in &self.annotation_delimiters {
            if open == close || open.is_whitespace() || close.is_whitespace() {
                return Err(Error::invalid(format!("malformed delimiter pair {open:?}{close:?}")));
            }
        }
        Ok(())
    }
}

/// Strips annotation spans, fillers and interviewer lines, then collapses
/// whitespace.
pub fn clean_transcript(raw: &str, rules: &CleaningRules) -> Result<String> {
    rules.validate()?;
    let without_spans = strip_annotations(raw, &rules.annotation_delimiters);
    let fillers: HashSet<String> = rules.filler_lexicon.iter().map(|f| f.to_lowercase()).collect();
    let mut kept = Vec::new();
    for line in without_spans.lines() {
        let words: Vec<&str> = line
            .split_whitespace()
            .filter(|w| {
                let core = w.trim_matches(|c: char| !c.is_alphanumeric());
                !fillers.contains(&core.to_lowercase())
            })
            .collect();
        let line = words.join(" ");
        let is_interviewer = rules
            .interviewer_prefixes
            .iter()
            .any(|p| !p.is_empty() && line.to_lowercase().starts_with(&p.to_lowercase()));
        if !is_interviewer && !line.is_empty() {
            kept.push(line);
        }
    }
    let cleaned = kept.join(" ");
    if cleaned.is_empty() {
        return Err(Error::DegenerateInput);
    }
    Ok(cleaned)
}

/// Removes every span enclosed by a matched delimiter pair, delimiters
/// included. A closer matches the nearest open opener; unmatched delimiters
/// are left in place.
fn strip_annotations(text: &str, delimiters: &[(char, char)]) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut drop = vec![false; chars.len()];
    for &(open, close) in delimiters {
        let mut stack = Vec::new();
        for (i, &c) in chars.iter().enumerate() {
            if drop[i] {
                continue;
            }
            if c == open {
                stack.push(i);
            } else if c == close {
                if let Some(start) = stack.pop() {
                    drop[start..=i].iter_mut().for_each(|d| *d = true);
                }
            }
        }
    }
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if drop[i] {
            // keep words on either side of a removed span apart
            if i == 0 || !drop[i - 1] {
                out.push(' ');
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Seeded shuffle then split; the training part gets
/// `floor(train_fraction * len)` statements.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    corpus.validate()?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * corpus.len() as f64).floor() as usize;
    let pick = |idx: &[usize], suffix: &str| Corpus {
        statements: idx.iter().map(|&i| corpus.statements[i].clone()).collect(),
        provenance: format!("{} [{suffix} split, seed {seed}]", corpus.provenance),
    };
    Ok((pick(&order[..n_train], "train"), pick(&order[n_train..], "test")))
}

/// `1 - Σ p_c²` over the class proportions; 0.5 for a perfectly balanced
/// binary set.
pub fn gini_index(labels: &[Label]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("gini index of an empty label list"));
    }
    let n = labels.len() as f64;
    let positive = labels.iter().filter(|l| l.is_deceptive()).count() as f64 / n;
    Ok(1.0 - positive * positive - (1.0 - positive) * (1.0 - positive))
}

/// Vocabulary for [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthVocab {
    pub truthful_signals: Vec<String>,
    pub deceptive_signals: Vec<String>,
    pub noise: Vec<String>,
}

impl Default for SynthVocab {
    fn default() -> Self {
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        SynthVocab {
            truthful_signals: words("remember noticed afterwards receipt neighbour"),
            deceptive_signals: words("honestly swear definitely alibi never"),
            noise: words(
                "i we it was the a to and then on in at that day evening morning went \
                 home car friend work shop station road later after before some about \
                 there my his her they he she had got said around maybe just quite door \
                 phone town house bus lunch dinner week time left back out",
            ),
        }
    }
}

/// Generates `n` statements, half per class (the odd one out is deceptive),
/// each made of seeded random noise words with three or four signal words of
/// its class planted at random positions.
pub fn synth_corpus(n: usize, vocab: &SynthVocab, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if vocab.truthful_signals.is_empty() || vocab.deceptive_signals.is_empty() || vocab.noise.is_empty() {
        return Err(Error::invalid("signal and noise vocabularies must be non-empty"));
    }
    let truthful: HashSet<&String> = vocab.truthful_signals.iter().collect();
    if let Some(w) = vocab.deceptive_signals.iter().find(|w| truthful.contains(w)) {
        return Err(Error::invalid(format!("signal word {w:?} appears in both classes")));
    }
    let signals: HashSet<&String> = truthful.iter().copied().chain(&vocab.deceptive_signals).collect();
    let noise: Vec<&String> = vocab.noise.iter().filter(|w| !signals.contains(w)).collect();
    if noise.is_empty() {
        return Err(Error::invalid("noise vocabulary consists only of signal words"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n / 2 { Label::Truthful } else { Label::Deceptive })
        .collect();
    labels.shuffle(&mut rng);

    let statements = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let class_signals = match label {
                Label::Truthful => &vocab.truthful_signals,
                Label::Deceptive => &vocab.deceptive_signals,
            };
            let len = rng.random_range(3..=8);
            let mut words: Vec<String> = (0..len)
                .map(|_| (*noise.choose(&mut rng).unwrap()).clone())
                .collect();
            let planted = rng.random_range(3..=4);
            for _ in 0..planted {
                let at = rng.random_range(0..=words.len());
                words.insert(at, class_signals.choose(&mut rng).unwrap().clone());
            }
            let mut text = words.join(" ");
            if let Some(first) = text.get(..1) {
                text = first.to_uppercase() + &text[1..];
            }
            text.push('.');
            Statement {
                id: i as u64 + 1,
                text,
                label,
            }
        })
        .collect();
    Corpus::new(statements, format!("synthetic corpus (n={n}, seed={seed})"))
}
