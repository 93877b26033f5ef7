//! BIO-tagged corpora: parsing, validation, statistics and entity spans.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One parsed BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> BioTag<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == "O" {
            return Some(BioTag::Outside);
        }
        let (prefix, kind) = tag.split_once('-')?;
        if kind.is_empty() || kind.chars().any(char::is_whitespace) {
            return None;
        }
        match prefix {
            "B" => Some(BioTag::Begin(kind)),
            "I" => Some(BioTag::Inside(kind)),
            _ => None,
        }
    }

    pub fn kind(&self) -> Option<&'a str> {
        match *self {
            BioTag::Outside => None,
            BioTag::Begin(k) | BioTag::Inside(k) => Some(k),
        }
    }
}

/// Whether `next` may follow `prev` (None = sentence start) under strict IOB2.
pub fn transition_allowed(prev: Option<BioTag<'_>>, next: BioTag<'_>) -> bool {
    match next {
        BioTag::Inside(kind) => matches!(
            prev,
            Some(BioTag::Begin(k)) | Some(BioTag::Inside(k)) if k == kind
        ),
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub domain_id: usize,
}

impl Sentence {
    /// Builds a sentence after checking lengths and strict IOB2.
    pub fn new(tokens: Vec<String>, tags: Vec<String>, domain_id: usize) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != tags.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens vs {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        validate_tags(&tags)?;
        Ok(Sentence {
            tokens,
            tags,
            domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_entity(&self) -> bool {
        self.tags.iter().any(|t| t != "O")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "devel" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub domain_id: usize,
    pub entity_types: BTreeSet<String>,
    pub sentences: Vec<Sentence>,
    pub split: Split,
}

impl Corpus {
    pub fn new(name: impl Into<String>, domain_id: usize, split: Split, sentences: Vec<Sentence>) -> Self {
        let mut sentences = sentences;
        for s in &mut sentences {
            s.domain_id = domain_id;
        }
        let entity_types = observed_types(&sentences);
        Corpus {
            name: name.into(),
            domain_id,
            entity_types,
            sentences,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Maps every entity whose type is not in `keep` to `O`.
    pub fn retain_types(&mut self, keep: &BTreeSet<String>) {
        for s in &mut self.sentences {
            for t in &mut s.tags {
                if let Some(kind) = BioTag::parse(t).and_then(|b| b.kind()) {
                    if !keep.contains(kind) {
                        *t = "O".to_string();
                    }
                }
            }
        }
        self.entity_types = observed_types(&self.sentences);
    }
}

fn observed_types(sentences: &[Sentence]) -> BTreeSet<String> {
    sentences
        .iter()
        .flat_map(|s| s.tags.iter())
        .filter_map(|t| BioTag::parse(t).and_then(|b| b.kind()).map(str::to_string))
        .collect()
}

fn validate_tags(tags: &[String]) -> Result<()> {
    let mut prev = None;
    for (i, t) in tags.iter().enumerate() {
        let tag = BioTag::parse(t).ok_or_else(|| Error::InvalidTagSequence {
            position: i,
            tag: t.clone(),
        })?;
        if !transition_allowed(prev, tag) {
            return Err(Error::InvalidTagSequence {
                position: i,
                tag: t.clone(),
            });
        }
        prev = Some(tag);
    }
    Ok(())
}

/// Parses two-column CoNLL text. Sentences are separated by blank lines.
///
/// With `repair`, an `I-X` that does not continue an `X` entity is rewritten
/// to `B-X`; otherwise it is rejected.
pub fn parse_conll(text: &str, domain_id: usize, repair: bool) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            sentences.push(Sentence {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
                domain_id,
            });
        }
    };

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        if cols.len() != 2 {
            return Err(Error::MalformedLine {
                line: lineno,
                found: cols.len(),
            });
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        let raw = cols[1];
        let tag = BioTag::parse(raw).ok_or_else(|| Error::InvalidTag {
            line: lineno,
            tag: raw.to_string(),
        })?;
        let prev = tags.last().and_then(|t| BioTag::parse(t));
        let fixed = if transition_allowed(prev, tag) {
            raw.to_string()
        } else if repair {
            format!("B-{}", tag.kind().unwrap_or_default())
        } else {
            return Err(Error::DanglingInside {
                line: lineno,
                tag: raw.to_string(),
            });
        };
        tokens.push(cols[0].to_string());
        tags.push(fixed);
    }
    flush(&mut tokens, &mut tags);

    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus::new(String::new(), domain_id, Split::Train, sentences))
}

/// Writes sentences back as `token tag` lines with a blank line after each sentence.
pub fn write_conll(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_sentences: usize,
    pub num_unique_tokens: usize,
    pub fraction_with_entities: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let unique: HashSet<&str> = corpus
        .sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(String::as_str))
        .collect();
    let with_entities = corpus.sentences.iter().filter(|s| s.has_entity()).count();
    Ok(CorpusStats {
        num_sentences: corpus.sentences.len(),
        num_unique_tokens: unique.len(),
        fraction_with_entities: with_entities as f64 / corpus.sentences.len() as f64,
    })
}

/// A typed entity mention covering tokens `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

impl Span {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        Span {
            start,
            end,
            kind: kind.into(),
        }
    }
}

/// Maximal B-then-I runs of a strict IOB2 sequence, sorted by start.
pub fn extract_entities<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let mut prev = None;
    for (i, t) in tags.iter().enumerate() {
        let raw = t.as_ref();
        let tag = BioTag::parse(raw)
            .filter(|tag| transition_allowed(prev, *tag))
            .ok_or_else(|| Error::InvalidTagSequence {
                position: i,
                tag: raw.to_string(),
            })?;
        match tag {
            BioTag::Inside(_) => {}
            BioTag::Outside => {
                if let Some((s, k)) = open.take() {
                    spans.push(Span::new(s, i, k));
                }
            }
            BioTag::Begin(kind) => {
                if let Some((s, k)) = open.take() {
                    spans.push(Span::new(s, i, k));
                }
                open = Some((i, kind));
            }
        }
        prev = Some(tag);
    }
    if let Some((s, k)) = open {
        spans.push(Span::new(s, tags.len(), k));
    }
    Ok(spans)
}

/// Inverse of [`extract_entities`].
pub fn spans_to_tags(len: usize, spans: &[Span]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for sp in spans {
        for (j, t) in tags[sp.start..sp.end].iter_mut().enumerate() {
            *t = if j == 0 {
                format!("B-{}", sp.kind)
            } else {
                format!("I-{}", sp.kind)
            };
        }
    }
    tags
}
