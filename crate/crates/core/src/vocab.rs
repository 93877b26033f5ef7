//! Token, character and tag index maps.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{transition_allowed, BioTag, Sentence};
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Token vocabulary. Index 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    /// Sorted, deduplicated vocabulary over the given tokens.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != UNK).collect();
        let items: Vec<String> = std::iter::once(UNK.to_string())
            .chain(set.into_iter().map(str::to_string))
            .collect();
        Vocab::from(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Exact match, then lowercase, then the unknown index.
    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(token)
            .or_else(|| self.index.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(0)
    }
}

/// Character vocabulary (index 0 unknown).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    items: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(items: Vec<char>) -> Self {
        let index = items.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        CharVocab { items, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.items
    }
}

impl CharVocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = tokens.into_iter().flat_map(str::chars).collect();
        let items: Vec<char> = std::iter::once('\u{0}')
            .chain(set.into_iter().filter(|c| *c != '\u{0}'))
            .collect();
        CharVocab::from(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(0))
            .collect()
    }
}

/// Ordered tag set: `O` first, then `B-`/`I-` pairs per entity type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagVocab {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for TagVocab {
    type Error = Error;

    fn try_from(tags: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tags.iter().enumerate() {
            if BioTag::parse(t).is_none() {
                return Err(Error::InvalidTag {
                    line: 0,
                    tag: t.clone(),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate tag `{t}`")));
            }
        }
        if !index.contains_key("O") {
            return Err(Error::Config("tag vocabulary must contain `O`".into()));
        }
        Ok(TagVocab { tags, index })
    }
}

impl From<TagVocab> for Vec<String> {
    fn from(v: TagVocab) -> Self {
        v.tags
    }
}

impl TagVocab {
    pub fn from_types<S: AsRef<str>>(types: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = types.into_iter().map(|s| s.as_ref().to_string()).collect();
        let mut tags = vec!["O".to_string()];
        for t in set {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        TagVocab::try_from(tags).expect("well-formed tag set")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn tag(&self, i: usize) -> &str {
        &self.tags[i]
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn ids<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.id(t.as_ref()).ok_or_else(|| Error::InvalidTag {
                    line: 0,
                    tag: t.as_ref().to_string(),
                })
            })
            .collect()
    }

    /// `allowed[i][j]`: may tag `j` follow tag `i` under IOB2.
    pub fn allowed_transitions(&self) -> Vec<Vec<bool>> {
        let parsed: Vec<BioTag<'_>> = self.tags.iter().map(|t| BioTag::parse(t).unwrap()).collect();
        parsed
            .iter()
            .map(|p| parsed.iter().map(|n| transition_allowed(Some(*p), *n)).collect())
            .collect()
    }

    /// May tag `j` open a sentence.
    pub fn allowed_starts(&self) -> Vec<bool> {
        self.tags
            .iter()
            .map(|t| transition_allowed(None, BioTag::parse(t).unwrap()))
            .collect()
    }
}

/// A sentence mapped to integer ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSentence {
    pub token_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub tag_ids: Vec<usize>,
    pub domain_id: usize,
    pub has_entity: bool,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Everything needed to turn raw sentences into model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: Vocab,
    pub chars: CharVocab,
    pub tags: TagVocab,
}

impl Vocabularies {
    pub fn encode(&self, s: &Sentence) -> Result<EncodedSentence> {
        Ok(EncodedSentence {
            token_ids: s.tokens.iter().map(|t| self.tokens.id(t)).collect(),
            char_ids: s.tokens.iter().map(|t| self.chars.ids(t)).collect(),
            tag_ids: self.tags.ids(&s.tags)?,
            domain_id: s.domain_id,
            has_entity: s.has_entity(),
        })
    }

    pub fn encode_all(&self, sentences: &[Sentence]) -> Result<Vec<EncodedSentence>> {
        sentences.iter().map(|s| self.encode(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_vocab_order_and_masks() {
        let v = TagVocab::from_types(["Gene", "Drug"]);
        assert_eq!(v.tags(), ["O", "B-Drug", "I-Drug", "B-Gene", "I-Gene"]);
        let allowed = v.allowed_transitions();
        assert!(allowed[1][2]);
        assert!(!allowed[0][2]);
        assert!(!allowed[3][2]);
        assert!(allowed[4][4]);
        assert_eq!(v.allowed_starts(), vec![true, true, false, true, false]);
    }

    #[test]
    fn vocab_unknown_and_case_fallback() {
        let v = Vocab::build(["the", "Gene", "the"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("nope"), 0);
        assert_eq!(v.id("the"), v.id("THE"));
        assert_ne!(v.id("Gene"), 0);
    }

    #[test]
    fn serde_roundtrip_preserves_order() {
        let v = TagVocab::from_types(["Z", "A"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: TagVocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<TagVocab>("[\"B-X\"]").is_err());
    }
}
