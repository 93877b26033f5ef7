//! Domain manifest: which corpus files exist, which domain and split each
//! belongs to, and which domain is held out as the target.
//!
//! ```toml
//! target_domain = "Disease"
//! embeddings = "embeddings.txt"      # optional, relative to this file
//!
//! [[corpus]]
//! name = "NCBI"
//! path = "ncbi/train.tsv"
//! domain = "Disease"
//! split = "train"
//! keep_types = ["Disease"]           # optional; other types become O
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_conll, Corpus, Split};
use crate::embeddings::{load_embeddings, EmbeddingTable, UnkPolicy};
use crate::error::{Error, Result};
use crate::sampler::{DomainPool, SourcePool};
use crate::vocab::{CharVocab, TagVocab, Vocab, Vocabularies};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub name: String,
    pub path: PathBuf,
    pub domain: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_types: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, rename = "corpus")]
    pub corpora: Vec<CorpusEntry>,
}

/// Domain names in first-appearance order, plus the held-out target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRegistry {
    pub domains: Vec<String>,
    pub target_domain: Option<String>,
}

impl DomainRegistry {
    pub fn new(domains: Vec<String>, target_domain: Option<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = domains.iter().collect();
        if unique.len() != domains.len() {
            return Err(Error::Config("duplicate domain names".into()));
        }
        if let Some(t) = &target_domain {
            if !domains.contains(t) {
                return Err(Error::Config(format!("target domain `{t}` has no corpora")));
            }
        }
        Ok(DomainRegistry { domains, target_domain })
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    /// All domains except the target.
    pub fn source_domains(&self) -> Vec<&str> {
        self.domains
            .iter()
            .filter(|d| Some(*d) != self.target_domain.as_ref())
            .map(String::as_str)
            .collect()
    }
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn registry(&self) -> Result<DomainRegistry> {
        let mut domains: Vec<String> = Vec::new();
        for c in &self.corpora {
            if !domains.contains(&c.domain) {
                domains.push(c.domain.clone());
            }
        }
        DomainRegistry::new(domains, self.target_domain.clone())
    }
}

/// A manifest with every corpus parsed.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub registry: DomainRegistry,
    pub corpora: Vec<Corpus>,
    pub base_dir: PathBuf,
}

/// Reads the manifest at `path` and parses all listed corpora.
pub fn load_manifest(path: &Path, repair: bool) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::from_toml(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    load_corpora(manifest, base_dir, repair)
}

pub fn load_corpora(manifest: Manifest, base_dir: PathBuf, repair: bool) -> Result<LoadedManifest> {
    if manifest.corpora.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let registry = manifest.registry()?;
    let mut corpora = Vec::with_capacity(manifest.corpora.len());
    for entry in &manifest.corpora {
        let file = base_dir.join(&entry.path);
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let domain_id = registry.id(&entry.domain).expect("registry built from entries");
        let mut corpus = parse_conll(&text, domain_id, repair).map_err(|e| match e {
            Error::EmptyCorpus => Error::Config(format!("{}: corpus is empty", file.display())),
            other => Error::Config(format!("{}: {other}", file.display())),
        })?;
        corpus.name = entry.name.clone();
        corpus.split = entry.split;
        if let Some(keep) = &entry.keep_types {
            corpus.retain_types(&keep.iter().cloned().collect());
        }
        corpora.push(corpus);
    }
    Ok(LoadedManifest {
        manifest,
        registry,
        corpora,
        base_dir,
    })
}

impl LoadedManifest {
    pub fn load_embeddings(&self, dim: usize, unk_policy: UnkPolicy) -> Result<Option<EmbeddingTable>> {
        let Some(rel) = &self.manifest.embeddings else {
            return Ok(None);
        };
        let file = self.base_dir.join(rel);
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut table = load_embeddings(&text, dim)?;
        table.unk_policy = unk_policy;
        Ok(Some(table))
    }

    fn is_source(&self, c: &Corpus) -> bool {
        self.registry.target_domain.as_deref() != Some(self.registry.domains[c.domain_id].as_str())
    }

    /// Token and character vocabularies over every corpus, and the tag set of
    /// the source corpora.
    pub fn vocabularies(&self) -> Vocabularies {
        let tokens = || {
            self.corpora
                .iter()
                .flat_map(|c| c.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
        };
        let types: BTreeSet<&String> = self
            .corpora
            .iter()
            .filter(|c| self.is_source(c))
            .flat_map(|c| c.entity_types.iter())
            .collect();
        Vocabularies {
            tokens: Vocab::build(tokens()),
            chars: CharVocab::build(tokens()),
            tags: TagVocab::from_types(types),
        }
    }

    /// One pool entry per source domain (registry order), concatenating the
    /// given split of every corpus in that domain.
    pub fn source_pool(&self, vocabs: &Vocabularies, split: Split) -> Result<SourcePool> {
        let mut domains = Vec::new();
        for name in self.registry.source_domains() {
            let id = self.registry.id(name).unwrap();
            let mut sentences = Vec::new();
            for c in self.corpora.iter().filter(|c| c.domain_id == id && c.split == split) {
                sentences.extend(vocabs.encode_all(&c.sentences)?);
            }
            domains.push(DomainPool::new(name, sentences));
        }
        Ok(SourcePool::new(domains))
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.corpora.iter().any(|c| c.split == split && self.is_source(c))
    }

    /// `(name, train, test)` for every target-domain corpus with both splits.
    pub fn target_corpora(&self) -> Vec<(String, &Corpus, &Corpus)> {
        let Some(target) = self.registry.target_domain.as_deref() else {
            return Vec::new();
        };
        let id = self.registry.id(target).unwrap();
        let mut names: Vec<&str> = Vec::new();
        for c in self.corpora.iter().filter(|c| c.domain_id == id) {
            if !names.contains(&c.name.as_str()) {
                names.push(&c.name);
            }
        }
        names
            .into_iter()
            .filter_map(|n| {
                let find = |s| {
                    self.corpora
                        .iter()
                        .find(|c| c.domain_id == id && c.name == n && c.split == s)
                };
                Some((n.to_string(), find(Split::Train)?, find(Split::Test)?))
            })
            .collect()
    }
}
