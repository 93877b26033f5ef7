//! Synthetic multi-domain NER corpora for desk-scale experiments.
//!
//! Every domain has one entity type with its own lexicon of entity words and
//! a private slice of context vocabulary; the rest of the context words and
//! a small set of trigger words (which tend to precede entities) are shared
//! by all domains. Embeddings are clustered by word class, so entity words
//! of an unseen type still sit near each other and away from context words.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{write_conll, Corpus, Sentence, Split};
use crate::embeddings::write_embeddings;
use crate::error::{Error, Result};
use crate::manifest::{CorpusEntry, Manifest};
use crate::rng::{RngKey, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub name: String,
    pub entity_type: String,
    /// Probability that a sentence contains at least one entity.
    pub entity_density: f64,
}

impl SynthDomain {
    pub fn new(name: &str, entity_type: &str, entity_density: f64) -> Self {
        SynthDomain {
            name: name.into(),
            entity_type: entity_type.into(),
            entity_density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sources: Vec<SynthDomain>,
    pub target: SynthDomain,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Context words shared by all domains.
    pub shared_context: usize,
    /// Context words private to each domain.
    pub private_context: usize,
    pub entity_words: usize,
    pub triggers: usize,
    /// Probability that an entity is preceded by a trigger word.
    pub trigger_rate: f64,
    pub embedding_dim: usize,
    /// Within-cluster spread of the embedding vectors.
    pub noise: f64,
    /// Distance of the entity clusters from the context cluster; at 0 entity
    /// words are only recognisable from their context.
    pub entity_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sources: vec![
                SynthDomain::new("Gene", "Gene", 0.8),
                SynthDomain::new("Drug", "Drug", 0.5),
                SynthDomain::new("Species", "Species", 0.15),
            ],
            target: SynthDomain::new("Disease", "Disease", 0.6),
            train: 200,
            dev: 60,
            test: 100,
            min_len: 6,
            max_len: 12,
            shared_context: 60,
            private_context: 30,
            entity_words: 40,
            triggers: 6,
            trigger_rate: 0.8,
            embedding_dim: 32,
            noise: 0.3,
            entity_offset: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("synthetic suite: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sources.len() < 2 {
            return bad("need at least 2 source domains");
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return bad("sentence lengths must satisfy 3 <= min_len <= max_len");
        }
        if self.train == 0 || self.test == 0 || self.dev == 0 {
            return bad("every split needs at least one sentence");
        }
        if self.shared_context == 0 || self.private_context == 0 || self.entity_words == 0 || self.triggers == 0 {
            return bad("word lists must be non-empty");
        }
        let mut names = HashSet::new();
        for d in self.sources.iter().chain([&self.target]) {
            if !(0.0..=1.0).contains(&d.entity_density) {
                return bad("entity_density must lie in [0, 1]");
            }
            if !names.insert(d.name.as_str()) {
                return bad("domain names must be unique");
            }
        }
        Ok(())
    }

    fn domains(&self) -> impl Iterator<Item = &SynthDomain> {
        self.sources.iter().chain([&self.target])
    }
}

fn slug(s: &str) -> String {
    s.to_lowercase()
}

fn shared_word(i: usize) -> String {
    format!("w{i}")
}

fn private_word(domain: &str, i: usize) -> String {
    format!("{}ctx{i}", slug(domain))
}

fn trigger_word(i: usize) -> String {
    format!("trig{i}")
}

fn entity_word(kind: &str, i: usize) -> String {
    format!("{}{i}", slug(kind))
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub domain: SynthDomain,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

#[derive(Debug, Clone)]
pub struct SynthSuite {
    pub config: SynthConfig,
    /// Sources first, target last.
    pub corpora: Vec<SynthCorpus>,
    pub embeddings: Vec<(String, Vec<f64>)>,
}

fn context_word(cfg: &SynthConfig, domain: &SynthDomain, rng: &mut StreamRng) -> String {
    let n = cfg.shared_context + cfg.private_context;
    let j = rng.gen_range(0..n);
    if j < cfg.shared_context {
        shared_word(j)
    } else {
        private_word(&domain.name, j - cfg.shared_context)
    }
}

fn sentence(cfg: &SynthConfig, domain: &SynthDomain, domain_id: usize, rng: &mut StreamRng) -> Sentence {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let mut tokens = Vec::with_capacity(len);
    let mut tags = Vec::with_capacity(len);
    let with_entity = rng.gen_bool(domain.entity_density);
    let mentions = if with_entity {
        1 + usize::from(rng.gen_bool(0.3))
    } else {
        0
    };
    let mut starts: Vec<usize> = (0..mentions).map(|_| rng.gen_range(0..len)).collect();
    starts.sort_unstable();
    while tokens.len() < len {
        let i = tokens.len();
        if starts.first().is_some_and(|&s| s <= i) {
            starts.remove(0);
            if rng.gen_bool(cfg.trigger_rate) {
                tokens.push(trigger_word(rng.gen_range(0..cfg.triggers)));
                tags.push("O".to_string());
            }
            let width = if rng.gen_bool(0.3) { 2 } else { 1 };
            for w in 0..width {
                tokens.push(entity_word(&domain.entity_type, rng.gen_range(0..cfg.entity_words)));
                tags.push(format!("{}-{}", if w == 0 { "B" } else { "I" }, domain.entity_type));
            }
            // keep mentions separated by at least one context word
            tokens.push(context_word(cfg, domain, rng));
            tags.push("O".to_string());
        } else {
            tokens.push(context_word(cfg, domain, rng));
            tags.push("O".to_string());
        }
    }
    Sentence::new(tokens, tags, domain_id).expect("generated tags are valid IOB2")
}

/// Generates every domain's splits. No sentence occurs twice anywhere in the suite.
pub fn generate(cfg: &SynthConfig) -> Result<SynthSuite> {
    cfg.validate()?;
    let key = RngKey::new(cfg.seed).child("synth");
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut corpora = Vec::new();
    for (d, domain) in cfg.domains().enumerate() {
        let mut rng = key.child(&domain.name).stream();
        let mut draw = |n: usize| -> Result<Vec<Sentence>> {
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0;
            while out.len() < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(Error::Config(format!(
                        "cannot draw {n} distinct sentences for `{}`; enlarge the vocabulary",
                        domain.name
                    )));
                }
                let s = sentence(cfg, domain, d, &mut rng);
                if seen.insert(s.tokens.clone()) {
                    out.push(s);
                }
            }
            Ok(out)
        };
        corpora.push(SynthCorpus {
            domain: domain.clone(),
            train: draw(cfg.train)?,
            dev: draw(cfg.dev)?,
            test: draw(cfg.test)?,
        });
    }
    Ok(SynthSuite {
        embeddings: embeddings(cfg),
        corpora,
        config: cfg.clone(),
    })
}

/// One cluster per word class: shared context, each domain's private
/// context, triggers, and each entity type.
fn embeddings(cfg: &SynthConfig) -> Vec<(String, Vec<f64>)> {
    let mut rng = RngKey::new(cfg.seed).child("synth-embeddings").stream();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap();
    let dim = cfg.embedding_dim;
    let centre = |rng: &mut StreamRng| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    };
    let mut rows = Vec::new();
    let mut cluster = |rng: &mut StreamRng, words: Vec<String>, c: &[f64]| {
        for w in words {
            let v = c.iter().map(|x| x + noise.sample(rng) / (dim as f64).sqrt()).collect();
            rows.push((w, v));
        }
    };
    let context = centre(&mut rng);
    cluster(&mut rng, (0..cfg.shared_context).map(shared_word).collect(), &context);
    for d in cfg.domains() {
        cluster(
            &mut rng,
            (0..cfg.private_context).map(|i| private_word(&d.name, i)).collect(),
            &context,
        );
    }
    let trig = centre(&mut rng);
    cluster(&mut rng, (0..cfg.triggers).map(trigger_word).collect(), &trig);
    // entity types share a direction and differ by a smaller type offset
    let entity = centre(&mut rng);
    let mut kinds: Vec<&str> = cfg.domains().map(|d| d.entity_type.as_str()).collect();
    kinds.dedup();
    for kind in kinds {
        let offset = centre(&mut rng);
        let c: Vec<f64> = context
            .iter()
            .zip(entity.iter().zip(&offset))
            .map(|(c, (a, b))| c + cfg.entity_offset * (a - c + 0.5 * b))
            .collect();
        cluster(
            &mut rng,
            (0..cfg.entity_words).map(|i| entity_word(kind, i)).collect(),
            &c,
        );
    }
    rows
}

/// Paths written by [`write_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub manifest: PathBuf,
    pub config: PathBuf,
    pub embeddings: PathBuf,
}

/// A run configuration sized for the synthetic suite.
pub fn desk_config(suite: &SynthConfig) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = suite.seed;
    c.model.embedding_dim = suite.embedding_dim;
    c.model.hidden_size = 32;
    c.train.base_lr = 0.1;
    c.train.max_outer_iters = 300;
    c.train.patience = 300;
    c.train.eval_every = 10;
    c.adapt.base_lr = 0.1;
    c
}

/// Writes CoNLL files, `embeddings.txt`, `manifest.toml` and `config.toml` under `dir`.
pub fn write_suite(suite: &SynthSuite, dir: &Path) -> Result<SynthFiles> {
    let write = |rel: &Path, text: &str| -> Result<PathBuf> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let mut manifest = Manifest {
        target_domain: Some(suite.config.target.name.clone()),
        embeddings: Some("embeddings.txt".into()),
        corpora: Vec::new(),
    };
    for c in &suite.corpora {
        for (split, sentences) in [(Split::Train, &c.train), (Split::Dev, &c.dev), (Split::Test, &c.test)] {
            let rel = PathBuf::from(slug(&c.domain.name)).join(format!("{split}.tsv"));
            write(&rel, &write_conll(sentences))?;
            manifest.corpora.push(CorpusEntry {
                name: slug(&c.domain.name),
                path: rel,
                domain: c.domain.name.clone(),
                split,
                entity_type: Some(c.domain.entity_type.clone()),
                keep_types: None,
            });
        }
    }
    let embeddings = write(
        Path::new("embeddings.txt"),
        &write_embeddings(suite.embeddings.iter().map(|(w, v)| (w.as_str(), v.as_slice()))),
    )?;
    let mut header = String::new();
    writeln!(header, "# synthetic suite, seed {}", suite.config.seed).unwrap();
    let manifest_path = write(Path::new("manifest.toml"), &(header.clone() + &manifest.to_toml()))?;
    let config = write(
        Path::new("config.toml"),
        &(header + &desk_config(&suite.config).to_toml()),
    )?;
    Ok(SynthFiles {
        manifest: manifest_path,
        config,
        embeddings,
    })
}

impl SynthSuite {
    /// The generated splits of domain `index` as corpora.
    pub fn corpus(&self, index: usize, split: Split) -> Corpus {
        let c = &self.corpora[index];
        let sentences = match split {
            Split::Train => &c.train,
            Split::Dev => &c.dev,
            Split::Test => &c.test,
        };
        Corpus::new(slug(&c.domain.name), index, split, sentences.clone())
    }
}
