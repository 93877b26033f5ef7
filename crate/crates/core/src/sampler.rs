//! Episodic task generation.
//!
//! A task is a support set and a disjoint query set of `k` sentences each,
//! drawn without replacement from one source domain. In `NeConstrained` mode
//! every support sentence carries at least one entity; the query set is
//! always drawn unconstrained from what remains.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::vocab::EncodedSentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Uniform,
    NeConstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k: usize,
    pub mode: SamplingMode,
    /// Per source domain; uniform when absent.
    pub domain_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: 5,
            mode: SamplingMode::Uniform,
            domain_weights: None,
            seed: 0,
        }
    }
}

/// Sentences of one source domain (train splits of its corpora concatenated).
#[derive(Debug, Clone)]
pub struct DomainPool {
    pub name: String,
    pub sentences: Vec<EncodedSentence>,
    entity_bearing: Vec<usize>,
}

impl DomainPool {
    pub fn new(name: impl Into<String>, sentences: Vec<EncodedSentence>) -> Self {
        let entity_bearing = sentences
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_entity)
            .map(|(i, _)| i)
            .collect();
        DomainPool {
            name: name.into(),
            sentences,
            entity_bearing,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_entity_bearing(&self) -> usize {
        self.entity_bearing.len()
    }

    fn check(&self, k: usize, mode: SamplingMode) -> Result<()> {
        if self.len() < 2 * k {
            return Err(Error::InsufficientSentences {
                domain: self.name.clone(),
                available: self.len(),
                needed: 2 * k,
            });
        }
        if mode == SamplingMode::NeConstrained && self.entity_bearing.len() < k {
            return Err(Error::NoEntitySentences {
                domain: self.name.clone(),
                available: self.entity_bearing.len(),
                needed: k,
            });
        }
        Ok(())
    }
}

/// All source domains; a domain's position is its classifier label.
#[derive(Debug, Clone, Default)]
pub struct SourcePool {
    pub domains: Vec<DomainPool>,
}

impl SourcePool {
    pub fn new(domains: Vec<DomainPool>) -> Self {
        SourcePool { domains }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Checks every domain against the sampler preconditions.
    pub fn validate(&self, cfg: &SamplerConfig) -> Result<()> {
        if cfg.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("no source domains".into()));
        }
        if let Some(w) = &cfg.domain_weights {
            if w.len() != self.domains.len()
                || w.iter().any(|x| !(*x >= 0.0 && x.is_finite()))
                || w.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config(format!(
                    "domain_weights must be {} nonnegative numbers with a positive sum",
                    self.domains.len()
                )));
            }
        }
        self.domains.iter().try_for_each(|d| d.check(cfg.k, cfg.mode))
    }

    pub fn sentences<'a>(&'a self, task: &Task, which: &[usize]) -> Vec<&'a EncodedSentence> {
        let d = &self.domains[task.domain];
        which.iter().map(|&i| &d.sentences[i]).collect()
    }

    pub fn support<'a>(&'a self, task: &Task) -> Vec<&'a EncodedSentence> {
        self.sentences(task, &task.support)
    }

    pub fn query<'a>(&'a self, task: &Task) -> Vec<&'a EncodedSentence> {
        self.sentences(task, &task.query)
    }
}

/// Sentence indices refer to the chosen domain's pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub domain: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub mode: SamplingMode,
}

pub fn sample_task<R: Rng + ?Sized>(pool: &SourcePool, cfg: &SamplerConfig, rng: &mut R) -> Result<Task> {
    if pool.domains.is_empty() {
        return Err(Error::Config("no source domains".into()));
    }
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let domain = match &cfg.domain_weights {
        Some(w) => WeightedIndex::new(w)
            .map_err(|e| Error::Config(format!("domain_weights: {e}")))?
            .sample(rng),
        None => rng.gen_range(0..pool.domains.len()),
    };
    let dp = &pool.domains[domain];
    dp.check(cfg.k, cfg.mode)?;
    let k = cfg.k;
    let (support, query) = match cfg.mode {
        SamplingMode::Uniform => {
            let picks = index::sample(rng, dp.len(), 2 * k).into_vec();
            (picks[..k].to_vec(), picks[k..].to_vec())
        }
        SamplingMode::NeConstrained => {
            let support: Vec<usize> = index::sample(rng, dp.entity_bearing.len(), k)
                .into_iter()
                .map(|i| dp.entity_bearing[i])
                .collect();
            let mut taken = vec![false; dp.len()];
            support.iter().for_each(|&i| taken[i] = true);
            let rest: Vec<usize> = (0..dp.len()).filter(|&i| !taken[i]).collect();
            let query = index::sample(rng, rest.len(), k).into_iter().map(|i| rest[i]).collect();
            (support, query)
        }
    };
    Ok(Task {
        domain,
        support,
        query,
        mode: cfg.mode,
    })
}

/// `m` independent tasks; task `i` draws from the stream `key.index(i)`.
pub fn sample_batch(pool: &SourcePool, cfg: &SamplerConfig, m: usize, key: RngKey) -> Result<Vec<Task>> {
    if m == 0 {
        return Err(Error::InvalidBatchSize);
    }
    (0..m)
        .map(|i| sample_task(pool, cfg, &mut key.index(i as u64).stream()))
        .collect()
}

/// Same result as [`sample_batch`], drawn on the rayon pool.
pub fn sample_batch_par(pool: &SourcePool, cfg: &SamplerConfig, m: usize, key: RngKey) -> Result<Vec<Task>> {
    if m == 0 {
        return Err(Error::InvalidBatchSize);
    }
    (0..m)
        .into_par_iter()
        .map(|i| sample_task(pool, cfg, &mut key.index(i as u64).stream()))
        .collect()
}

/// A few-shot target-domain sample T' for one protocol repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetEpisode {
    pub size: usize,
    pub repeat_index: usize,
    /// Sorted indices into the target corpus train split.
    pub indices: Vec<usize>,
}

/// Draws `size` sentences without replacement from `train`, keyed by `(seed, repeat_index)`.
pub fn make_target_episode(train: &Corpus, size: usize, repeat_index: usize, seed: u64) -> Result<TargetEpisode> {
    if size == 0 {
        return Err(Error::Config("target episode size must be at least 1".into()));
    }
    if train.len() < size {
        return Err(Error::InsufficientSentences {
            domain: train.name.clone(),
            available: train.len(),
            needed: size,
        });
    }
    let mut rng = RngKey::new(seed)
        .child("target-episode")
        .index(size as u64)
        .index(repeat_index as u64)
        .stream();
    let mut indices = index::sample(&mut rng, train.len(), size).into_vec();
    indices.sort_unstable();
    Ok(TargetEpisode {
        size,
        repeat_index,
        indices,
    })
}

/// Everything needed to replay target episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub seed: u64,
    pub corpus: String,
    pub mode: SamplingMode,
    pub k: usize,
    pub episodes: Vec<TargetEpisode>,
}
