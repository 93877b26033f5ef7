//! Few-shot adaptation to an unseen target domain and entity-level scoring.
//!
//! Only the encoder is carried over: the target gets a freshly initialised
//! CRF over its own tag set, the domain head is dropped, and both are tuned
//! on the handful of target sentences T'.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_entities, Corpus, Sentence, Span};
use crate::crf::{CrfParams, TransitionMask};
use crate::error::{Error, Result};
use crate::model::{predict, set_loss, ModelParams, Objective};
use crate::optim::{clip_global_norm, linear_lr, Sgd, SgdConfig};
use crate::params::ParamGroup;
use crate::rng::RngKey;
use crate::sampler::make_target_episode;
use crate::trainer::scaled_lr;
use crate::vocab::{EncodedSentence, TagVocab, Vocabularies};

/// Which parameters travel from meta-training to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharePolicy {
    #[default]
    EncoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    /// Target episode sizes |T'|.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub base_lr: f64,
    pub base_batch: usize,
    /// Overrides `scaled_lr(base_lr, |T'|, base_batch)`.
    pub adapt_lr: Option<f64>,
    /// Full-batch passes over T'.
    pub adapt_steps: usize,
    /// Stop once the training nll falls below this.
    pub early_stop_nll: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub share_policy: SharePolicy,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            sizes: vec![5, 10, 20, 50],
            repeats: 20,
            base_lr: 1e-2,
            base_batch: 32,
            adapt_lr: None,
            adapt_steps: 100,
            early_stop_nll: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            grad_clip: 5.0,
            dropout: 0.2,
            share_policy: SharePolicy::EncoderOnly,
        }
    }
}

impl AdaptationConfig {
    pub fn lr(&self, size: usize) -> f64 {
        self.adapt_lr
            .unwrap_or_else(|| scaled_lr(self.base_lr, size, self.base_batch))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("target sizes must be a non-empty list of positive integers");
        }
        if self.base_batch == 0 || !(self.base_lr > 0.0) || self.adapt_lr.is_some_and(|lr| !(lr >= 0.0)) {
            return bad("adaptation learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.momentum) {
            return bad("dropout and momentum must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }
}

/// Copies θ, attaches a fresh decoder for `target_tags` and fine-tunes both
/// on `episode`. Deterministic in `key`.
pub fn adapt(
    trained: &ModelParams,
    episode: &[EncodedSentence],
    target_tags: &TagVocab,
    cfg: &AdaptationConfig,
    key: RngKey,
) -> Result<ModelParams> {
    trained.theta.check_dims()?;
    if episode.is_empty() {
        return Err(Error::Config("target episode is empty".into()));
    }
    for s in episode {
        if let Some(&bad) = s.tag_ids.iter().find(|&&t| t >= target_tags.len()) {
            return Err(Error::TagIndexOutOfRange {
                index: bad,
                size: target_tags.len(),
            });
        }
    }
    let mut params = ModelParams {
        theta: trained.theta.clone(),
        phi: CrfParams::init(
            trained.theta.output_dim(),
            target_tags.len(),
            &mut key.child("decoder").stream(),
        ),
        omega: None,
    };
    let refs: Vec<&EncodedSentence> = episode.iter().collect();
    let objective = Objective {
        lambda: 0.0,
        classify: false,
    };
    let base = cfg.lr(episode.len());
    let mut opt = Sgd::new(cfg.sgd(), &params);
    let mut dropout_rng = key.child("dropout").stream();
    for step in 0..cfg.adapt_steps {
        let (loss, grad) = set_loss(&params, &refs, 0, objective, cfg.dropout, Some(&mut dropout_rng), true)?;
        if !loss.lab.is_finite() {
            return Err(Error::NonFiniteLoss {
                task: format!("target adaptation step {step}"),
            });
        }
        if loss.lab < cfg.early_stop_nll {
            break;
        }
        let mut grad = grad.expect("gradient requested");
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        clip_global_norm(&mut grad, cfg.grad_clip);
        opt.step(&mut params, &grad, linear_lr(base, step, cfg.adapt_steps));
    }
    Ok(params)
}

/// Micro-averaged entity-level scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Metrics {
    /// Both sides empty counts as a perfect score; otherwise an empty side
    /// scores zero.
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let (precision, recall) = if predicted == 0 && gold == 0 {
            (1.0, 1.0)
        } else {
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (ratio(true_positives, predicted), ratio(true_positives, gold))
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            gold,
        }
    }
}

/// Exact `(start, end, type)` matching, pooled over sentences.
pub fn span_metrics(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Metrics {
    assert_eq!(gold.len(), pred.len(), "one span list per sentence");
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs: HashSet<&Span> = g.iter().collect();
        let ps: HashSet<&Span> = p.iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    Metrics::from_counts(tp, np, ng)
}

/// Decodes every test sentence under IOB2 constraints and scores the spans.
pub fn evaluate(model: &ModelParams, vocabs: &Vocabularies, test: &[Sentence]) -> Result<Metrics> {
    let mask = TransitionMask::iob2(&vocabs.tags);
    let per_sentence: Vec<(Vec<Span>, Vec<Span>)> = test
        .iter()
        .map(|s| {
            let enc = vocabs.encode(s)?;
            let ids = predict(model, &enc, &mask)?;
            let tags: Vec<&str> = ids.iter().map(|&i| vocabs.tags.tag(i)).collect();
            Ok((extract_entities(&s.tags)?, extract_entities(&tags)?))
        })
        .collect::<Result<_>>()?;
    let (gold, pred): (Vec<_>, Vec<_>) = per_sentence.into_iter().unzip();
    Ok(span_metrics(&gold, &pred))
}

/// Tag set for a target corpus: every type seen in its train or test split.
pub fn target_vocabularies(source: &Vocabularies, train: &Corpus, test: &Corpus) -> Vocabularies {
    Vocabularies {
        tokens: source.tokens.clone(),
        chars: source.chars.clone(),
        tags: TagVocab::from_types(train.entity_types.union(&test.entity_types)),
    }
}

/// Number of `episode` sentences whose tokens and tags also occur in `test`.
pub fn leaked_sentences(episode: &[&Sentence], test: &Corpus) -> usize {
    let seen: HashSet<(&[String], &[String])> = test.sentences.iter().map(|s| (&s.tokens[..], &s.tags[..])).collect();
    episode
        .iter()
        .filter(|s| seen.contains(&(&s.tokens[..], &s.tags[..])))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat_index: usize,
    /// Indices of T' in the target train split.
    pub episode: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub target: String,
    pub size: usize,
    pub seed: u64,
    pub repeats: Vec<RepeatResult>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    /// Provenance of the run (seed, config hash, code version, checkpoint).
    pub run: serde_json::Value,
}

/// For each repeat: draw T' from `train`, check it against `test`, adapt and
/// score. Repeats run in parallel; results are assembled in repeat order.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    trained: &ModelParams,
    source_vocabs: &Vocabularies,
    train: &Corpus,
    test: &Corpus,
    size: usize,
    cfg: &AdaptationConfig,
    seed: u64,
    method: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocabs = target_vocabularies(source_vocabs, train, test);
    let key = RngKey::new(seed).child("adapt").index(size as u64);
    let repeats: Vec<RepeatResult> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let ep = make_target_episode(train, size, r, seed)?;
            let sentences: Vec<&Sentence> = ep.indices.iter().map(|&i| &train.sentences[i]).collect();
            let count = leaked_sentences(&sentences, test);
            if count > 0 {
                return Err(Error::TargetLeakage { repeat: r, count });
            }
            let encoded = sentences.iter().map(|s| vocabs.encode(s)).collect::<Result<Vec<_>>>()?;
            // keyed by the episode itself, so identical draws adapt identically
            let ep_key = ep.indices.iter().fold(key, |k, &i| k.index(i as u64));
            let model = adapt(trained, &encoded, &vocabs.tags, cfg, ep_key)?;
            let m = evaluate(&model, &vocabs, &test.sentences)?;
            Ok(RepeatResult {
                repeat_index: r,
                episode: ep.indices,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            })
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&RepeatResult) -> f64| repeats.iter().map(f).sum::<f64>() / repeats.len() as f64;
    Ok(EvalReport {
        method: method.to_string(),
        target: train.name.clone(),
        size,
        seed,
        mean_precision: mean(|r| r.precision),
        mean_recall: mean(|r| r.recall),
        mean_f1: mean(|r| r.f1),
        repeats,
        run: serde_json::Value::Null,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub const CSV_HEADER: &'static str = "method,target,size,repeat,precision,recall,f1";

    /// One row per repeat, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let row = |out: &mut String, rep: &str, p: f64, r: f64, f: f64| {
            writeln!(out, "{},{},{},{rep},{p},{r},{f}", self.method, self.target, self.size).unwrap();
        };
        for r in &self.repeats {
            row(&mut out, &r.repeat_index.to_string(), r.precision, r.recall, r.f1);
        }
        row(&mut out, "mean", self.mean_precision, self.mean_recall, self.mean_f1);
        out
    }
}

/// Mean F1 laid out with one row per method and one column per target corpus,
/// in blocks of episode size.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut sizes: Vec<usize> = reports.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut targets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    for size in sizes {
        write!(out, "|T'| = {size}\n{:width$}", "method").unwrap();
        for t in &targets {
            write!(out, "  {t:>10}").unwrap();
        }
        out.push('\n');
        for m in &methods {
            write!(out, "{m:width$}").unwrap();
            for t in &targets {
                match reports
                    .iter()
                    .find(|r| r.size == size && r.method == *m && r.target == *t)
                {
                    Some(r) => write!(out, "  {:>10.4}", r.mean_f1).unwrap(),
                    None => write!(out, "  {:>10}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
