//! Reference implementations shared by the integration tests: exhaustive
//! path enumeration for the CRF, central finite differences, and small
//! random instances.
#![allow(dead_code)]

use hgda::corpus::{BioTag, Span};
use hgda::crf::{path_score, CrfParams};
use hgda::encoder::{EncoderConfig, EncoderParams};
use hgda::params::ParamGroup;
use hgda::rng::StreamRng;
use hgda::tensor::Matrix;
use hgda::vocab::{CharVocab, EncodedSentence, Vocab};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Absolute floor for coordinates whose true derivative is ~0; well above the
/// O(h^2) truncation and O(eps/h) rounding error of the central difference.
pub const FD_ATOL: f64 = 1e-7;

pub fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

pub fn random_crf(rng: &mut StreamRng, input: usize, tags: usize) -> CrfParams {
    CrfParams::from_parts(
        random_matrix(rng, input, tags, 1.0),
        random_matrix(rng, tags, tags, 2.0),
        random_matrix(rng, 1, tags, 2.0),
        random_matrix(rng, 1, tags, 2.0),
    )
    .unwrap()
}

/// Every tag path of length `len` over `tags` labels, in lexicographic order.
pub fn all_paths(len: usize, tags: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..tags).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

pub struct Enumerated {
    pub log_z: f64,
    pub best: Vec<usize>,
    pub best_score: f64,
}

/// log Z and the argmax path by scoring every path. Ties keep the first path
/// in lexicographic order.
pub fn enumerate(scores: &Matrix, params: &CrfParams) -> Enumerated {
    let paths = all_paths(scores.rows(), params.num_tags());
    let sc: Vec<f64> = paths.iter().map(|p| path_score(scores, p, params).unwrap()).collect();
    let max = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + sc.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let (i, _) = sc.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(bi, bs), (i, &s)| if s > bs { (i, s) } else { (bi, bs) },
    );
    Enumerated {
        log_z,
        best: paths[i].clone(),
        best_score: sc[i],
    }
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_RTOL * analytic.abs().max(numeric.abs()) + FD_ATOL
}

/// Compares every coordinate of `analytic` with a central difference of `f`
/// around `params`. Returns the number of coordinates checked.
pub fn fd_check<G: ParamGroup + Clone>(params: &G, analytic: &G, f: impl Fn(&G) -> f64) -> Result<usize, String> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        for j in 0..grads[ti].len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].as_mut_slice()[j] += delta;
                f(&p)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            if !close(grads[ti][j], numeric) {
                return Err(format!("{name}[{j}]: analytic {} vs numeric {numeric}", grads[ti][j]));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Central-difference check of a gradient with respect to a flat input.
pub fn fd_check_slice(x: &[f64], analytic: &[f64], label: &str, f: impl Fn(&[f64]) -> f64) -> Result<usize, String> {
    assert_eq!(x.len(), analytic.len());
    for j in 0..x.len() {
        let eval = |delta: f64| {
            let mut y = x.to_vec();
            y[j] += delta;
            f(&y)
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        if !close(analytic[j], numeric) {
            return Err(format!("{label}[{j}]: analytic {} vs numeric {numeric}", analytic[j]));
        }
    }
    Ok(x.len())
}

pub fn tiny_encoder_config(chars: bool) -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 3,
        hidden_size: 4,
        char_features: chars,
        char_embedding_dim: 2,
        char_output_dim: 2,
    }
}

pub const WORDS: [&str; 6] = ["ab", "b", "cab", "abcd", "d", "ca"];

pub fn tiny_vocab() -> (Vocab, CharVocab) {
    (Vocab::build(WORDS), CharVocab::build(WORDS))
}

pub fn tiny_encoder(rng: &mut StreamRng, chars: bool) -> EncoderParams {
    let (v, c) = tiny_vocab();
    let mut p = EncoderParams::init(&tiny_encoder_config(chars), &v, Some(&c), None, rng).unwrap();
    // larger weights than the default init so the nonlinearities are exercised
    for t in p.tensors_mut() {
        t.scale(2.0);
    }
    p
}

pub fn random_sentence(rng: &mut StreamRng, len: usize, num_tags: usize, domain: usize) -> EncodedSentence {
    let (v, c) = tiny_vocab();
    let words: Vec<&str> = (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
    let tag_ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..num_tags)).collect();
    EncodedSentence {
        token_ids: words.iter().map(|w| v.id(w)).collect(),
        char_ids: words.iter().map(|w| c.ids(w)).collect(),
        has_entity: tag_ids.iter().any(|&t| t != 0),
        tag_ids,
        domain_id: domain,
    }
}

/// A random (not necessarily valid) BIO sequence over `kinds`.
pub fn random_tags(rng: &mut StreamRng, len: usize, kinds: &[&str]) -> Vec<String> {
    (0..len)
        .map(|_| match rng.gen_range(0..3) {
            0 => "O".to_string(),
            1 => format!("B-{}", kinds[rng.gen_range(0..kinds.len())]),
            _ => format!("I-{}", kinds[rng.gen_range(0..kinds.len())]),
        })
        .collect()
}

/// Rewrites a BIO sequence into valid IOB2 by turning dangling `I-X` into `B-X`.
pub fn repair(tags: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    for t in tags {
        let fixed = match BioTag::parse(t) {
            Some(BioTag::Inside(k)) => {
                let prev_kind = out
                    .last()
                    .and_then(|p| BioTag::parse(p))
                    .and_then(|b| b.kind().map(str::to_string));
                if prev_kind.as_deref() == Some(k) {
                    t.clone()
                } else {
                    format!("B-{k}")
                }
            }
            _ => t.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Independent span reader: a span starts at every `B-X` and runs over the
/// following `I-X` tokens.
pub fn naive_spans(tags: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if let Some(kind) = tags[i].strip_prefix("B-") {
            let inside = format!("I-{kind}");
            let mut j = i + 1;
            while j < tags.len() && tags[j] == inside {
                j += 1;
            }
            spans.push(Span::new(i, j, kind));
            i = j;
        } else {
            i += 1;
        }
    }
    spans
}

/// Independent micro P/R/F1 over lists of spans, with the same empty-set conventions.
pub fn naive_prf(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        np += p.len();
        ng += g.len();
        tp += p.iter().filter(|s| g.contains(s)).count();
    }
    if np == 0 && ng == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

// ---------------------------------------------------------------------------
// Checks shared by the per-crate tests and the acceptance suite. Each returns
// a one-line summary on success and a description of the first failure.

pub type Check = Result<String, String>;

use hgda::classifier::{cls_backward, cls_loss, ClassifierParams};
use hgda::crf::{emissions, emissions_backward, log_partition, nll, nll_backward, viterbi};
use hgda::encoder::{encode, encode_backward};
use hgda::model::{set_loss, ModelParams, Objective};
use hgda::rng::RngKey;
use std::time::Instant;

/// Brute-force agreement of log Z, nll and Viterbi on random instances with
/// `L <= 4`, `T <= 4`.
pub fn check_crf_oracle(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = RngKey::new(seed).child("crf-oracle").index(i as u64).stream();
        let len = rng.gen_range(1..=4);
        let tags = rng.gen_range(1..=4);
        let params = random_crf(&mut rng, 1, tags);
        let scores = random_matrix(&mut rng, len, tags, 3.0);
        let oracle = enumerate(&scores, &params);
        let log_z = log_partition(&scores, &params).map_err(|e| e.to_string())?;
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..tags)).collect();
        let (loss, _) = nll(&scores, &gold, &params).map_err(|e| e.to_string())?;
        let oracle_nll = oracle.log_z - path_score(&scores, &gold, &params).unwrap();
        let path = viterbi(&scores, &params).map_err(|e| e.to_string())?;
        let err = (log_z - oracle.log_z).abs().max((loss - oracle_nll).abs());
        worst = worst.max(err);
        if err > 1e-9 {
            return Err(format!("instance {i}: log Z / nll off by {err:e}"));
        }
        if path != oracle.best {
            return Err(format!(
                "instance {i}: viterbi {path:?} vs brute force {:?}",
                oracle.best
            ));
        }
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() > 10.0 {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "{instances} instances, max abs error {worst:.1e}, {elapsed:.2?}"
    ))
}

/// Encoder gradients (character features on, dropout mask fixed on odd
/// instances) against a random linear read-out of the features.
pub fn check_encoder_gradients(instances: usize, seed: u64) -> Check {
    let mut coords = 0;
    for i in 0..instances {
        let mut rng = RngKey::new(seed).child("fd-encoder").index(i as u64).stream();
        let chars = i % 4 != 3;
        let params = tiny_encoder(&mut rng, chars);
        let len = rng.gen_range(1..=4);
        let sentence = random_sentence(&mut rng, len, 3, 0);
        let upstream = random_matrix(&mut rng, len, 4, 1.0);
        let dropout = if i % 2 == 1 { 0.3 } else { 0.0 };
        let mask_key = RngKey::new(seed).child("mask").index(i as u64);
        let run = |p: &EncoderParams| {
            let mut r = mask_key.stream();
            let (f, cache) = encode(p, &sentence, dropout, (dropout > 0.0).then_some(&mut r)).unwrap();
            (f, cache)
        };
        let (_, cache) = run(&params);
        let analytic = encode_backward(&params, &cache, &upstream).map_err(|e| e.to_string())?;
        let f = |p: &EncoderParams| {
            let (feat, _) = run(p);
            feat.as_slice()
                .iter()
                .zip(upstream.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        coords += fd_check(&params, &analytic, f).map_err(|e| format!("encoder instance {i}: {e}"))?;
    }
    Ok(format!("{instances} instances, {coords} coordinates"))
}

/// CRF gradients w.r.t. all decoder parameters and the input features.
pub fn check_crf_gradients(instances: usize, seed: u64) -> Check {
    let mut coords = 0;
    for i in 0..instances {
        let mut rng = RngKey::new(seed).child("fd-crf").index(i as u64).stream();
        let len = rng.gen_range(1..=4);
        let tags = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=4);
        let params = random_crf(&mut rng, h, tags);
        let features = random_matrix(&mut rng, len, h, 1.0);
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..tags)).collect();
        let loss = |p: &CrfParams, x: &Matrix| {
            let s = emissions(p, x).unwrap();
            nll(&s, &gold, p).unwrap().0
        };
        let scores = emissions(&params, &features).unwrap();
        let (_, cache) = nll(&scores, &gold, &params).unwrap();
        let (mut grad, d_scores) = nll_backward(&params, &cache).map_err(|e| e.to_string())?;
        let d_features = emissions_backward(&params, &features, &d_scores, &mut grad);
        coords += fd_check(&params, &grad, |p| loss(p, &features)).map_err(|e| format!("crf instance {i}: {e}"))?;
        coords += fd_check_slice(features.as_slice(), d_features.as_slice(), "features", |x| {
            loss(&params, &Matrix::from_vec(len, h, x.to_vec()))
        })
        .map_err(|e| format!("crf instance {i}: {e}"))?;
    }
    Ok(format!("{instances} instances, {coords} coordinates"))
}

/// Domain-classifier gradients w.r.t. its parameters and the pooled inputs.
pub fn check_classifier_gradients(instances: usize, seed: u64) -> Check {
    let mut coords = 0;
    for i in 0..instances {
        let mut rng = RngKey::new(seed).child("fd-cls").index(i as u64).stream();
        let h = rng.gen_range(1..=5);
        let d = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=3);
        let params =
            ClassifierParams::from_parts(random_matrix(&mut rng, h, d, 2.0), random_matrix(&mut rng, 1, d, 2.0))
                .unwrap();
        let pooled: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let domain = rng.gen_range(0..d);
        let (_, cache) = cls_loss(&params, &pooled, domain).unwrap();
        let (grad, d_pooled) = cls_backward(&params, &cache).map_err(|e| e.to_string())?;
        coords += fd_check(&params, &grad, |p| cls_loss(p, &pooled, domain).unwrap().0)
            .map_err(|e| format!("classifier instance {i}: {e}"))?;
        let flat: Vec<f64> = pooled.concat();
        let d_flat: Vec<f64> = d_pooled.concat();
        coords += fd_check_slice(&flat, &d_flat, "pooled", |x| {
            let rows: Vec<Vec<f64>> = x.chunks(h).map(<[f64]>::to_vec).collect();
            cls_loss(&params, &rows, domain).unwrap().0
        })
        .map_err(|e| format!("classifier instance {i}: {e}"))?;
    }
    Ok(format!("{instances} instances, {coords} coordinates"))
}

pub fn tiny_model(rng: &mut StreamRng, chars: bool, tags: usize, domains: usize) -> ModelParams {
    let theta = tiny_encoder(rng, chars);
    let h = theta.output_dim();
    ModelParams {
        theta,
        phi: random_crf(rng, h, tags),
        omega: Some(
            ClassifierParams::from_parts(random_matrix(rng, h, domains, 1.0), random_matrix(rng, 1, domains, 1.0))
                .unwrap(),
        ),
    }
}

/// Whole-model set loss: θ against lab + λ·cls, φ against lab, ω against cls.
pub fn check_model_gradients(instances: usize, seed: u64) -> Check {
    let mut coords = 0;
    for i in 0..instances {
        let mut rng = RngKey::new(seed).child("fd-model").index(i as u64).stream();
        let tags = 3;
        let params = tiny_model(&mut rng, i % 2 == 0, tags, 3);
        let domain = rng.gen_range(0..3);
        let sentences: Vec<EncodedSentence> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let len = rng.gen_range(1..=4);
                random_sentence(&mut rng, len, tags, domain)
            })
            .collect();
        let refs: Vec<&EncodedSentence> = sentences.iter().collect();
        let lambda = [0.0, 1.0, 0.5][i % 3];
        let obj = Objective { lambda, classify: true };
        let losses = |p: &ModelParams| {
            set_loss::<StreamRng>(p, &refs, domain, obj, 0.0, None, false)
                .unwrap()
                .0
        };
        let (_, grad) =
            set_loss::<StreamRng>(&params, &refs, domain, obj, 0.0, None, true).map_err(|e| e.to_string())?;
        let grad = grad.unwrap();
        let fail = |e: String| format!("model instance {i} (lambda {lambda}): {e}");
        coords += fd_check(&params.theta, &grad.theta, |t| {
            let mut p = params.clone();
            p.theta = t.clone();
            let l = losses(&p);
            l.lab + lambda * l.cls
        })
        .map_err(fail)?;
        coords += fd_check(&params.phi, &grad.phi, |c| {
            let mut p = params.clone();
            p.phi = c.clone();
            losses(&p).lab
        })
        .map_err(fail)?;
        coords += fd_check(params.omega.as_ref().unwrap(), grad.omega.as_ref().unwrap(), |o| {
            let mut p = params.clone();
            p.omega = Some(o.clone());
            losses(&p).cls
        })
        .map_err(fail)?;
    }
    Ok(format!("{instances} instances, {coords} coordinates"))
}

use hgda::sampler::{sample_batch, sample_batch_par, DomainPool, SamplerConfig, SamplingMode, SourcePool};
use hgda::trainer::{hardness_from_losses, inner_adapt, outer_step, scaled_lr, HardnessScores, TrainConfig};

/// Loss-share weights: normalisation, monotonicity, the zero-denominator
/// fallback and the `[2, 1, 1]` example.
pub fn check_hardness(instances: usize, seed: u64) -> Check {
    let g = hardness_from_losses(&[2.0, 1.0, 1.0], &[2.0, 1.0, 1.0], &[2.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    if g.gamma_theta != [0.5, 0.25, 0.25] || g.gamma_phi != [0.5, 0.25, 0.25] || g.gamma_omega != [0.5, 0.25, 0.25] {
        return Err(format!("[2,1,1] gave {:?}", g.gamma_theta));
    }
    let z = hardness_from_losses(&[0.0; 4], &[0.0; 4], &[0.0; 4]).map_err(|e| e.to_string())?;
    if z != HardnessScores::uniform(4) || z.gamma_theta != [0.25; 4] {
        return Err(format!("zero losses gave {:?}", z.gamma_theta));
    }
    for i in 0..instances {
        let mut rng = RngKey::new(seed).child("hardness").index(i as u64).stream();
        let m = rng.gen_range(1..=8);
        let lab: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..10.0)).collect();
        let cls: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..3.0)).collect();
        let total: Vec<f64> = lab.iter().zip(&cls).map(|(a, b)| a + b).collect();
        let s = hardness_from_losses(&total, &lab, &cls).map_err(|e| e.to_string())?;
        for (name, gamma, losses) in [
            ("theta", &s.gamma_theta, &total),
            ("phi", &s.gamma_phi, &lab),
            ("omega", &s.gamma_omega, &cls),
        ] {
            let sum: f64 = gamma.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("instance {i}: gamma_{name} sums to {sum}"));
            }
            for a in 0..m {
                for b in 0..m {
                    if losses[a] < losses[b] && gamma[a] > gamma[b] {
                        return Err(format!("instance {i}: gamma_{name} not monotone"));
                    }
                }
            }
        }
    }
    Ok(format!(
        "[2,1,1] -> [0.5,0.25,0.25]; {instances} random batches normalised and monotone"
    ))
}

pub fn check_scaled_lr() -> Check {
    let a = scaled_lr(1e-2, 32, 32);
    let b = scaled_lr(1e-2, 8, 32);
    if a == 1e-2 && b == 5e-3 {
        Ok(format!("scaled_lr(1e-2,32,32) = {a}, scaled_lr(1e-2,8,32) = {b}"))
    } else {
        Err(format!("got {a} and {b}"))
    }
}

/// Three domains of 30 sentences with entity densities 0.8, 0.5 and 0.2.
pub fn property_pool() -> SourcePool {
    let domains = [(0usize, 24usize), (1, 15), (2, 6)]
        .iter()
        .map(|&(d, ents)| {
            let sentences = (0..30)
                .map(|i| EncodedSentence {
                    token_ids: vec![d * 100 + i],
                    char_ids: vec![vec![1]],
                    tag_ids: vec![usize::from(i < ents)],
                    domain_id: d,
                    has_entity: i < ents,
                })
                .collect();
            DomainPool::new(format!("d{d}"), sentences)
        })
        .collect();
    SourcePool::new(domains)
}

/// Disjointness, purity, exact K and (NE-constrained) entity-bearing support
/// over `draws` tasks per mode; reproducibility and parallel = sequential.
pub fn check_sampler(draws: usize, seed: u64) -> Check {
    let pool = property_pool();
    for mode in [SamplingMode::Uniform, SamplingMode::NeConstrained] {
        let cfg = SamplerConfig {
            k: 5,
            mode,
            domain_weights: None,
            seed,
        };
        let key = RngKey::new(seed).child("sampler-check");
        let tasks = sample_batch(&pool, &cfg, draws, key).map_err(|e| e.to_string())?;
        if tasks != sample_batch(&pool, &cfg, draws, key).unwrap() {
            return Err(format!("{mode:?}: same key gave different tasks"));
        }
        if tasks != sample_batch_par(&pool, &cfg, draws, key).unwrap() {
            return Err(format!("{mode:?}: parallel sampling differs from sequential"));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.support.len() != 5 || t.query.len() != 5 {
                return Err(format!(
                    "{mode:?} task {i}: sizes {} / {}",
                    t.support.len(),
                    t.query.len()
                ));
            }
            let mut all: Vec<usize> = t.support.iter().chain(&t.query).copied().collect();
            all.sort_unstable();
            all.dedup();
            if all.len() != 10 {
                return Err(format!("{mode:?} task {i}: support and query overlap or repeat"));
            }
            let s = pool.support(t);
            let q = pool.query(t);
            if s.iter().chain(&q).any(|x| x.domain_id != t.domain) {
                return Err(format!("{mode:?} task {i}: mixes domains"));
            }
            if mode == SamplingMode::NeConstrained && !s.iter().all(|x| x.has_entity) {
                return Err(format!("{mode:?} task {i}: support without entities"));
            }
        }
    }
    Ok(format!(
        "{draws} draws per mode: disjoint, single-domain, exact K, NE support; reproducible; parallel = sequential"
    ))
}

/// A tiny source pool of random sentences over the shared test vocabulary.
pub fn tiny_pool(seed: u64, domains: usize, per_domain: usize, tags: usize) -> SourcePool {
    let mut rng = RngKey::new(seed).child("tiny-pool").stream();
    SourcePool::new(
        (0..domains)
            .map(|d| {
                let s = (0..per_domain)
                    .map(|_| {
                        let len = rng.gen_range(2..=4);
                        random_sentence(&mut rng, len, tags, d)
                    })
                    .collect();
                DomainPool::new(format!("d{d}"), s)
            })
            .collect(),
    )
}

/// Inner loop leaves its input untouched; β = 0 and zero adaptation steps
/// both give the plain query gradient; clipped outer gradient norm ≤ 5.
pub fn check_bilevel(seed: u64) -> Check {
    let pool = tiny_pool(seed, 3, 12, 3);
    let mut rng = RngKey::new(seed).child("bilevel").stream();
    let params = tiny_model(&mut rng, false, 3, 3);
    let base = TrainConfig {
        k: 3,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let tasks = sample_batch(&pool, &base.sampler(seed), 4, RngKey::new(seed).child("t")).map_err(|e| e.to_string())?;
    let snapshot = params.clone();
    let key = RngKey::new(seed).child("inner");
    for t in &tasks {
        inner_adapt(
            &params,
            &pool,
            t,
            &TrainConfig {
                beta: Some(0.5),
                ..base.clone()
            },
            key,
        )
        .map_err(|e| e.to_string())?;
    }
    if !params.bitwise_eq(&snapshot) {
        return Err("inner_adapt modified the outer parameters".into());
    }
    let obj = Objective {
        lambda: base.lambda,
        classify: true,
    };
    for (i, t) in tasks.iter().enumerate() {
        let (_, plain) = set_loss::<StreamRng>(&params, &pool.query(t), t.domain, obj, 0.0, None, true).unwrap();
        let plain = plain.unwrap();
        let zero_beta = inner_adapt(
            &params,
            &pool,
            t,
            &TrainConfig {
                beta: Some(0.0),
                ..base.clone()
            },
            key,
        )
        .unwrap();
        if !zero_beta.meta_grads.bitwise_eq(&plain) {
            return Err(format!(
                "task {i}: beta = 0 meta-gradient differs from the query gradient"
            ));
        }
        let zero_steps = inner_adapt(
            &params,
            &pool,
            t,
            &TrainConfig {
                adaptation_steps: 0,
                ..base.clone()
            },
            key,
        )
        .unwrap();
        if !zero_steps.meta_grads.bitwise_eq(&plain) {
            return Err(format!(
                "task {i}: zero adaptation steps differ from the query gradient"
            ));
        }
    }
    // Large raw gradients so clipping engages.
    let cfg = TrainConfig {
        beta: Some(0.5),
        grad_clip: 5.0,
        ..base.clone()
    };
    let mut losses: Vec<_> = tasks
        .iter()
        .map(|t| inner_adapt(&params, &pool, t, &cfg, key).unwrap())
        .collect();
    for l in &mut losses {
        l.meta_grads.scale(1e3);
    }
    let scores = HardnessScores::uniform(losses.len());
    let mut p = params.clone();
    let mut opt = hgda::optim::Sgd::new(cfg.sgd(), &p);
    let stats = outer_step(&mut p, &losses, &scores, &cfg, &mut opt, 0.01).map_err(|e| e.to_string())?;
    if stats.clipped_grad_norm > 5.0 + 1e-9 || stats.grad_norm <= 5.0 {
        return Err(format!(
            "grad norm {} clipped to {}",
            stats.grad_norm, stats.clipped_grad_norm
        ));
    }
    Ok(format!(
        "input untouched; beta=0 and steps=0 equal query gradient; norm {:.1} clipped to {:.6}",
        stats.grad_norm, stats.clipped_grad_norm
    ))
}
