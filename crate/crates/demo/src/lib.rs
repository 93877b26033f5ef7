//! Browser demo. Each export takes a JSON request and returns a JSON reply;
//! failures come back as `{"error": "..."}`. The typed functions underneath
//! are plain Rust and are what the tests exercise.

use hgda::corpus::extract_entities;
use hgda::crf::{log_partition, marginals, path_score, viterbi_masked, CrfParams, TransitionMask};
use hgda::rng::RngKey;
use hgda::sampler::{sample_batch, DomainPool, SamplerConfig, SamplingMode, SourcePool};
use hgda::trainer::hardness_from_losses;
use hgda::vocab::{EncodedSentence, TagVocab};
use hgda::Matrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

type Reply<T> = Result<T, String>;

fn respond<Q: DeserializeOwned, A: Serialize>(input: &str, f: impl FnOnce(Q) -> Reply<A>) -> String {
    let out = serde_json::from_str(input)
        .map_err(|e| format!("bad request: {e}"))
        .and_then(f);
    match out {
        Ok(a) => serde_json::to_string(&a).unwrap(),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

fn matrix(rows: &[Vec<f64>], want: (usize, usize), what: &str) -> Reply<Matrix> {
    if rows.len() != want.0 || rows.iter().any(|r| r.len() != want.1) {
        return Err(format!("{what} must be {} x {}", want.0, want.1));
    }
    Ok(Matrix::from_rows(rows))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfRequest {
    /// Entity types; tags are `O` then `B-`/`I-` per type, types sorted.
    pub types: Vec<String>,
    #[serde(default)]
    pub tokens: Vec<String>,
    /// `L x T`
    pub emissions: Vec<Vec<f64>>,
    /// `T x T`, row = previous tag. Zeros when absent.
    #[serde(default)]
    pub transitions: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub end: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoded {
    pub tags: Vec<String>,
    pub score: f64,
    /// `P(path)`
    pub probability: f64,
    /// `[start, end, type]`, end exclusive; empty when the path is not valid IOB2.
    pub entities: Vec<(usize, usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrfReply {
    pub tags: Vec<String>,
    pub log_partition: f64,
    /// `L x T` posterior tag probabilities.
    pub marginals: Vec<Vec<f64>>,
    pub viterbi: Decoded,
    pub viterbi_iob2: Decoded,
}

pub fn crf_explore_typed(req: CrfRequest) -> Reply<CrfReply> {
    let vocab = TagVocab::from_types(&req.types);
    let n = vocab.len();
    let l = req.emissions.len();
    if l == 0 {
        return Err("need at least one position".into());
    }
    if !req.tokens.is_empty() && req.tokens.len() != l {
        return Err(format!("{} tokens for {l} emission rows", req.tokens.len()));
    }
    let scores = matrix(&req.emissions, (l, n), "emissions")?;
    let transition = match &req.transitions {
        Some(t) => matrix(t, (n, n), "transitions")?,
        None => Matrix::zeros(n, n),
    };
    let row = |v: &Option<Vec<f64>>, what| match v {
        Some(v) => matrix(std::slice::from_ref(v), (1, n), what),
        None => Ok(Matrix::zeros(1, n)),
    };
    let params = CrfParams::from_parts(
        Matrix::zeros(1, n),
        transition,
        row(&req.start, "start")?,
        row(&req.end, "end")?,
    )
    .map_err(|e| e.to_string())?;
    let log_z = log_partition(&scores, &params).map_err(|e| e.to_string())?;
    let p = marginals(&scores, &params).map_err(|e| e.to_string())?;
    let decode = |mask: Option<&TransitionMask>| -> Reply<Decoded> {
        let path = viterbi_masked(&scores, &params, mask).map_err(|e| e.to_string())?;
        let score = path_score(&scores, &path, &params).map_err(|e| e.to_string())?;
        let tags: Vec<String> = path.iter().map(|&t| vocab.tag(t).to_string()).collect();
        let entities = extract_entities(&tags)
            .map(|spans| spans.into_iter().map(|s| (s.start, s.end, s.kind)).collect())
            .unwrap_or_default();
        Ok(Decoded {
            tags,
            score,
            probability: (score - log_z).exp(),
            entities,
        })
    };
    Ok(CrfReply {
        tags: vocab.tags().to_vec(),
        log_partition: log_z,
        marginals: (0..l).map(|t| p.row(t).to_vec()).collect(),
        viterbi: decode(None)?,
        viterbi_iob2: decode(Some(&TransitionMask::iob2(&vocab)))?,
    })
}

/// Marginals and best paths for a hand-written CRF.
#[wasm_bindgen]
pub fn crf_explore(input: &str) -> String {
    respond(input, crf_explore_typed)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardnessRequest {
    /// Per-task labelling loss.
    pub lab: Vec<f64>,
    /// Per-task domain-classification loss; zeros when absent.
    #[serde(default)]
    pub cls: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub lambda: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardnessReply {
    pub total: Vec<f64>,
    pub gamma_theta: Vec<f64>,
    pub gamma_phi: Vec<f64>,
    pub gamma_omega: Vec<f64>,
}

pub fn hardness_typed(req: HardnessRequest) -> Reply<HardnessReply> {
    let cls = req.cls.unwrap_or_else(|| vec![0.0; req.lab.len()]);
    if cls.len() != req.lab.len() {
        return Err(format!(
            "{} labelling losses but {} classification losses",
            req.lab.len(),
            cls.len()
        ));
    }
    if !req.lambda.is_finite() || req.lambda < 0.0 {
        return Err("lambda must be a nonnegative number".into());
    }
    let total: Vec<f64> = req.lab.iter().zip(&cls).map(|(a, b)| a + req.lambda * b).collect();
    let h = hardness_from_losses(&total, &req.lab, &cls).map_err(|e| e.to_string())?;
    Ok(HardnessReply {
        total,
        gamma_theta: h.gamma_theta,
        gamma_phi: h.gamma_phi,
        gamma_omega: h.gamma_omega,
    })
}

/// Per-task weights from per-task losses.
#[wasm_bindgen]
pub fn hardness(input: &str) -> String {
    respond(input, hardness_typed)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub sentences: usize,
    /// Fraction of sentences that contain an entity.
    pub entity_rate: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub domains: Vec<DomainSpec>,
    pub k: usize,
    #[serde(default)]
    pub mode: SamplingMode,
    #[serde(default)]
    pub domain_weights: Option<Vec<f64>>,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pick {
    pub index: usize,
    pub has_entity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Episode {
    pub domain: String,
    pub support: Vec<Pick>,
    pub query: Vec<Pick>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReply {
    pub episodes: Vec<Episode>,
    /// Episodes drawn per domain.
    pub per_domain: Vec<usize>,
    /// Share of support sentences with an entity.
    pub support_entity_share: f64,
}

/// Sentence `i` of a domain with `n` sentences carries an entity when it is
/// among the first `round(rate * n)` positions of a fixed shuffle.
fn synthetic_domain(spec: &DomainSpec, id: usize, seed: u64) -> Reply<DomainPool> {
    use rand::seq::SliceRandom;
    if !(0.0..=1.0).contains(&spec.entity_rate) {
        return Err(format!("{}: entity_rate must be in [0, 1]", spec.name));
    }
    let n = spec.sentences;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngKey::new(seed).child("demo-domain").index(id as u64).stream());
    let bearing = (spec.entity_rate * n as f64).round() as usize;
    let mut has = vec![false; n];
    for &i in &order[..bearing] {
        has[i] = true;
    }
    let sentences = has
        .into_iter()
        .map(|has_entity| EncodedSentence {
            token_ids: vec![0],
            char_ids: vec![vec![0]],
            tag_ids: vec![usize::from(has_entity)],
            domain_id: id,
            has_entity,
        })
        .collect();
    Ok(DomainPool::new(spec.name.clone(), sentences))
}

pub fn sample_typed(req: SampleRequest) -> Reply<SampleReply> {
    if req.count == 0 || req.count > 1000 {
        return Err("count must be between 1 and 1000".into());
    }
    let pool = SourcePool::new(
        req.domains
            .iter()
            .enumerate()
            .map(|(i, d)| synthetic_domain(d, i, req.seed))
            .collect::<Reply<_>>()?,
    );
    let cfg = SamplerConfig {
        k: req.k,
        mode: req.mode,
        domain_weights: req.domain_weights,
        seed: req.seed,
    };
    let tasks = sample_batch(&pool, &cfg, req.count, RngKey::new(req.seed).child("demo-episodes"))
        .map_err(|e| e.to_string())?;
    let mut per_domain = vec![0; pool.num_domains()];
    let (mut with, mut total) = (0, 0);
    let episodes = tasks
        .iter()
        .map(|t| {
            per_domain[t.domain] += 1;
            let picks = |idx: &[usize]| -> Vec<Pick> {
                idx.iter()
                    .map(|&i| Pick {
                        index: i,
                        has_entity: pool.domains[t.domain].sentences[i].has_entity,
                    })
                    .collect()
            };
            let support = picks(&t.support);
            with += support.iter().filter(|p| p.has_entity).count();
            total += support.len();
            Episode {
                domain: pool.domains[t.domain].name.clone(),
                support,
                query: picks(&t.query),
            }
        })
        .collect();
    Ok(SampleReply {
        episodes,
        per_domain,
        support_entity_share: with as f64 / total as f64,
    })
}

/// Episodes from synthetic domains described only by size and entity rate.
#[wasm_bindgen]
pub fn sample_episodes(input: &str) -> String {
    respond(input, sample_typed)
}
