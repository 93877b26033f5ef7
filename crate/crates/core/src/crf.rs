//! Linear-chain CRF tag decoder (parameter group φ).
//!
//! Path score of tags `y` over emissions `E` (L x T):
//! `start[y0] + sum_t E[t][yt] + sum_t trans[y(t-1)][yt] + end[y(L-1)]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Generation, ParamGroup};
use crate::tensor::{log_sum_exp, Matrix};
use crate::vocab::TagVocab;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// `H x T`
    pub projection: Matrix,
    /// `T x T`, row = previous tag.
    pub transition: Matrix,
    pub start: Matrix,
    pub end: Matrix,
    generation: Generation,
}

impl CrfParams {
    /// Uniform projection, zero transition/start/end scores.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, num_tags: usize, rng: &mut R) -> Self {
        CrfParams {
            projection: Matrix::uniform_init(input_dim, num_tags, input_dim, rng),
            transition: Matrix::zeros(num_tags, num_tags),
            start: Matrix::zeros(1, num_tags),
            end: Matrix::zeros(1, num_tags),
            generation: Generation::fresh(),
        }
    }

    pub fn from_parts(projection: Matrix, transition: Matrix, start: Matrix, end: Matrix) -> Result<Self> {
        let t = projection.cols();
        if transition.shape() != (t, t) || start.shape() != (1, t) || end.shape() != (1, t) {
            return Err(Error::DimensionMismatch("inconsistent CRF tensor shapes".into()));
        }
        Ok(CrfParams {
            projection,
            transition,
            start,
            end,
            generation: Generation::fresh(),
        })
    }

    pub fn num_tags(&self) -> usize {
        self.transition.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn generation(&self) -> u64 {
        self.generation.id()
    }

    fn check_finite(&self) -> Result<()> {
        if self.transition.is_finite() && self.start.is_finite() && self.end.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteScore)
        }
    }
}

impl ParamGroup for CrfParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("projection".into(), &self.projection),
            ("transition".into(), &self.transition),
            ("start".into(), &self.start),
            ("end".into(), &self.end),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.generation = Generation::fresh();
        vec![
            &mut self.projection,
            &mut self.transition,
            &mut self.start,
            &mut self.end,
        ]
    }
}

/// Per-tag scores `features * projection`.
pub fn emissions(params: &CrfParams, features: &Matrix) -> Result<Matrix> {
    if features.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features are {}-d, decoder expects {}",
            features.cols(),
            params.input_dim()
        )));
    }
    let mut out = Matrix::zeros(features.rows(), params.num_tags());
    for t in 0..features.rows() {
        params.projection.matvec_t_acc(features.row(t), out.row_mut(t));
    }
    Ok(out)
}

/// Accumulates the projection gradient into `grad` and returns `dLoss/dFeatures`.
pub fn emissions_backward(params: &CrfParams, features: &Matrix, d_scores: &Matrix, grad: &mut CrfParams) -> Matrix {
    let mut d_features = Matrix::zeros(features.rows(), features.cols());
    for t in 0..features.rows() {
        grad.projection.add_outer(features.row(t), d_scores.row(t));
        params.projection.matvec_acc(d_scores.row(t), d_features.row_mut(t));
    }
    d_features
}

fn check_scores(scores: &Matrix, params: &CrfParams) -> Result<()> {
    if scores.rows() == 0 {
        return Err(Error::DimensionMismatch("empty score matrix".into()));
    }
    if scores.cols() != params.num_tags() {
        return Err(Error::DimensionMismatch(format!(
            "{} score columns for {} tags",
            scores.cols(),
            params.num_tags()
        )));
    }
    if !scores.is_finite() {
        return Err(Error::NonFiniteScore);
    }
    params.check_finite()
}

/// Log-space forward variables, `L x T`.
fn forward_vars(scores: &Matrix, params: &CrfParams) -> Matrix {
    let (l, n) = scores.shape();
    let mut alpha = Matrix::zeros(l, n);
    for j in 0..n {
        alpha.set(0, j, params.start.get(0, j) + scores.get(0, j));
    }
    let mut buf = vec![0.0; n];
    for t in 1..l {
        for j in 0..n {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(t - 1, i) + params.transition.get(i, j);
            }
            alpha.set(t, j, scores.get(t, j) + log_sum_exp(&buf));
        }
    }
    alpha
}

fn backward_vars(scores: &Matrix, params: &CrfParams) -> Matrix {
    let (l, n) = scores.shape();
    let mut beta = Matrix::zeros(l, n);
    for i in 0..n {
        beta.set(l - 1, i, params.end.get(0, i));
    }
    let mut buf = vec![0.0; n];
    for t in (0..l - 1).rev() {
        for i in 0..n {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = params.transition.get(i, j) + scores.get(t + 1, j) + beta.get(t + 1, j);
            }
            beta.set(t, i, log_sum_exp(&buf));
        }
    }
    beta
}

fn log_z_from(alpha: &Matrix, params: &CrfParams) -> f64 {
    let l = alpha.rows();
    let last: Vec<f64> = (0..alpha.cols())
        .map(|j| alpha.get(l - 1, j) + params.end.get(0, j))
        .collect();
    log_sum_exp(&last)
}

/// Log of the sum over all tag paths of `exp(path score)`.
pub fn log_partition(scores: &Matrix, params: &CrfParams) -> Result<f64> {
    check_scores(scores, params)?;
    let z = log_z_from(&forward_vars(scores, params), params);
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::NonFiniteScore)
    }
}

pub fn path_score(scores: &Matrix, tags: &[usize], params: &CrfParams) -> Result<f64> {
    let n = params.num_tags();
    if tags.len() != scores.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} gold tags for {} positions",
            tags.len(),
            scores.rows()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= n) {
        return Err(Error::TagIndexOutOfRange { index: bad, size: n });
    }
    let mut s = params.start.get(0, tags[0]) + params.end.get(0, tags[tags.len() - 1]);
    for (t, &y) in tags.iter().enumerate() {
        s += scores.get(t, y);
        if t > 0 {
            s += params.transition.get(tags[t - 1], y);
        }
    }
    Ok(s)
}

/// Posterior `P(y_t = j)` for every position, `L x T`.
pub fn marginals(scores: &Matrix, params: &CrfParams) -> Result<Matrix> {
    check_scores(scores, params)?;
    let alpha = forward_vars(scores, params);
    let log_z = log_z_from(&alpha, params);
    if !log_z.is_finite() {
        return Err(Error::NonFiniteScore);
    }
    let beta = backward_vars(scores, params);
    let (l, n) = scores.shape();
    let mut p = Matrix::zeros(l, n);
    for t in 0..l {
        for j in 0..n {
            p.set(t, j, (alpha.get(t, j) + beta.get(t, j) - log_z).exp());
        }
    }
    Ok(p)
}

/// State kept from [`nll`] for [`nll_backward`].
#[derive(Debug, Clone)]
pub struct NllCache {
    generation: u64,
    scores: Matrix,
    gold: Vec<usize>,
    alpha: Matrix,
    log_z: f64,
}

/// Negative log-likelihood of `gold` under the CRF.
pub fn nll(scores: &Matrix, gold: &[usize], params: &CrfParams) -> Result<(f64, NllCache)> {
    check_scores(scores, params)?;
    let gold_score = path_score(scores, gold, params)?;
    let alpha = forward_vars(scores, params);
    let log_z = log_z_from(&alpha, params);
    if !log_z.is_finite() {
        return Err(Error::NonFiniteScore);
    }
    Ok((
        log_z - gold_score,
        NllCache {
            generation: params.generation(),
            scores: scores.clone(),
            gold: gold.to_vec(),
            alpha,
            log_z,
        },
    ))
}

/// Gradients of the NLL: a CRF-shaped gradient (projection left at zero,
/// see [`emissions_backward`]) and `dNLL/dScores`.
pub fn nll_backward(params: &CrfParams, cache: &NllCache) -> Result<(CrfParams, Matrix)> {
    let mut grad = params.zeros_like();
    let d_scores = nll_backward_into(params, cache, &mut grad)?;
    Ok((grad, d_scores))
}

/// Like [`nll_backward`], accumulating into `grad`.
pub fn nll_backward_into(params: &CrfParams, cache: &NllCache, grad: &mut CrfParams) -> Result<Matrix> {
    if cache.generation != params.generation() {
        return Err(Error::StaleCache);
    }
    let scores = &cache.scores;
    let (l, n) = scores.shape();
    let beta = backward_vars(scores, params);
    let alpha = &cache.alpha;
    let log_z = cache.log_z;

    let mut d_scores = Matrix::zeros(l, n);
    for t in 0..l {
        for j in 0..n {
            d_scores.set(t, j, (alpha.get(t, j) + beta.get(t, j) - log_z).exp());
        }
    }
    for j in 0..n {
        grad.start.add_at(0, j, d_scores.get(0, j));
        grad.end.add_at(0, j, d_scores.get(l - 1, j));
    }
    for t in 0..l.saturating_sub(1) {
        for i in 0..n {
            let a = alpha.get(t, i);
            for j in 0..n {
                let p = (a + params.transition.get(i, j) + scores.get(t + 1, j) + beta.get(t + 1, j) - log_z).exp();
                grad.transition.add_at(i, j, p);
            }
        }
    }

    let gold = &cache.gold;
    grad.start.add_at(0, gold[0], -1.0);
    grad.end.add_at(0, gold[l - 1], -1.0);
    for (t, &y) in gold.iter().enumerate() {
        d_scores.add_at(t, y, -1.0);
        if t > 0 {
            grad.transition.add_at(gold[t - 1], y, -1.0);
        }
    }
    Ok(d_scores)
}

/// Hard constraints applied only at decode time.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMask {
    pub allowed: Vec<Vec<bool>>,
    pub start: Vec<bool>,
}

impl TransitionMask {
    /// IOB2 constraints: `I-X` may only follow `B-X` or `I-X`, never open a sentence.
    pub fn iob2(tags: &TagVocab) -> Self {
        TransitionMask {
            allowed: tags.allowed_transitions(),
            start: tags.allowed_starts(),
        }
    }
}

/// Highest-scoring path; ties go to the lowest tag index.
pub fn viterbi(scores: &Matrix, params: &CrfParams) -> Result<Vec<usize>> {
    viterbi_masked(scores, params, None)
}

pub fn viterbi_masked(scores: &Matrix, params: &CrfParams, mask: Option<&TransitionMask>) -> Result<Vec<usize>> {
    check_scores(scores, params)?;
    let (l, n) = scores.shape();
    let trans = |i: usize, j: usize| match mask {
        Some(m) if !m.allowed[i][j] => f64::NEG_INFINITY,
        _ => params.transition.get(i, j),
    };
    let mut delta: Vec<f64> = (0..n)
        .map(|j| match mask {
            Some(m) if !m.start[j] => f64::NEG_INFINITY,
            _ => params.start.get(0, j) + scores.get(0, j),
        })
        .collect();
    let mut back = vec![vec![0usize; n]; l];
    for t in 1..l {
        let mut next = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, d) in delta.iter().enumerate() {
                let v = d + trans(i, j);
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + scores.get(t, j);
            back[t][j] = arg;
        }
        delta = next;
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, d) in delta.iter().enumerate() {
        let v = d + params.end.get(0, j);
        if v > best {
            best = v;
            last = j;
        }
    }
    let mut path = vec![0usize; l];
    path[l - 1] = last;
    for t in (1..l).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}
