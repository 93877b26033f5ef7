//! Domain classifier head (parameter group ω): one linear layer + softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Generation, ParamGroup};
use crate::tensor::{log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `H x D`
    pub weight: Matrix,
    pub bias: Matrix,
    generation: Generation,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, num_domains: usize, rng: &mut R) -> Self {
        ClassifierParams {
            weight: Matrix::uniform_init(input_dim, num_domains, input_dim, rng),
            bias: Matrix::uniform_init(1, num_domains, input_dim, rng),
            generation: Generation::fresh(),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::DimensionMismatch("classifier bias width".into()));
        }
        Ok(ClassifierParams {
            weight,
            bias,
            generation: Generation::fresh(),
        })
    }

    pub fn num_domains(&self) -> usize {
        self.weight.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn generation(&self) -> u64 {
        self.generation.id()
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let mut z = self.bias.row(0).to_vec();
        self.weight.matvec_t_acc(pooled, &mut z);
        z
    }
}

impl ParamGroup for ClassifierParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.generation = Generation::fresh();
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct ClsCache {
    generation: u64,
    pooled: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    target: usize,
}

/// Mean cross-entropy of `softmax(W^T x + b)` against `true_domain` over the pooled sentences.
pub fn cls_loss(params: &ClassifierParams, pooled: &[Vec<f64>], true_domain: usize) -> Result<(f64, ClsCache)> {
    let d = params.num_domains();
    if true_domain >= d {
        return Err(Error::DomainIndexOutOfRange {
            index: true_domain,
            size: d,
        });
    }
    if pooled.is_empty() {
        return Err(Error::DimensionMismatch("no sentences to classify".into()));
    }
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(pooled.len());
    for x in pooled {
        if x.len() != params.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "pooled vector of width {}, classifier expects {}",
                x.len(),
                params.input_dim()
            )));
        }
        let z = params.logits(x);
        let lse = log_sum_exp(&z);
        total += lse - z[true_domain];
        probs.push(z.iter().map(|v| (v - lse).exp()).collect());
    }
    Ok((
        total / pooled.len() as f64,
        ClsCache {
            generation: params.generation(),
            pooled: pooled.to_vec(),
            probs,
            target: true_domain,
        },
    ))
}

/// Parameter gradient and per-sentence gradients w.r.t. the pooled vectors.
pub fn cls_backward(params: &ClassifierParams, cache: &ClsCache) -> Result<(ClassifierParams, Vec<Vec<f64>>)> {
    let mut grad = params.zeros_like();
    let d_pooled = cls_backward_into(params, cache, 1.0, &mut grad)?;
    Ok((grad, d_pooled))
}

/// Accumulates `scale * dLoss/dω` into `grad`; the returned pooled gradients carry the same scale.
pub fn cls_backward_into(
    params: &ClassifierParams,
    cache: &ClsCache,
    scale: f64,
    grad: &mut ClassifierParams,
) -> Result<Vec<Vec<f64>>> {
    if cache.generation != params.generation() {
        return Err(Error::StaleCache);
    }
    let n = cache.pooled.len() as f64;
    let mut d_pooled = Vec::with_capacity(cache.pooled.len());
    for (x, p) in cache.pooled.iter().zip(&cache.probs) {
        let mut dz: Vec<f64> = p.iter().map(|v| v * scale / n).collect();
        dz[cache.target] -= scale / n;
        grad.weight.add_outer(x, &dz);
        crate::tensor::axpy(1.0, &dz, grad.bias.row_mut(0));
        let mut dx = vec![0.0; x.len()];
        params.weight.matvec_acc(&dz, &mut dx);
        d_pooled.push(dx);
    }
    Ok(d_pooled)
}
