//! The full tagger: encoder (θ), CRF decoder (φ) and domain head (ω).

use rand::Rng;

use crate::classifier::{cls_backward_into, cls_loss, ClassifierParams};
use crate::crf::{emissions, emissions_backward, nll, nll_backward_into, viterbi_masked, CrfParams, TransitionMask};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{encode, encode_backward_into, pool, pool_backward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{prefixed, ParamGroup};
use crate::tensor::Matrix;
use crate::vocab::{EncodedSentence, Vocabularies};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: EncoderParams,
    pub phi: CrfParams,
    /// Absent after adaptation to a target domain.
    pub omega: Option<ClassifierParams>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        vocabs: &Vocabularies,
        num_domains: usize,
        pretrained: Option<&EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = EncoderParams::init(cfg, &vocabs.tokens, Some(&vocabs.chars), pretrained, rng)?;
        let h = theta.output_dim();
        let phi = CrfParams::init(h, vocabs.tags.len(), rng);
        let omega = ClassifierParams::init(h, num_domains, rng);
        Ok(ModelParams {
            theta,
            phi,
            omega: Some(omega),
        })
    }

    pub fn check_dims(&self) -> Result<()> {
        self.theta.check_dims()?;
        let h = self.theta.output_dim();
        if self.phi.input_dim() != h {
            return Err(Error::DimensionMismatch(format!(
                "decoder expects {}-d features, encoder produces {h}",
                self.phi.input_dim()
            )));
        }
        if let Some(o) = &self.omega {
            if o.input_dim() != h {
                return Err(Error::DimensionMismatch(format!(
                    "classifier expects {}-d features, encoder produces {h}",
                    o.input_dim()
                )));
            }
        }
        Ok(())
    }
}

impl ParamGroup for ModelParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = prefixed("theta", self.theta.tensors());
        v.extend(prefixed("phi", self.phi.tensors()));
        if let Some(o) = &self.omega {
            v.extend(prefixed("omega", o.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.theta.tensors_mut();
        v.extend(self.phi.tensors_mut());
        if let Some(o) = &mut self.omega {
            v.extend(o.tensors_mut());
        }
        v
    }
}

/// Mean losses over a set of sentences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetLoss {
    pub lab: f64,
    pub cls: f64,
}

/// What the backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Weight of the classification loss in the encoder gradient.
    pub lambda: f64,
    /// Evaluate the domain head at all (needs `omega` and a domain).
    pub classify: bool,
}

/// Losses of `sentences` (all from `domain`) and optionally gradients:
/// `theta` gets `∇θ(lab + λ·cls)`, `phi` gets `∇φ lab`, `omega` gets `∇ω cls`.
pub fn set_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    sentences: &[&EncodedSentence],
    domain: usize,
    objective: Objective,
    dropout: f64,
    mut rng: Option<&mut R>,
    want_grad: bool,
) -> Result<(SetLoss, Option<ModelParams>)> {
    if sentences.is_empty() {
        return Err(Error::DimensionMismatch("empty sentence set".into()));
    }
    let n = sentences.len() as f64;
    let classify = objective.classify && params.omega.is_some();

    let mut lab = 0.0;
    let mut fwd = Vec::with_capacity(sentences.len());
    for s in sentences {
        let (features, enc_cache) = encode(&params.theta, s, dropout, rng.as_deref_mut())?;
        let scores = emissions(&params.phi, &features)?;
        let (loss, nll_cache) = nll(&scores, &s.tag_ids, &params.phi)?;
        lab += loss;
        fwd.push((features, enc_cache, nll_cache));
    }
    lab /= n;

    let mut cls = 0.0;
    let mut cls_cache = None;
    if classify {
        let pooled: Vec<Vec<f64>> = fwd.iter().map(|(f, _, _)| pool(f)).collect();
        let (loss, cache) = cls_loss(params.omega.as_ref().unwrap(), &pooled, domain)?;
        cls = loss;
        cls_cache = Some(cache);
    }
    let loss = SetLoss { lab, cls };
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = params.zeros_like();
    let d_pooled = match (&cls_cache, &params.omega, &mut grad.omega) {
        (Some(cache), Some(omega), Some(g_omega)) => Some(cls_backward_into(omega, cache, 1.0, g_omega)?),
        _ => None,
    };

    let mut crf_sums = params.phi.zeros_like();
    for (idx, (features, enc_cache, nll_cache)) in fwd.iter().enumerate() {
        let mut d_scores = nll_backward_into(&params.phi, nll_cache, &mut crf_sums)?;
        d_scores.scale(1.0 / n);
        let mut d_features = emissions_backward(&params.phi, features, &d_scores, &mut grad.phi);
        if let Some(dp) = &d_pooled {
            if objective.lambda != 0.0 {
                let dp_scaled: Vec<f64> = dp[idx].iter().map(|v| v * objective.lambda).collect();
                d_features.axpy(1.0, &pool_backward(&dp_scaled, features.rows()));
            }
        }
        encode_backward_into(&params.theta, enc_cache, &d_features, &mut grad.theta)?;
    }
    grad.phi.transition.axpy(1.0 / n, &crf_sums.transition);
    grad.phi.start.axpy(1.0 / n, &crf_sums.start);
    grad.phi.end.axpy(1.0 / n, &crf_sums.end);
    Ok((loss, Some(grad)))
}

/// Viterbi decode under IOB2 constraints, dropout off.
pub fn predict(params: &ModelParams, sentence: &EncodedSentence, mask: &TransitionMask) -> Result<Vec<usize>> {
    let (features, _) = encode::<crate::rng::StreamRng>(&params.theta, sentence, 0.0, None)?;
    let scores = emissions(&params.phi, &features)?;
    viterbi_masked(&scores, &params.phi, Some(mask))
}
