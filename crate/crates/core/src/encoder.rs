//! Bidirectional LSTM sentence encoder with optional character features.
//!
//! Gate layout inside every LSTM weight matrix is `[input, forget, cell, output]`,
//! each block `hidden` rows tall.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::params::{prefixed, Generation, ParamGroup};
use crate::tensor::{sigmoid, Matrix};
use crate::vocab::{CharVocab, EncodedSentence, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    /// Concatenated output size of both directions; must be even.
    pub hidden_size: usize,
    pub char_features: bool,
    pub char_embedding_dim: usize,
    /// Output size of each of the character LSTM and CNN.
    pub char_output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 200,
            hidden_size: 256,
            char_features: false,
            char_embedding_dim: 25,
            char_output_dim: 50,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.embedding_dim
            + if self.char_features {
                2 * self.char_output_dim
            } else {
                0
            }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_size == 0 || self.hidden_size % 2 != 0 {
            return Err(Error::Config(format!(
                "encoder needs embedding_dim > 0 and an even hidden_size > 0, got {} / {}",
                self.embedding_dim, self.hidden_size
            )));
        }
        if self.char_features && (self.char_embedding_dim == 0 || self.char_output_dim == 0) {
            return Err(Error::Config("character feature sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Matrix,
    pub w_hh: Matrix,
    pub bias: Matrix,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmParams {
            w_ih: Matrix::uniform_init(4 * hidden, input, input, rng),
            w_hh: Matrix::uniform_init(4 * hidden, hidden, hidden, rng),
            bias: Matrix::uniform_init(1, 4 * hidden, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input(&self) -> usize {
        self.w_ih.cols()
    }

    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("bias".into(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
struct LstmStep {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `4 * hidden`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LstmCache {
    inputs: Vec<Vec<f64>>,
    steps: Vec<LstmStep>,
}

fn lstm_forward(p: &LstmParams, inputs: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, LstmCache) {
    let h = p.hidden();
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let mut z = p.bias.row(0).to_vec();
        p.w_ih.matvec_acc(x, &mut z);
        p.w_hh.matvec_acc(&h_prev, &mut z);
        for k in 0..h {
            z[k] = sigmoid(z[k]);
            z[h + k] = sigmoid(z[h + k]);
            z[2 * h + k] = z[2 * h + k].tanh();
            z[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for k in 0..h {
            c[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
            tanh_c[k] = c[k].tanh();
            h_new[k] = z[3 * h + k] * tanh_c[k];
        }
        steps.push(LstmStep {
            h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
            c_prev: std::mem::replace(&mut c_prev, c),
            gates: z,
            tanh_c,
        });
        outputs.push(h_new);
    }
    (outputs, LstmCache { inputs, steps })
}

/// Back-propagates `d_outputs` (one gradient per step output); returns input gradients.
fn lstm_backward(p: &LstmParams, cache: &LstmCache, d_outputs: &[Vec<f64>], grad: &mut LstmParams) -> Vec<Vec<f64>> {
    let h = p.hidden();
    let n = cache.steps.len();
    let mut d_inputs = vec![vec![0.0; p.input()]; n];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for t in (0..n).rev() {
        let st = &cache.steps[t];
        let g = &st.gates;
        for k in 0..h {
            let dh = d_outputs[t][k] + dh_next[k];
            let (i, f, cg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = st.tanh_c[k];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
            dz[k] = dc * cg * i * (1.0 - i);
            dz[h + k] = dc * st.c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - cg * cg);
            dz[3 * h + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        grad.w_ih.add_outer(&dz, &cache.inputs[t]);
        grad.w_hh.add_outer(&dz, &st.h_prev);
        crate::tensor::axpy(1.0, &dz, grad.bias.row_mut(0));
        p.w_ih.matvec_t_acc(&dz, &mut d_inputs[t]);
        dh_next.fill(0.0);
        p.w_hh.matvec_t_acc(&dz, &mut dh_next);
    }
    d_inputs
}

/// Character LSTM + CNN feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct CharParams {
    pub embedding: Matrix,
    pub lstm: LstmParams,
    pub cnn_weight: Matrix,
    pub cnn_bias: Matrix,
}

const CNN_WIDTH: usize = 3;

impl CharParams {
    fn init<R: Rng + ?Sized>(num_chars: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let ce = cfg.char_embedding_dim;
        CharParams {
            embedding: Matrix::uniform_init(num_chars, ce, ce, rng),
            lstm: LstmParams::init(ce, cfg.char_output_dim, rng),
            cnn_weight: Matrix::uniform_init(cfg.char_output_dim, CNN_WIDTH * ce, CNN_WIDTH * ce, rng),
            cnn_bias: Matrix::uniform_init(1, cfg.char_output_dim, CNN_WIDTH * ce, rng),
        }
    }

    fn output_dim(&self) -> usize {
        self.cnn_bias.cols()
    }

    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(prefixed("lstm", self.lstm.tensors()));
        v.push(("cnn_weight".into(), &self.cnn_weight));
        v.push(("cnn_bias".into(), &self.cnn_bias));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.lstm.tensors_mut());
        v.push(&mut self.cnn_weight);
        v.push(&mut self.cnn_bias);
        v
    }
}

#[derive(Debug, Clone)]
struct CharCache {
    char_ids: Vec<usize>,
    lstm: LstmCache,
    windows: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    argmax: Vec<usize>,
}

fn char_forward(p: &CharParams, char_ids: &[usize]) -> (Vec<f64>, CharCache) {
    // Empty tokens cannot occur (whitespace-split), but guard with one unknown char.
    let ids: Vec<usize> = if char_ids.is_empty() {
        vec![0]
    } else {
        char_ids.to_vec()
    };
    let ce = p.embedding.cols();
    let embs: Vec<Vec<f64>> = ids.iter().map(|&c| p.embedding.row(c).to_vec()).collect();
    let (hs, lstm) = lstm_forward(&p.lstm, embs.clone());
    let mut out = hs.last().cloned().unwrap_or_default();

    let n = ids.len();
    let d = p.output_dim();
    let mut windows = Vec::with_capacity(n);
    let mut activations = Vec::with_capacity(n);
    for j in 0..n {
        let mut w = vec![0.0; CNN_WIDTH * ce];
        for off in 0..CNN_WIDTH {
            let pos = j as isize + off as isize - 1;
            if pos >= 0 && (pos as usize) < n {
                w[off * ce..(off + 1) * ce].copy_from_slice(&embs[pos as usize]);
            }
        }
        let mut z = p.cnn_bias.row(0).to_vec();
        p.cnn_weight.matvec_acc(&w, &mut z);
        z.iter_mut().for_each(|v| *v = v.tanh());
        windows.push(w);
        activations.push(z);
    }
    let mut argmax = vec![0usize; d];
    for k in 0..d {
        for j in 1..n {
            if activations[j][k] > activations[argmax[k]][k] {
                argmax[k] = j;
            }
        }
        out.push(activations[argmax[k]][k]);
    }
    (
        out,
        CharCache {
            char_ids: ids,
            lstm,
            windows,
            activations,
            argmax,
        },
    )
}

fn char_backward(p: &CharParams, cache: &CharCache, d_out: &[f64], grad: &mut CharParams) {
    let d = p.output_dim();
    let ce = p.embedding.cols();
    let n = cache.char_ids.len();
    let mut d_embs = vec![vec![0.0; ce]; n];

    let mut d_hs = vec![vec![0.0; d]; n];
    d_hs[n - 1].copy_from_slice(&d_out[..d]);
    let d_lstm_in = lstm_backward(&p.lstm, &cache.lstm, &d_hs, &mut grad.lstm);
    for (de, dl) in d_embs.iter_mut().zip(&d_lstm_in) {
        crate::tensor::axpy(1.0, dl, de);
    }

    let mut dz_by_pos = vec![vec![0.0; d]; n];
    for k in 0..d {
        let j = cache.argmax[k];
        let a = cache.activations[j][k];
        dz_by_pos[j][k] += d_out[d + k] * (1.0 - a * a);
    }
    for j in 0..n {
        let dz = &dz_by_pos[j];
        if dz.iter().all(|v| *v == 0.0) {
            continue;
        }
        grad.cnn_weight.add_outer(dz, &cache.windows[j]);
        crate::tensor::axpy(1.0, dz, grad.cnn_bias.row_mut(0));
        let mut dw = vec![0.0; CNN_WIDTH * ce];
        p.cnn_weight.matvec_t_acc(dz, &mut dw);
        for off in 0..CNN_WIDTH {
            let pos = j as isize + off as isize - 1;
            if pos >= 0 && (pos as usize) < n {
                crate::tensor::axpy(1.0, &dw[off * ce..(off + 1) * ce], &mut d_embs[pos as usize]);
            }
        }
    }
    for (c, de) in cache.char_ids.iter().zip(&d_embs) {
        crate::tensor::axpy(1.0, de, grad.embedding.row_mut(*c));
    }
}

/// Parameter group θ.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Matrix,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub chars: Option<CharParams>,
    generation: Generation,
}

impl EncoderParams {
    /// Random initialisation. Embedding rows come from `pretrained` when
    /// given (unknown tokens follow its policy), otherwise uniform.
    pub fn init<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        vocab: &Vocab,
        chars: Option<&CharVocab>,
        pretrained: Option<&EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embedding_dim;
        let embedding = match pretrained {
            Some(table) => {
                if table.dimension() != e {
                    return Err(Error::DimensionMismatch(format!(
                        "embedding file is {}-d, encoder expects {e}",
                        table.dimension()
                    )));
                }
                let mut m = Matrix::zeros(vocab.len(), e);
                for (i, tok) in vocab.items().iter().enumerate().skip(1) {
                    let v = table.lookup(tok, rng);
                    m.row_mut(i).copy_from_slice(&v);
                }
                m
            }
            None => {
                let mut m = Matrix::uniform_init(vocab.len(), e, e, rng);
                m.row_mut(0).fill(0.0);
                m
            }
        };
        let half = cfg.hidden_size / 2;
        let input = cfg.input_dim();
        let forward = LstmParams::init(input, half, rng);
        let backward = LstmParams::init(input, half, rng);
        let chars = if cfg.char_features {
            let n = chars.map_or(1, CharVocab::len);
            Some(CharParams::init(n, cfg, rng))
        } else {
            None
        };
        Ok(EncoderParams {
            embedding,
            forward,
            backward,
            chars,
            generation: Generation::fresh(),
        })
    }

    pub fn from_parts(
        embedding: Matrix,
        forward: LstmParams,
        backward: LstmParams,
        chars: Option<CharParams>,
    ) -> Result<Self> {
        let p = EncoderParams {
            embedding,
            forward,
            backward,
            chars,
            generation: Generation::fresh(),
        };
        p.check_dims()?;
        Ok(p)
    }

    pub fn check_dims(&self) -> Result<()> {
        let input = self.input_dim();
        let half = self.forward.hidden();
        let ok = |l: &LstmParams, input: usize, h: usize| {
            l.w_ih.shape() == (4 * h, input) && l.w_hh.shape() == (4 * h, h) && l.bias.shape() == (1, 4 * h)
        };
        let mut good = ok(&self.forward, input, half) && ok(&self.backward, input, half);
        if let Some(c) = &self.chars {
            let ce = c.embedding.cols();
            let d = c.output_dim();
            good &= ok(&c.lstm, ce, d) && c.cnn_weight.shape() == (d, CNN_WIDTH * ce);
        }
        if good {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("inconsistent encoder tensor shapes".into()))
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.embedding_dim() + self.chars.as_ref().map_or(0, |c| 2 * c.output_dim())
    }

    /// Width of the token features (both directions).
    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn generation(&self) -> u64 {
        self.generation.id()
    }
}

impl ParamGroup for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(prefixed("forward", self.forward.tensors()));
        v.extend(prefixed("backward", self.backward.tensors()));
        if let Some(c) = &self.chars {
            v.extend(prefixed("chars", c.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.generation = Generation::fresh();
        let mut v = vec![&mut self.embedding];
        v.extend(self.forward.tensors_mut());
        v.extend(self.backward.tensors_mut());
        if let Some(c) = &mut self.chars {
            v.extend(c.tensors_mut());
        }
        v
    }
}

/// Activations kept from [`encode`] for [`encode_backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    generation: u64,
    token_ids: Vec<usize>,
    dropout_mask: Vec<Vec<f64>>,
    chars: Vec<CharCache>,
    forward: LstmCache,
    backward: LstmCache,
}

/// Encodes one sentence into an `L x H` feature matrix.
///
/// Dropout at `dropout` is applied to the input vectors when an RNG is given
/// (training mode); with `rng = None` the encoder is deterministic and dropout-free.
pub fn encode<R: Rng + ?Sized>(
    params: &EncoderParams,
    sentence: &EncodedSentence,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<(Matrix, EncoderCache)> {
    let l = sentence.len();
    if l == 0 {
        return Err(Error::DimensionMismatch("empty sentence".into()));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
    }
    if let Some(&bad) = sentence.token_ids.iter().find(|&&t| t >= params.vocab_size()) {
        return Err(Error::DimensionMismatch(format!(
            "token id {bad} outside a vocabulary of {}",
            params.vocab_size()
        )));
    }
    if params.chars.is_some() && sentence.char_ids.len() != l {
        return Err(Error::DimensionMismatch("missing character ids".into()));
    }

    let mut inputs = Vec::with_capacity(l);
    let mut char_caches = Vec::new();
    for (t, &tok) in sentence.token_ids.iter().enumerate() {
        let mut x = params.embedding.row(tok).to_vec();
        if let Some(cp) = &params.chars {
            if let Some(&bad) = sentence.char_ids[t].iter().find(|&&c| c >= cp.embedding.rows()) {
                return Err(Error::DimensionMismatch(format!("char id {bad} out of range")));
            }
            let (feat, cache) = char_forward(cp, &sentence.char_ids[t]);
            x.extend_from_slice(&feat);
            char_caches.push(cache);
        }
        inputs.push(x);
    }

    let width = params.input_dim();
    let mask: Vec<Vec<f64>> = match rng {
        Some(rng) if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            (0..l)
                .map(|_| {
                    (0..width)
                        .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep })
                        .collect()
                })
                .collect()
        }
        _ => Vec::new(),
    };
    if !mask.is_empty() {
        for (x, m) in inputs.iter_mut().zip(&mask) {
            x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
    }

    let reversed: Vec<Vec<f64>> = inputs.iter().rev().cloned().collect();
    let (hf, fwd_cache) = lstm_forward(&params.forward, inputs);
    let (hb, bwd_cache) = lstm_forward(&params.backward, reversed);

    let half = params.forward.hidden();
    let mut out = Matrix::zeros(l, 2 * half);
    for t in 0..l {
        let row = out.row_mut(t);
        row[..half].copy_from_slice(&hf[t]);
        row[half..].copy_from_slice(&hb[l - 1 - t]);
    }
    Ok((
        out,
        EncoderCache {
            generation: params.generation(),
            token_ids: sentence.token_ids.clone(),
            dropout_mask: mask,
            chars: char_caches,
            forward: fwd_cache,
            backward: bwd_cache,
        },
    ))
}

/// Accumulates parameter gradients for `upstream = dLoss/dFeatures` into `grad`.
pub fn encode_backward_into(
    params: &EncoderParams,
    cache: &EncoderCache,
    upstream: &Matrix,
    grad: &mut EncoderParams,
) -> Result<()> {
    if cache.generation != params.generation() {
        return Err(Error::StaleCache);
    }
    let l = cache.token_ids.len();
    let half = params.forward.hidden();
    if upstream.shape() != (l, 2 * half) {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient {:?}, features are {l}x{}",
            upstream.shape(),
            2 * half
        )));
    }
    let d_fwd: Vec<Vec<f64>> = (0..l).map(|t| upstream.row(t)[..half].to_vec()).collect();
    let d_bwd: Vec<Vec<f64>> = (0..l).map(|t| upstream.row(l - 1 - t)[half..].to_vec()).collect();
    let mut d_inputs = lstm_backward(&params.forward, &cache.forward, &d_fwd, &mut grad.forward);
    let d_rev = lstm_backward(&params.backward, &cache.backward, &d_bwd, &mut grad.backward);
    for t in 0..l {
        crate::tensor::axpy(1.0, &d_rev[l - 1 - t], &mut d_inputs[t]);
    }
    if !cache.dropout_mask.is_empty() {
        for (d, m) in d_inputs.iter_mut().zip(&cache.dropout_mask) {
            d.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
    }
    let e = params.embedding_dim();
    for (t, &tok) in cache.token_ids.iter().enumerate() {
        crate::tensor::axpy(1.0, &d_inputs[t][..e], grad.embedding.row_mut(tok));
    }
    if let (Some(cp), Some(cg)) = (&params.chars, &mut grad.chars) {
        for (t, cc) in cache.chars.iter().enumerate() {
            char_backward(cp, cc, &d_inputs[t][e..], cg);
        }
    }
    Ok(())
}

/// Gradient of `sum(upstream * features)` with respect to θ.
pub fn encode_backward(params: &EncoderParams, cache: &EncoderCache, upstream: &Matrix) -> Result<EncoderParams> {
    let mut grad = params.zeros_like();
    encode_backward_into(params, cache, upstream, &mut grad)?;
    Ok(grad)
}

/// Mean over token rows.
pub fn pool(features: &Matrix) -> Vec<f64> {
    let l = features.rows();
    assert!(l > 0, "pool needs at least one row");
    let mut out = vec![0.0; features.cols()];
    for r in 0..l {
        crate::tensor::axpy(1.0, features.row(r), &mut out);
    }
    out.iter_mut().for_each(|v| *v /= l as f64);
    out
}

/// Gradient of [`pool`]: every row receives `d_pooled / L`.
pub fn pool_backward(d_pooled: &[f64], rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, d_pooled.len());
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        for (o, d) in m.row_mut(r).iter_mut().zip(d_pooled) {
            *o = d * inv;
        }
    }
    m
}
