//! Named-tensor views over parameter groups.
//!
//! Gradients reuse the parameter structs, so every optimiser and
//! aggregation routine works on any group through [`ParamGroup`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Matrix;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter state, refreshed on every mutable access.
/// Ignored by equality.
#[derive(Debug, Clone, Copy)]
pub struct Generation(u64);

impl Generation {
    pub fn fresh() -> Self {
        Generation(NEXT_GENERATION.fetch_add(1, Ordering::Relaxed))
    }

    pub fn id(&self) -> u64 {
        self.0
    }
}

impl Default for Generation {
    fn default() -> Self {
        Generation::fresh()
    }
}

impl PartialEq for Generation {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

pub trait ParamGroup: Clone {
    /// Tensors in a fixed order with stable names.
    fn tensors(&self) -> Vec<(String, &Matrix)>;

    /// Mutable tensors in the same order as [`ParamGroup::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn norm_sq(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.norm_sq()).sum()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`
    fn axpy(&mut self, alpha: f64, other: &Self) {
        let src: Vec<&Matrix> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(alpha, s);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors().into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }

    /// Bitwise comparison of all tensors.
    fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .as_slice()
                        .iter()
                        .zip(tb.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, v: Vec<(String, &'a Matrix)>) -> Vec<(String, &'a Matrix)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}
