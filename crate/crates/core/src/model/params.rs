use crate::autodiff::{Gradients, Tensor, Var};
use crate::error::{HfatError, Result};

use super::ModelWeights;

/// Gradient (or velocity) laid out exactly like [`ModelWeights`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(w: &ModelWeights) -> Self {
        ParamGrads(w.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        ParamGrads(tensors)
    }

    /// Pulls the gradients of bound parameter leaves out of a backward pass.
    pub fn collect(params: &[Var<'_>], mut grads: Gradients) -> Result<Self> {
        let mut out = Vec::with_capacity(params.len());
        for p in params {
            let g = match grads.take(p) {
                Some(g) => g,
                None => Tensor::zeros(&p.shape()),
            };
            if !g.is_finite() {
                return Err(HfatError::Numeric("non-finite parameter gradient".into()));
            }
            out.push(g);
        }
        Ok(ParamGrads(out))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.0
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.0
    }

    pub fn check_congruent(&self, w: &ModelWeights) -> Result<()> {
        if self.0.len() != w.params().len() {
            return Err(HfatError::Contract(format!(
                "gradient has {} tensors, model has {}",
                self.0.len(),
                w.params().len()
            )));
        }
        for (g, p) in self.0.iter().zip(w.params()) {
            if g.shape() != p.shape() {
                return Err(HfatError::dim("param_grads", g.shape(), p.shape()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// `a·self + b·other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &ParamGrads, b: f64) -> Result<ParamGrads> {
        if self.0.len() != other.0.len() {
            return Err(HfatError::Contract("gradient layouts differ".into()));
        }
        self.0
            .iter()
            .zip(&other.0)
            .map(|(x, y)| x.zip_map(y, |u, v| a * u + b * v))
            .collect::<Result<Vec<_>>>()
            .map(ParamGrads)
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|t| t.data().iter().copied())
    }
}
