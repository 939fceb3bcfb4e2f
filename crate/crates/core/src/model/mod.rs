//! MLP classifiers: initialization, forward pass, prediction and parameter
//! gradients.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::ParamGrads;
pub(crate) use checkpoint::write_atomic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{HfatError, Result};

/// Layer widths from input dimension to class count. Hidden layers are
/// followed by a rectifier; the last layer emits raw logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec { layer_sizes };
        spec.validate()?;
        Ok(spec)
    }

    /// `input → hidden… → classes`
    pub fn with_hidden(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        MlpSpec::new(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(HfatError::Spec(format!(
                "need at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(HfatError::Spec(format!(
                "layer size 0 in {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Shapes of the parameter tensors in declaration order:
    /// `W0 [in×out], b0 [out], W1, b1, …`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_sizes
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }
}

/// Weights of an [`MlpSpec`], tagged with the epoch that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    spec: MlpSpec,
    params: Vec<Tensor>,
    pub epoch_tag: u64,
}

impl ModelWeights {
    /// He-normal weights (std `sqrt(2/fan_in)`), zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * spec.n_layers());
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| HfatError::Spec(e.to_string()))?;
            let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], data)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(ModelWeights {
            spec: spec.clone(),
            params,
            epoch_tag: 0,
        })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>, epoch_tag: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(HfatError::Spec(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(HfatError::dim("from_params", s, p.shape()));
            }
            if !p.is_finite() {
                return Err(HfatError::Numeric("non-finite weight".into()));
            }
        }
        Ok(ModelWeights {
            spec,
            params,
            epoch_tag,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(ModelWeights {
            spec: spec.clone(),
            params,
            epoch_tag: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass on a tape through previously bound parameters.
    pub fn forward_bound<'t>(&self, params: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let d = x.shape();
        if d.len() != 2 || d[1] != self.spec.input_dim() {
            return Err(HfatError::dim(
                "forward",
                &d,
                &[d.first().copied().unwrap_or(0), self.spec.input_dim()],
            ));
        }
        let n_layers = self.spec.n_layers();
        let mut h = *x;
        for l in 0..n_layers {
            h = h.matmul(&params[2 * l])?.add_bias(&params[2 * l + 1])?;
            if l + 1 < n_layers {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Raw logits `B × C` for inputs `B × d`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_bound(&params, &xv)?;
        let logits = out.value().clone();
        Ok(logits)
    }

    /// Argmax label per row; ties resolve to the smallest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(predict_from_logits(&logits))
    }

    /// Mean cross-entropy at `(x, y)` and its gradient with respect to the
    /// parameters.
    pub fn loss_and_grads(&self, x: &Tensor, y: &[usize]) -> Result<(f64, ParamGrads)> {
        let tape = Tape::new();
        let params = self.bind(&tape, true);
        let xv = tape.constant(x.clone());
        let loss = self.forward_bound(&params, &xv)?.cross_entropy(y)?;
        let value = loss.value().item();
        let grads = loss.backward()?;
        Ok((value, ParamGrads::collect(&params, grads)?))
    }

    /// Mean cross-entropy at `(x, y)` without gradients.
    pub fn loss(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let loss = self.forward_bound(&params, &xv)?.cross_entropy(y)?;
        let v = loss.value().item();
        Ok(v)
    }

    /// `self + scale · grads`, as a new snapshot.
    pub fn offset(&self, grads: &ParamGrads, scale: f64) -> Result<ModelWeights> {
        grads.check_congruent(self)?;
        let params = self
            .params
            .iter()
            .zip(grads.tensors())
            .map(|(p, g)| p.zip_map(g, |a, b| a + scale * b))
            .collect::<Result<Vec<_>>>()?;
        let out = ModelWeights {
            spec: self.spec.clone(),
            params,
            epoch_tag: self.epoch_tag,
        };
        if !out.is_finite() {
            return Err(HfatError::Numeric("non-finite weights after update".into()));
        }
        Ok(out)
    }
}

pub fn predict_from_logits(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|r| kernels::argmax(logits.row(r))).collect()
}
