use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{HfatError, Result};
use crate::model::{ModelWeights, ParamGrads};

/// Clamp on `KL_aux − KL_main` before the logistic; keeps both weights
/// strictly inside `(0, 1)` in double precision.
const LOGIT_CLAMP: f64 = 36.0;

#[allow(non_snake_case)]
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub lambda_S: f64,
    pub lambda_A: f64,
}

impl WeightPair {
    /// Static weights are not normalized: `lambda_S` stays 1.
    pub fn fixed(lambda_a: f64) -> Self {
        WeightPair {
            lambda_S: 1.0,
            lambda_A: lambda_a,
        }
    }
}

/// `lambda_A = e^{KL_aux} / (e^{KL_main} + e^{KL_aux})`, evaluated as a
/// logistic of the difference so large KLs do not overflow.
pub fn lambda_from_kls(kl_main: f64, kl_aux: f64) -> Result<WeightPair> {
    if !kl_main.is_finite() || !kl_aux.is_finite() {
        return Err(HfatError::Numeric(format!(
            "non-finite KL in lambda computation: main {kl_main}, aux {kl_aux}"
        )));
    }
    let d = (kl_aux - kl_main).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let lambda_a = if d == 0.0 { 0.5 } else { 1.0 / (1.0 + (-d).exp()) };
    Ok(WeightPair {
        lambda_S: 1.0 - lambda_a,
        lambda_A: lambda_a,
    })
}

/// Batch-mean `KL(f(x) ‖ f(x'))`.
pub fn mean_kl(model: &ModelWeights, x: &Tensor, x_prime: &Tensor) -> Result<f64> {
    if x.shape() != x_prime.shape() {
        return Err(HfatError::dim("mean_kl", x.shape(), x_prime.shape()));
    }
    let tape = Tape::new();
    let p = tape.constant(model.forward(x)?);
    let q = tape.constant(model.forward(x_prime)?);
    let kl = p.kl_divergence(&q)?;
    let v = kl.value().item();
    Ok(v)
}

/// Adaptive branch weights. Each KL uses that branch's own adversarial
/// batch; nothing is differentiated through the result.
pub fn adaptive_lambda(
    theta: &ModelWeights,
    theta_hat: &ModelWeights,
    x: &Tensor,
    x_adv_main: &Tensor,
    x_adv_aux: &Tensor,
) -> Result<WeightPair> {
    let kl_main = mean_kl(theta, x, x_adv_main)?;
    let kl_aux = mean_kl(theta_hat, x, x_adv_aux)?;
    lambda_from_kls(kl_main, kl_aux)
}

/// `lambda_S · g_main + lambda_A · p`.
pub fn combine_gradients(g_main: &ParamGrads, p: &ParamGrads, pair: WeightPair) -> Result<ParamGrads> {
    g_main.lin_comb(pair.lambda_S, p, pair.lambda_A)
}

/// Heavy-ball velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: ParamGrads,
}

impl SgdState {
    pub fn new(w: &ModelWeights) -> Self {
        SgdState {
            velocity: ParamGrads::zeros_like(w),
        }
    }

    pub fn reset(&mut self) {
        for t in self.velocity.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

/// `v ← m·v + g + wd·θ`, then `θ ← θ − lr·v`.
pub fn sgd_momentum_step(
    theta: &mut ModelWeights,
    grad: &ParamGrads,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    grad.check_congruent(theta)?;
    state.velocity.check_congruent(theta)?;
    let mut next = theta.clone();
    let mut velocity = state.velocity.clone();
    for ((p, v), g) in next
        .params_mut()
        .iter_mut()
        .zip(velocity.tensors_mut())
        .zip(grad.tensors())
    {
        for ((pk, vk), &gk) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vk = momentum * *vk + gk + weight_decay * *pk;
            *pk -= lr * *vk;
        }
    }
    if !next.is_finite() || !velocity.is_finite() {
        return Err(HfatError::Numeric("non-finite weights after SGD step".into()));
    }
    *theta = next;
    state.velocity = velocity;
    Ok(())
}
