//! Auxiliary branch: probe points along the clean-to-adversarial segment,
//! one reverse (gradient-ascent) step to build the auxiliary model, and the
//! momentum direction `p` from adversarially training that model.

use rand::Rng;

use crate::attacks::{run_attack, AdvBatch, AttackKind, AttackSpec, Bounds};
use crate::autodiff::Tensor;
use crate::error::{HfatError, Result};
use crate::model::{ModelWeights, ParamGrads};

/// Probe noise is uniform in `[-eps/NOISE_DIVISOR, eps/NOISE_DIVISOR]`.
pub const NOISE_DIVISOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    pub x_probe: Tensor,
    pub r_used: f64,
    pub noise_scale: f64,
}

/// Gradient of the auxiliary model's adversarial loss, laid out like the
/// main model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumP(pub ParamGrads);

impl MomentumP {
    pub fn grads(&self) -> &ParamGrads {
        &self.0
    }
}

/// `x + clamp_ball(r·(x_adv − x) + u)`, then clamped into the domain.
///
/// `u` is uniform per coordinate in `±eps/10` when `noise` is given, zero
/// otherwise. Noise is added after the interpolation.
pub fn transform_t<R: Rng + ?Sized>(
    x: &Tensor,
    x_adv: &Tensor,
    r: f64,
    eps: f64,
    noise: Option<&mut R>,
    bounds: Option<Bounds>,
) -> Result<ProbePoint> {
    if x.shape() != x_adv.shape() {
        return Err(HfatError::dim("transform_t", x.shape(), x_adv.shape()));
    }
    if !r.is_finite() || r < 0.0 {
        return Err(HfatError::Contract(format!("ratio must be finite and ≥ 0, got {r}")));
    }
    let noise_scale = if noise.is_some() { eps / NOISE_DIVISOR } else { 0.0 };
    let mut offset = x_adv.sub(x)?.map(|d| r * d);
    if let Some(rng) = noise {
        if noise_scale > 0.0 {
            for v in offset.data_mut() {
                *v += rng.random_range(-noise_scale..=noise_scale);
            }
        }
    }
    let mut x_probe = x.clone();
    for ((p, &o), &a) in x_probe.data_mut().iter_mut().zip(offset.data()).zip(x_adv.data()) {
        // interpolation form inside the ball keeps both endpoints exact; the
        // slack absorbs rounding in `x_adv − x` for points on the boundary
        let v = if o.abs() <= eps * (1.0 + 1e-12) {
            (1.0 - r) * *p + r * a + (o - r * (a - *p))
        } else {
            *p + o.clamp(-eps, eps)
        };
        *p = bounds.map_or(v, |b| b.clamp(v));
    }
    Ok(ProbePoint {
        x_probe,
        r_used: r,
        noise_scale,
    })
}

/// `θ̂ = θ + η·∇θ L_CE(f_θ(probe), y)`; `theta` is left untouched.
pub fn reverse_train_step(
    theta: &ModelWeights,
    probe: &ProbePoint,
    y: &[usize],
    eta: f64,
) -> Result<ModelWeights> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(HfatError::Contract(format!("reverse-training rate must be ≥ 0, got {eta}")));
    }
    if eta == 0.0 {
        return Ok(theta.clone());
    }
    let (_, grads) = theta.loss_and_grads(&probe.x_probe, y)?;
    theta.offset(&grads, eta)
}

/// `steps` successive ascent steps on the same probe batch.
pub fn reverse_train(
    theta: &ModelWeights,
    probe: &ProbePoint,
    y: &[usize],
    eta: f64,
    steps: usize,
) -> Result<ModelWeights> {
    let mut hat = theta.clone();
    for _ in 0..steps {
        hat = reverse_train_step(&hat, probe, y, eta)?;
    }
    Ok(hat)
}

/// PGD on the auxiliary model, then the gradient of `L_CE` at `x + δ*` with
/// respect to the auxiliary weights. Returns `p` and the attack batch.
pub fn compute_momentum_p<R: Rng + ?Sized>(
    theta: &ModelWeights,
    theta_hat: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    aux_attack: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<(MomentumP, AdvBatch)> {
    if theta.spec() != theta_hat.spec() {
        return Err(HfatError::Contract(format!(
            "auxiliary model shape {:?} differs from main model {:?}",
            theta_hat.spec().layer_sizes,
            theta.spec().layer_sizes
        )));
    }
    if aux_attack.kind != AttackKind::Pgd {
        return Err(HfatError::Contract(format!(
            "auxiliary attack must be pgd, got {}",
            aux_attack.kind.as_str()
        )));
    }
    if aux_attack.steps == 0 {
        return Err(HfatError::Contract("auxiliary attack needs at least one step".into()));
    }
    let adv = run_attack(theta_hat, x, y, aux_attack, bounds, rng)?;
    let (_, grads) = theta_hat.loss_and_grads(&adv.x_adv, y)?;
    grads.check_congruent(theta)?;
    Ok((MomentumP(grads), adv))
}
