//! ℓ∞ inner-maximization solvers.
//!
//! All iterative attacks share one loop: take the sign of a search direction,
//! step by `alpha`, project onto the ε-ball, then clamp `x + δ` into the
//! input domain. They differ only in the objective and in how the direction
//! is formed (raw gradient, L1-normalized momentum, or descent on a margin).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor};
use crate::error::{HfatError, Result};
use crate::model::ModelWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
    Cw,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
            AttackKind::Cw => "cw",
        }
    }
}

fn default_steps() -> usize {
    1
}

fn default_mim_decay() -> f64 {
    1.0
}

/// Parameters of one inner-max solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub eps: f64,
    /// Step size; `eps / 4` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_mim_decay")]
    pub mim_decay: f64,
    #[serde(default)]
    pub cw_kappa: f64,
}

impl AttackSpec {
    fn base(kind: AttackKind, eps: f64, steps: usize) -> Self {
        AttackSpec {
            kind,
            eps,
            alpha: None,
            steps,
            random_start: false,
            mim_decay: default_mim_decay(),
            cw_kappa: 0.0,
        }
    }

    pub fn fgsm(eps: f64) -> Self {
        Self::base(AttackKind::Fgsm, eps, 1)
    }

    pub fn pgd(eps: f64, steps: usize) -> Self {
        Self::base(AttackKind::Pgd, eps, steps)
    }

    pub fn mim(eps: f64, steps: usize) -> Self {
        Self::base(AttackKind::Mim, eps, steps)
    }

    pub fn cw(eps: f64, steps: usize) -> Self {
        Self::base(AttackKind::Cw, eps, steps)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.eps / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(HfatError::Config(format!("eps must be ≥ 0, got {}", self.eps)));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(HfatError::Config(format!("alpha must be > 0, got {a}")));
            }
        }
        if self.steps == 0 {
            return Err(HfatError::Config("attack steps must be ≥ 1".into()));
        }
        if !self.mim_decay.is_finite() || !self.cw_kappa.is_finite() {
            return Err(HfatError::Config("non-finite attack parameter".into()));
        }
        Ok(())
    }
}

/// Per-coordinate input box. `None` in an API means unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Result of an attack on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub delta: Tensor,
    /// Mean objective at every iterate, starting point included.
    pub loss_trace: Vec<f64>,
}

/// Elementwise clamp of `delta` to `[-eps, eps]`.
pub fn project_linf(delta: &Tensor, eps: f64) -> Tensor {
    delta.map(|v| v.clamp(-eps, eps))
}

fn project_in_place(delta: &mut [f64], eps: f64) {
    for v in delta {
        *v = v.clamp(-eps, eps);
    }
}

/// `delta ← clamp(x + delta) − x`, and returns `clamp(x + delta)`.
fn apply_domain(x: &Tensor, delta: &mut Tensor, bounds: Option<Bounds>) -> Tensor {
    let mut x_adv = x.clone();
    for ((xa, d), &xv) in x_adv.data_mut().iter_mut().zip(delta.data_mut()).zip(x.data()) {
        match bounds {
            Some(b) => {
                *xa = b.clamp(xv + *d);
                *d = *xa - xv;
            }
            None => *xa = xv + *d,
        }
    }
    x_adv
}

/// Objective whose input gradient drives an attack.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy,
    /// Margin `max(z_y − max_{c≠y} z_c, −kappa)`; attacks descend it.
    Margin { kappa: f64 },
    /// `KL(softmax(clean) ‖ softmax(f(x')))`; used by the TRADES inner max.
    KlFrom { clean_logits: &'a Tensor },
}

/// Mean objective at `x` and its gradient with respect to `x`.
pub fn input_gradient(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    objective: Objective<'_>,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_bound(&params, &xv)?;
    let loss = match objective {
        Objective::CrossEntropy => logits.cross_entropy(y)?,
        Objective::Margin { kappa } => logits.margin_loss(y, kappa)?,
        Objective::KlFrom { clean_logits } => {
            let p = tape.constant(clean_logits.clone());
            p.kl_divergence(&logits)?
        }
    };
    let value = loss.value().item();
    let mut grads = loss.backward()?;
    let g = grads
        .take(&xv)
        .ok_or_else(|| HfatError::Contract("input gradient missing".into()))?;
    Ok((value, g))
}

fn uniform_start<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], eps: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if eps > 0.0 {
        for v in t.data_mut() {
            *v = rng.random_range(-eps..=eps);
        }
    }
    t
}

/// Runs `spec` against `model`, dispatching on `spec.kind`.
pub fn run_attack<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<AdvBatch> {
    run_attack_observed(model, x, y, spec, bounds, rng, &mut |_, _| {})
}

/// Like [`run_attack`], calling `observer(step, delta)` after every update.
pub fn run_attack_observed<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<AdvBatch> {
    spec.validate()?;
    if x.rows() != y.len() {
        return Err(HfatError::dim("attack", x.shape(), &[y.len()]));
    }
    if spec.kind == AttackKind::Cw && model.spec().n_classes() < 2 {
        return Err(HfatError::Contract("C&W margin attack needs C ≥ 2".into()));
    }
    let eps = spec.eps;
    let (steps, alpha) = match spec.kind {
        AttackKind::Fgsm => (1, eps),
        _ => (spec.steps, spec.step_size()),
    };
    let objective = match spec.kind {
        AttackKind::Cw => Objective::Margin {
            kappa: spec.cw_kappa,
        },
        _ => Objective::CrossEntropy,
    };
    // descent on the margin, ascent otherwise
    let ascent = if spec.kind == AttackKind::Cw { -1.0 } else { 1.0 };

    let mut delta = if spec.random_start && spec.kind != AttackKind::Fgsm {
        uniform_start(rng, x.shape(), eps)
    } else {
        Tensor::zeros(x.shape())
    };
    let mut x_adv = apply_domain(x, &mut delta, bounds);
    let mut momentum = Tensor::zeros(x.shape());
    let mut loss_trace = Vec::with_capacity(steps + 1);

    for step in 0..steps {
        let (loss, grad) = input_gradient(model, &x_adv, y, objective)?;
        loss_trace.push(loss);
        let direction = if spec.kind == AttackKind::Mim {
            for r in 0..x.rows() {
                let g = grad.row(r);
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                if l1 > 0.0 {
                    let m = momentum.row_mut(r);
                    for (mv, &gv) in m.iter_mut().zip(g) {
                        *mv = spec.mim_decay * *mv + gv / l1;
                    }
                }
            }
            &momentum
        } else {
            &grad
        };
        for (dv, &g) in delta.data_mut().iter_mut().zip(direction.data()) {
            *dv += alpha * kernels::sign(ascent * g);
        }
        project_in_place(delta.data_mut(), eps);
        x_adv = apply_domain(x, &mut delta, bounds);
        observer(step, &delta);
    }
    let final_loss = objective_value(model, &x_adv, y, objective)?;
    loss_trace.push(final_loss);
    Ok(AdvBatch {
        x_adv,
        delta,
        loss_trace,
    })
}

fn objective_value(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    objective: Objective<'_>,
) -> Result<f64> {
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let logits = model.forward_bound(&params, &xv)?;
    let loss = match objective {
        Objective::CrossEntropy => logits.cross_entropy(y)?,
        Objective::Margin { kappa } => logits.margin_loss(y, kappa)?,
        Objective::KlFrom { clean_logits } => tape.constant(clean_logits.clone()).kl_divergence(&logits)?,
    };
    let v = loss.value().item();
    Ok(v)
}

fn with_kind(spec: &AttackSpec, kind: AttackKind) -> AttackSpec {
    AttackSpec {
        kind,
        ..spec.clone()
    }
}

/// `x_adv = clamp(x + eps·sign(∇ₓ L_CE))`, with `sign(0) = 0`.
pub fn fgsm<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<AdvBatch> {
    run_attack(model, x, y, &with_kind(spec, AttackKind::Fgsm), bounds, rng)
}

pub fn pgd<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<AdvBatch> {
    run_attack(model, x, y, &with_kind(spec, AttackKind::Pgd), bounds, rng)
}

/// Momentum iterative method: `g ← decay·g + ∇/‖∇‖₁` per sample, step on
/// `sign(g)`. Samples with an all-zero gradient keep their previous `g`.
pub fn mim<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<AdvBatch> {
    run_attack(model, x, y, &with_kind(spec, AttackKind::Mim), bounds, rng)
}

/// PGD loop descending the C&W margin; `loss_trace` holds margin values.
pub fn cw_margin_pgd<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<AdvBatch> {
    run_attack(model, x, y, &with_kind(spec, AttackKind::Cw), bounds, rng)
}

/// Inner max of TRADES: ascend `KL(f(x) ‖ f(x'))` from `x + 0.001·N(0, I)`.
pub fn kl_pgd<R: Rng + ?Sized>(
    model: &ModelWeights,
    x: &Tensor,
    clean_logits: &Tensor,
    eps: f64,
    alpha: f64,
    steps: usize,
    bounds: Option<Bounds>,
    rng: &mut R,
) -> Result<AdvBatch> {
    let mut delta = Tensor::zeros(x.shape());
    if eps > 0.0 {
        for v in delta.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v = 0.001 * n;
        }
        project_in_place(delta.data_mut(), eps);
    }
    let mut x_adv = apply_domain(x, &mut delta, bounds);
    let objective = Objective::KlFrom { clean_logits };
    let mut loss_trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grad) = input_gradient(model, &x_adv, &[], objective)?;
        loss_trace.push(loss);
        for (dv, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
            *dv += alpha * kernels::sign(g);
        }
        project_in_place(delta.data_mut(), eps);
        x_adv = apply_domain(x, &mut delta, bounds);
    }
    let final_loss = objective_value(model, &x_adv, &[], objective)?;
    loss_trace.push(final_loss);
    Ok(AdvBatch {
        x_adv,
        delta,
        loss_trace,
    })
}

/// Per-row cross-entropy of `logits` against `y`.
pub fn per_sample_cross_entropy(logits: &Tensor, y: &[usize]) -> Vec<f64> {
    let c = logits.cols();
    let mut logp = vec![0.0; c];
    y.iter()
        .enumerate()
        .map(|(r, &label)| {
            kernels::log_softmax_row(logits.row(r), &mut logp);
            0.0 - logp[label]
        })
        .collect()
}

pub const BRUTE_FORCE_MAX_DIM: usize = 3;
pub const BRUTE_FORCE_MAX_GRID: usize = 301;

/// Exhaustive search of `L_CE` over a `grid_n`-per-axis lattice of the
/// ε-ball around a single input. Ties keep the first maximum in
/// lexicographic grid order.
pub fn brute_force_worst_case(
    model: &ModelWeights,
    x: &[f64],
    y: usize,
    eps: f64,
    grid_n: usize,
    bounds: Option<Bounds>,
) -> Result<(Vec<f64>, f64)> {
    let d = x.len();
    if d > BRUTE_FORCE_MAX_DIM {
        return Err(HfatError::Capability(format!(
            "brute-force search supports input dim ≤ {BRUTE_FORCE_MAX_DIM}, got {d}"
        )));
    }
    if grid_n == 0 || grid_n > BRUTE_FORCE_MAX_GRID {
        return Err(HfatError::Capability(format!(
            "grid size must be in 1..={BRUTE_FORCE_MAX_GRID}, got {grid_n}"
        )));
    }
    if y >= model.spec().n_classes() {
        return Err(HfatError::Index {
            index: y,
            len: model.spec().n_classes(),
        });
    }
    let axis: Vec<f64> = if grid_n == 1 {
        vec![0.0]
    } else {
        let span = (grid_n - 1) as f64;
        (0..grid_n)
            .map(|i| eps * (2.0 * i as f64 - span) / span)
            .collect()
    };
    let total = grid_n.pow(d as u32);
    const CHUNK: usize = 8192;
    let mut best: Option<(usize, f64)> = None;
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let mut rows = Vec::with_capacity((end - start) * d);
        for idx in start..end {
            rows.extend(grid_point(idx, &axis, d).iter().zip(x).map(|(dv, xv)| {
                let v = xv + dv;
                bounds.map_or(v, |b| b.clamp(v))
            }));
        }
        let batch = Tensor::new(vec![end - start, d], rows)?;
        let logits = model.forward(&batch)?;
        let labels = vec![y; end - start];
        for (k, l) in per_sample_cross_entropy(&logits, &labels).into_iter().enumerate() {
            if best.map_or(true, |(_, b)| l > b) {
                best = Some((start + k, l));
            }
        }
        start = end;
    }
    let (idx, loss) = best.expect("grid is non-empty");
    let delta = grid_point(idx, &axis, d)
        .iter()
        .zip(x)
        .map(|(dv, xv)| bounds.map_or(*dv, |b| b.clamp(xv + dv) - xv))
        .collect();
    Ok((delta, loss))
}

fn grid_point(mut idx: usize, axis: &[f64], d: usize) -> Vec<f64> {
    let n = axis.len();
    let mut out = vec![0.0; d];
    for k in (0..d).rev() {
        out[k] = axis[idx % n];
        idx /= n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-class linear model with logit difference `z1 − z0 = v·x + c`.
    fn logistic(v: &[f64], c: f64) -> ModelWeights {
        let d = v.len();
        let mut w = vec![0.0; d * 2];
        for (k, &vk) in v.iter().enumerate() {
            w[k * 2 + 1] = vk;
        }
        ModelWeights::from_params(
            MlpSpec::new(vec![d, 2]).unwrap(),
            vec![
                Tensor::new(vec![d, 2], w).unwrap(),
                Tensor::vector(vec![0.0, c]),
            ],
            0,
        )
        .unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn project_linf_examples() {
        let t = Tensor::vector(vec![0.5, -0.2]);
        assert_eq!(project_linf(&t, 0.3).data(), &[0.3, -0.2]);
        let inside = Tensor::vector(vec![0.1, -0.29, 0.0]);
        assert_eq!(project_linf(&inside, 0.3), inside);
    }

    #[test]
    fn project_linf_is_nearest_point() {
        let mut r = rng();
        for _ in 0..200 {
            let v: f64 = r.random_range(-2.0..2.0);
            let p = project_linf(&Tensor::vector(vec![v]), 0.7).data()[0];
            // nearest point of [-0.7, 0.7] to v
            let expected = if v > 0.7 { 0.7 } else if v < -0.7 { -0.7 } else { v };
            assert_eq!(p, expected);
        }
    }

    #[test]
    fn fgsm_on_logistic_matches_hand_derivation() {
        // dL/dx for label 0 is σ(·)·v, for label 1 is −(1−σ)·v
        let v = [0.8, -1.5, 0.0];
        let model = logistic(&v, 0.1);
        let x = Tensor::from_rows(&[[0.2, 0.1, -0.3], [0.0, 0.5, 1.0]]).unwrap();
        let y = [0, 1];
        let eps = 0.25;
        let adv = fgsm(&model, &x, &y, &AttackSpec::fgsm(eps), None, &mut rng()).unwrap();
        let expected0: Vec<f64> = x.row(0).iter().zip(&v).map(|(xv, vv)| xv + eps * kernels::sign(*vv)).collect();
        let expected1: Vec<f64> = x.row(1).iter().zip(&v).map(|(xv, vv)| xv - eps * kernels::sign(*vv)).collect();
        assert_eq!(adv.x_adv.row(0), expected0.as_slice());
        assert_eq!(adv.x_adv.row(1), expected1.as_slice());
        assert!(adv.loss_trace[1] >= adv.loss_trace[0]);
    }

    #[test]
    fn zero_eps_leaves_input_unchanged() {
        let model = logistic(&[1.0, 2.0], 0.0);
        let x = Tensor::from_rows(&[[0.3, 0.4]]).unwrap();
        for spec in [AttackSpec::fgsm(0.0), AttackSpec::pgd(0.0, 5).with_random_start(true)] {
            let adv = run_attack(&model, &x, &[1], &spec, None, &mut rng()).unwrap();
            assert_eq!(adv.x_adv, x);
        }
    }

    #[test]
    fn one_step_pgd_equals_fgsm_with_alpha() {
        let mut r = rng();
        let spec = MlpSpec::with_hidden(3, &[8], 3).unwrap();
        let model = ModelWeights::init(&spec, 1).unwrap();
        let x = crate::testutil::random_tensor(&mut r, &[6, 3], 1.0);
        let y = [0, 1, 2, 0, 1, 2];
        let p = pgd(&model, &x, &y, &AttackSpec::pgd(0.3, 1).with_alpha(0.1), None, &mut r).unwrap();
        let f = fgsm(&model, &x, &y, &AttackSpec::fgsm(0.1), None, &mut r).unwrap();
        assert_eq!(p.x_adv, f.x_adv);
        // alpha above eps is capped by the projection
        let p = pgd(&model, &x, &y, &AttackSpec::pgd(0.1, 1).with_alpha(0.5), None, &mut r).unwrap();
        assert_eq!(p.x_adv, f.x_adv);
    }

    #[test]
    fn every_iterate_stays_in_ball_and_domain() {
        let mut r = rng();
        let spec = MlpSpec::with_hidden(4, &[10], 3).unwrap();
        let model = ModelWeights::init(&spec, 2).unwrap();
        let x = crate::testutil::random_tensor(&mut r, &[8, 4], 0.3).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let y = [0, 1, 2, 0, 1, 2, 0, 1];
        let eps = 0.1;
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mim, AttackKind::Cw] {
            let spec = AttackSpec {
                kind,
                random_start: true,
                ..AttackSpec::pgd(eps, 10)
            };
            let mut ok = true;
            let adv = run_attack_observed(&model, &x, &y, &spec, Some(Bounds::UNIT), &mut r, &mut |_, d| {
                ok &= d.max_abs() <= eps + 1e-12;
                ok &= d.data().iter().zip(x.data()).all(|(dv, xv)| (0.0..=1.0).contains(&(xv + dv)));
            })
            .unwrap();
            assert!(ok, "{kind:?}");
            assert!(adv.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(adv.delta.max_abs() <= eps + 1e-12);
        }
    }

    #[test]
    fn mim_with_zero_decay_tracks_pgd() {
        let mut r = rng();
        let spec = MlpSpec::with_hidden(3, &[8], 3).unwrap();
        let model = ModelWeights::init(&spec, 4).unwrap();
        let x = crate::testutil::random_tensor(&mut r, &[5, 3], 1.0);
        let y = [0, 1, 2, 1, 0];
        let base = AttackSpec::pgd(0.3, 7).with_random_start(true);
        let p = pgd(&model, &x, &y, &base, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let m = mim(
            &model,
            &x,
            &y,
            &AttackSpec { mim_decay: 0.0, ..base },
            None,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(p, m);
    }

    #[test]
    fn pgd_trace_nondecreasing_on_linear_model() {
        let model = logistic(&[1.0, -2.0], 0.3);
        let x = Tensor::from_rows(&[[0.1, 0.2], [-0.5, 0.4], [1.0, 1.0]]).unwrap();
        let adv = pgd(&model, &x, &[0, 1, 1], &AttackSpec::pgd(0.5, 20), None, &mut rng()).unwrap();
        assert!(adv.loss_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cw_fixed_point_on_misclassified_input() {
        let model = logistic(&[1.0, 1.0], 0.0);
        // z1 − z0 = 2 > 0 → predicts 1, label 0 is already wrong
        let x = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let adv = cw_margin_pgd(&model, &x, &[0], &AttackSpec::cw(0.3, 30), None, &mut rng()).unwrap();
        assert!(adv.loss_trace[0] <= 0.0);
        assert_eq!(adv.x_adv, x);
    }

    #[test]
    fn brute_force_contracts() {
        let model = logistic(&[1.0, 0.5], 0.0);
        let (d, l) = brute_force_worst_case(&model, &[0.2, 0.3], 0, 0.0, 11, None).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        let x = Tensor::from_rows(&[[0.2, 0.3]]).unwrap();
        assert_eq!(l, model.loss(&x, &[0]).unwrap());

        let four = logistic(&[1.0; 4], 0.0);
        assert!(matches!(
            brute_force_worst_case(&four, &[0.0; 4], 0, 0.1, 5, None),
            Err(HfatError::Capability(_))
        ));
        assert!(matches!(
            brute_force_worst_case(&model, &[0.0; 2], 0, 0.1, 302, None),
            Err(HfatError::Capability(_))
        ));
    }

    #[test]
    fn brute_force_dominates_pgd_and_respects_symmetry() {
        let model = logistic(&[1.0, 1.0], 0.0);
        let x = [0.0, 0.0];
        let (delta, loss) = brute_force_worst_case(&model, &x, 0, 0.3, 61, None).unwrap();
        // label 0 loss grows with v·x; both coordinates push equally
        assert_eq!(delta, vec![0.3, 0.3]);
        let xt = Tensor::from_rows(&[x]).unwrap();
        let adv = pgd(&model, &xt, &[0], &AttackSpec::pgd(0.3, 20), None, &mut rng()).unwrap();
        assert!(loss >= *adv.loss_trace.last().unwrap() - 1e-15);
    }

    #[test]
    fn attacks_are_deterministic_under_seed() {
        let spec = MlpSpec::with_hidden(2, &[6], 2).unwrap();
        let model = ModelWeights::init(&spec, 8).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.9], [0.4, 0.3]]).unwrap();
        let s = AttackSpec::mim(0.2, 10).with_random_start(true);
        let a = run_attack(&model, &x, &[0, 1], &s, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = run_attack(&model, &x, &[0, 1], &s, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_pgd_stays_in_ball() {
        let spec = MlpSpec::with_hidden(2, &[6], 3).unwrap();
        let model = ModelWeights::init(&spec, 9).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.9], [0.4, 0.3]]).unwrap();
        let clean = model.forward(&x).unwrap();
        let adv = kl_pgd(&model, &x, &clean, 0.2, 0.05, 10, None, &mut rng()).unwrap();
        assert!(adv.delta.max_abs() <= 0.2 + 1e-12);
        assert!(adv.loss_trace.iter().all(|&l| l >= -1e-12));
    }
}
