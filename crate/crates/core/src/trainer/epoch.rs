use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LambdaMode, PriorMode, TrainConfig, TrainMode};
use super::optim::{adaptive_lambda, combine_gradients, sgd_momentum_step, SgdState, WeightPair};
use crate::attacks::{kl_pgd, run_attack, Bounds};
use crate::autodiff::{Tape, Tensor};
use crate::auxiliary::{compute_momentum_p, reverse_train, transform_t};
use crate::data::Dataset;
use crate::error::{HfatError, Result};
use crate::hiders::{detect_hiders, fit_gaussian, hider_ratios, sample_ratio, GaussianPrior, RatioSample};
use crate::model::{Checkpoint, ModelWeights, ParamGrads};

const LANE_MAIN: u64 = 0;
const LANE_AUX: u64 = 1;
const LANE_PRIOR: u64 = 2;
const LANES: u64 = 4;
const PROBE_STREAM: u64 = u64::MAX;

/// Per-epoch stream: a run can resume at any epoch boundary without saving
/// generator state.
pub(crate) fn epoch_rng(seed: u64, epoch: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 * LANES + lane);
    rng
}

/// Everything that evolves across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub sgd: SgdState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Interval-1 ratios gathered for the online prior.
    pub ratios: Vec<f64>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let weights = ModelWeights::init(&cfg.model_spec()?, cfg.seed)?;
        Ok(TrainState {
            sgd: SgdState::new(&weights),
            weights,
            epoch: 0,
            step: 0,
            ratios: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub mean_lambda_a: f64,
    pub wall_seconds: f64,
}

#[allow(non_snake_case)]
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub step: u64,
    pub lambda_S: f64,
    pub lambda_A: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome {
    pub log: EpochLog,
    pub lambdas: Vec<LambdaRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MainLoss {
    CrossEntropy,
    Trades,
}

struct MainBranch {
    loss: f64,
    grads: ParamGrads,
    x_adv: Tensor,
    natural_correct: usize,
    robust_correct: usize,
}

fn count_correct(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, t)| p == t).count()
}

/// `L_CE(f(x), y) + beta · KL(f(x) ‖ f(x'))` and its parameter gradient.
pub fn trades_loss_and_grads(
    w: &ModelWeights,
    x: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    beta: f64,
) -> Result<(f64, f64, ParamGrads)> {
    let tape = Tape::new();
    let params = w.bind(&tape, true);
    let zc = w.forward_bound(&params, &tape.constant(x.clone()))?;
    let za = w.forward_bound(&params, &tape.constant(x_adv.clone()))?;
    let ce = zc.cross_entropy(y)?;
    let kl = zc.kl_divergence(&za)?;
    let loss = ce.add(&kl.scale(beta)?)?;
    let (value, kl_value) = (loss.value().item(), kl.value().item());
    let grads = loss.backward()?;
    Ok((value, kl_value, ParamGrads::collect(&params, grads)?))
}

fn main_branch(
    w: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    kind: MainLoss,
    bounds: Option<Bounds>,
    rng: &mut ChaCha8Rng,
) -> Result<MainBranch> {
    let attack = cfg.train_attack();
    let clean_logits = w.forward(x)?;
    let natural_correct = count_correct(&crate::model::predict_from_logits(&clean_logits), y);
    let (loss, grads, x_adv) = match kind {
        MainLoss::CrossEntropy => {
            let adv = run_attack(w, x, y, &attack, bounds, rng)?;
            let (loss, grads) = w.loss_and_grads(&adv.x_adv, y)?;
            (loss, grads, adv.x_adv)
        }
        MainLoss::Trades => {
            let adv = kl_pgd(w, x, &clean_logits, attack.eps, attack.step_size(), attack.steps, bounds, rng)?;
            let (loss, kl, grads) = trades_loss_and_grads(w, x, &adv.x_adv, y, cfg.trades_beta)?;
            if kl < 0.0 {
                return Err(HfatError::Numeric(format!("negative KL term {kl}")));
            }
            (loss, grads, adv.x_adv)
        }
    };
    let robust_correct = count_correct(&w.predict(&x_adv)?, y);
    Ok(MainBranch {
        loss,
        grads,
        x_adv,
        natural_correct,
        robust_correct,
    })
}

/// Steps (2)–(4) of an HFAT batch: probe, reverse-trained copy, momentum `p`
/// and the branch weights.
pub fn auxiliary_branch(
    w: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    x_adv_main: &Tensor,
    cfg: &TrainConfig,
    prior: &GaussianPrior,
    bounds: Option<Bounds>,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGrads, WeightPair)> {
    let r = sample_ratio(prior, cfg.r_max, rng);
    let probe = transform_t(x, x_adv_main, r, cfg.eps, Some(&mut *rng), bounds)?;
    let theta_hat = reverse_train(w, &probe, y, cfg.eta_aux(), cfg.reverse_steps)?;
    let (p, aux_adv) = compute_momentum_p(w, &theta_hat, x, y, &cfg.aux_attack(), bounds, rng)?;
    let pair = match cfg.lambda_mode {
        LambdaMode::Adaptive => adaptive_lambda(w, &theta_hat, x, x_adv_main, &aux_adv.x_adv)?,
        LambdaMode::Static => WeightPair::fixed(cfg.lambda_static),
    };
    Ok((p.0, pair))
}

fn run_epoch(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    kind: MainLoss,
    prior: Option<&GaussianPrior>,
) -> Result<EpochOutcome> {
    let started = Instant::now();
    if data.is_empty() {
        return Err(HfatError::Config("empty training set".into()));
    }
    let epoch = state.epoch + 1;
    let lr = cfg.lr_at(epoch);
    let mut main_rng = epoch_rng(cfg.seed, epoch, LANE_MAIN);
    let mut aux_rng = epoch_rng(cfg.seed, epoch, LANE_AUX);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut main_rng);
    let start_weights = state.weights.clone();

    let (mut loss_sum, mut nat, mut rob, mut lambda_sum) = (0.0, 0usize, 0usize, 0.0);
    let mut lambdas = Vec::with_capacity(data.len().div_ceil(cfg.batch_size));
    for batch in order.chunks(cfg.batch_size) {
        let x = data.x.select_rows(batch);
        let y: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
        let main = main_branch(&state.weights, &x, &y, cfg, kind, data.bounds, &mut main_rng)?;
        let (grad, pair) = match prior {
            Some(prior) if cfg.aux_active() => {
                let (p, pair) =
                    auxiliary_branch(&state.weights, &x, &y, &main.x_adv, cfg, prior, data.bounds, &mut aux_rng)?;
                (combine_gradients(&main.grads, &p, pair)?, pair)
            }
            _ => (main.grads, WeightPair::fixed(0.0)),
        };
        sgd_momentum_step(
            &mut state.weights,
            &grad,
            &mut state.sgd,
            lr,
            cfg.sgd_momentum,
            cfg.weight_decay,
        )?;
        state.step += 1;
        if !main.loss.is_finite() {
            return Err(HfatError::Numeric(format!("non-finite loss at step {}", state.step)));
        }
        loss_sum += main.loss * batch.len() as f64;
        nat += main.natural_correct;
        rob += main.robust_correct;
        lambda_sum += pair.lambda_A;
        lambdas.push(LambdaRecord {
            step: state.step,
            lambda_S: pair.lambda_S,
            lambda_A: pair.lambda_A,
        });
    }

    if prior.is_some() && cfg.aux_active() && cfg.prior_mode == PriorMode::Online {
        let fresh = online_ratios(&start_weights, &state.weights, data, cfg, epoch)?;
        state.ratios.extend(fresh.iter().map(|s| s.r));
    }
    state.epoch = epoch;
    state.weights.epoch_tag = epoch as u64;
    let n = data.len() as f64;
    Ok(EpochOutcome {
        log: EpochLog {
            epoch,
            train_loss: loss_sum / n,
            natural_acc: nat as f64 / n,
            robust_acc: rob as f64 / n,
            mean_lambda_a: lambda_sum / lambdas.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        lambdas,
    })
}

/// Fixed probe subset for online hider detection.
pub(crate) fn probe_indices(n: usize, cfg: &TrainConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PROBE_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.probe_subset.min(n));
    idx.sort_unstable();
    idx
}

/// Interval-1 hiders between the start-of-epoch and end-of-epoch weights:
/// adversarial inputs crafted against the newer model that the older model
/// still defends. The ratio is measured against the older model's own
/// adversarial example and input gradient.
pub fn online_ratios(
    prev: &ModelWeights,
    cur: &ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<RatioSample>> {
    let idx = probe_indices(data.len(), cfg);
    let sub = data.subset(&idx);
    let attack = cfg.train_attack();
    let mut rng = epoch_rng(cfg.seed, epoch, LANE_PRIOR);
    let adv_prev = run_attack(prev, &sub.x, &sub.y, &attack, data.bounds, &mut rng)?;
    let adv_cur = run_attack(cur, &sub.x, &sub.y, &attack, data.bounds, &mut rng)?;
    let ck_prev = Checkpoint::new(prev.clone(), epoch as u64 - 1, cfg.seed);
    let ck_cur = Checkpoint::new(cur.clone(), epoch as u64, cfg.seed);
    let hiders = detect_hiders(&ck_prev, &ck_cur, &sub.x, &sub.y, &adv_cur.delta)?;
    if hiders.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<usize> = hiders.iter().map(|h| h.sample_index).collect();
    let y: Vec<usize> = rows.iter().map(|&k| sub.y[k]).collect();
    let (samples, _) = hider_ratios(
        prev,
        &sub.x.select_rows(&rows),
        &y,
        &adv_cur.x_adv.select_rows(&rows),
        &adv_prev.x_adv.select_rows(&rows),
        1,
    )?;
    Ok(samples)
}

/// Prior in effect for the next epoch.
pub fn current_prior(cfg: &TrainConfig, ratios: &[f64]) -> Result<GaussianPrior> {
    match cfg.prior_mode {
        PriorMode::Online if ratios.len() >= cfg.prior_warmup => {
            let samples: Vec<RatioSample> = ratios
                .iter()
                .map(|&r| RatioSample { r, epoch_interval: 1 })
                .collect();
            fit_gaussian(&samples)
        }
        _ => Ok(cfg.initial_prior()),
    }
}

/// Adversarial training: PGD batch, cross-entropy gradient, SGD step.
pub fn train_epoch_at(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochOutcome> {
    run_epoch(state, data, cfg, MainLoss::CrossEntropy, None)
}

pub fn train_epoch_trades(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochOutcome> {
    run_epoch(state, data, cfg, MainLoss::Trades, None)
}

/// The coupled update; the main-branch loss follows `cfg.mode`.
pub fn train_epoch_hfat(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    prior: &GaussianPrior,
) -> Result<EpochOutcome> {
    let kind = if cfg.mode.is_trades() {
        MainLoss::Trades
    } else {
        MainLoss::CrossEntropy
    };
    run_epoch(state, data, cfg, kind, Some(prior))
}

/// One epoch of whichever method `cfg.mode` names.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochOutcome> {
    match cfg.mode {
        TrainMode::At => train_epoch_at(state, data, cfg),
        TrainMode::Trades => train_epoch_trades(state, data, cfg),
        TrainMode::AtHf | TrainMode::TradesHf => {
            let prior = current_prior(cfg, &state.ratios)?;
            train_epoch_hfat(state, data, cfg, &prior)
        }
    }
}
