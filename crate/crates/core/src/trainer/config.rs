use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::data::DatasetSpec;
use crate::error::{HfatError, Result};
use crate::hiders::{GaussianPrior, DEFAULT_R_MAX};
use crate::model::MlpSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    At,
    Trades,
    AtHf,
    TradesHf,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::At => "at",
            TrainMode::Trades => "trades",
            TrainMode::AtHf => "at_hf",
            TrainMode::TradesHf => "trades_hf",
        }
    }

    pub fn is_hf(&self) -> bool {
        matches!(self, TrainMode::AtHf | TrainMode::TradesHf)
    }

    pub fn is_trades(&self) -> bool {
        matches!(self, TrainMode::Trades | TrainMode::TradesHf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Adaptive,
    Static,
}

/// Where HFAT draws the ratio `r` from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Fixed { mu: f64, sigma: f64 },
    /// Refit every epoch from interval-1 hiders on a probe subset.
    Online,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_aux_attack() -> AttackSpec {
    AttackSpec::pgd(0.0, 5)
}
fn default_lambda_mode() -> LambdaMode {
    LambdaMode::Adaptive
}
fn default_trades_beta() -> f64 {
    6.0
}
fn default_prior_mode() -> PriorMode {
    PriorMode::Fixed { mu: 0.8, sigma: 0.2 }
}
fn one() -> usize {
    1
}
fn default_r_max() -> f64 {
    DEFAULT_R_MAX
}
fn default_probe_subset() -> usize {
    512
}
fn default_prior_warmup() -> usize {
    200
}
fn default_prior_init() -> (f64, f64) {
    (0.8, 0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, factor)`: from that 1-based epoch on, the rate is multiplied
    /// by `factor`.
    #[serde(default)]
    pub lr_drops: Vec<(usize, f64)>,
    #[serde(default = "default_momentum")]
    pub sgd_momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Budget shared by the training and auxiliary attacks; overrides their
    /// own `eps`.
    pub eps: f64,
    pub train_attack: AttackSpec,
    #[serde(default = "default_aux_attack")]
    pub aux_attack: AttackSpec,
    /// Reverse-training rate; the main `lr` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_aux: Option<f64>,
    #[serde(default = "default_lambda_mode")]
    pub lambda_mode: LambdaMode,
    /// `lambda_A` in static mode (`lambda_S` is then 1).
    #[serde(default)]
    pub lambda_static: f64,
    #[serde(default = "default_trades_beta")]
    pub trades_beta: f64,
    #[serde(default = "default_prior_mode")]
    pub prior_mode: PriorMode,
    pub seed: u64,
    #[serde(default = "one")]
    pub snapshot_every: usize,
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    #[serde(default = "one")]
    pub reverse_steps: usize,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    /// Samples used for online hider detection each epoch.
    #[serde(default = "default_probe_subset")]
    pub probe_subset: usize,
    /// Ratios needed before the online prior replaces `prior_init`.
    #[serde(default = "default_prior_warmup")]
    pub prior_warmup: usize,
    #[serde(default = "default_prior_init")]
    pub prior_init: (f64, f64),
}

impl TrainConfig {
    /// Two-moons schedule: 60 epochs, drops at 30 and 45.
    pub fn desk_moons(mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            epochs: 60,
            batch_size: 128,
            lr: 0.05,
            lr_drops: vec![(30, 0.1), (45, 0.1)],
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            eps: 0.3,
            train_attack: AttackSpec::pgd(0.3, 10).with_random_start(true),
            aux_attack: AttackSpec::pgd(0.3, 5),
            eta_aux: None,
            lambda_mode: LambdaMode::Adaptive,
            lambda_static: 0.0,
            trades_beta: 6.0,
            prior_mode: default_prior_mode(),
            seed,
            snapshot_every: 1,
            dataset: DatasetSpec::desk_moons(seed),
            hidden: vec![64, 64],
            reverse_steps: 1,
            r_max: DEFAULT_R_MAX,
            probe_subset: 512,
            prior_warmup: 200,
            prior_init: default_prior_init(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HfatError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.snapshot_every == 0 {
            return bad("epochs, batch_size and snapshot_every must be ≥ 1".into());
        }
        if self.lr_drops.windows(2).any(|w| w[0].0 > w[1].0) {
            return bad("lr_drops must be sorted by epoch".into());
        }
        if self.lr_drops.iter().any(|&(_, f)| !(f.is_finite() && f > 0.0)) {
            return bad("lr drop factors must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum must be in [0, 1), got {}", self.sgd_momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be ≥ 0".into());
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad(format!("eps must be ≥ 0, got {}", self.eps));
        }
        self.train_attack().validate()?;
        if !(self.lambda_static.is_finite() && self.lambda_static >= 0.0) {
            return bad("lambda_static must be ≥ 0".into());
        }
        if !(self.trades_beta.is_finite() && self.trades_beta >= 0.0) {
            return bad("trades_beta must be ≥ 0".into());
        }
        if let Some(eta) = self.eta_aux {
            if !(eta.is_finite() && eta >= 0.0) {
                return bad("eta_aux must be ≥ 0".into());
            }
        }
        if self.mode.is_hf() {
            let aux = self.aux_attack();
            aux.validate()?;
            if aux.kind != AttackKind::Pgd {
                return bad(format!("aux_attack must be pgd, got {}", aux.kind.as_str()));
            }
            if !(self.r_max.is_finite() && self.r_max > 0.0) {
                return bad("r_max must be > 0".into());
            }
            if let PriorMode::Fixed { mu, sigma } = self.prior_mode {
                if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return bad("fixed prior needs finite mu and sigma ≥ 0".into());
                }
            }
            if self.prior_mode == PriorMode::Online && (self.probe_subset == 0 || self.prior_warmup < 2) {
                return bad("online prior needs probe_subset ≥ 1 and prior_warmup ≥ 2".into());
            }
        }
        self.model_spec()?;
        self.dataset.validate()
    }

    pub fn model_spec(&self) -> Result<MlpSpec> {
        MlpSpec::with_hidden(self.dataset.dim, &self.hidden, self.dataset.n_classes)
    }

    pub fn train_attack(&self) -> AttackSpec {
        AttackSpec {
            eps: self.eps,
            ..self.train_attack.clone()
        }
    }

    pub fn aux_attack(&self) -> AttackSpec {
        AttackSpec {
            eps: self.eps,
            ..self.aux_attack.clone()
        }
    }

    pub fn eta_aux(&self) -> f64 {
        self.eta_aux.unwrap_or(self.lr)
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.lr, |lr, &(_, f)| lr * f)
    }

    pub fn initial_prior(&self) -> GaussianPrior {
        match self.prior_mode {
            PriorMode::Fixed { mu, sigma } => GaussianPrior::fixed(mu, sigma),
            PriorMode::Online => GaussianPrior::fixed(self.prior_init.0, self.prior_init.1),
        }
    }

    /// Whether the auxiliary branch can influence `theta` at all.
    pub fn aux_active(&self) -> bool {
        self.mode.is_hf() && !(self.lambda_mode == LambdaMode::Static && self.lambda_static == 0.0)
    }
}
