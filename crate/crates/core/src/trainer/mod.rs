//! Outer minimization: AT, TRADES and their hider-focused variants.

mod config;
mod epoch;
mod optim;
mod run;

pub use config::{LambdaMode, PriorMode, TrainConfig, TrainMode};
pub use epoch::{
    auxiliary_branch, current_prior, online_ratios, trades_loss_and_grads, train_epoch, train_epoch_at,
    train_epoch_hfat, train_epoch_trades, EpochLog, EpochOutcome, LambdaRecord, TrainState,
};
pub use optim::{
    adaptive_lambda, combine_gradients, lambda_from_kls, mean_kl, sgd_momentum_step, SgdState, WeightPair,
};
pub use run::{
    checkpoint_path, read_epoch_log, read_lambda_trace, run_training, write_epoch_log, write_lambda_trace,
    RunOptions, RunSummary, CONFIG_FILE, EPOCH_LOG_FILE, LAMBDA_TRACE_FILE, RESUME_FILE, TIMING_FILE,
};
