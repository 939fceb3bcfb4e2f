//! Run directory: config copy, logs, per-epoch snapshots and a resume file.
//!
//! ```text
//! config.json        training configuration
//! epoch_log.csv      epoch,train_loss,natural_acc,robust_acc,mean_lambda_A
//! lambda_trace.csv   step,lambda_S,lambda_A
//! timing.csv         epoch,wall_seconds
//! epoch_<n>.ckpt     weight snapshots
//! resume.bin         weights, velocity, counters and online-prior ratios
//! ```
//!
//! Wall-clock times live only in `timing.csv` so every other file is a pure
//! function of (config, dataset).

use std::fs;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::epoch::{train_epoch, EpochLog, LambdaRecord, TrainState};
use super::optim::SgdState;
use crate::data::Dataset;
use crate::error::{HfatError, Result};
use crate::model::{save_checkpoint, Checkpoint, ModelWeights, ParamGrads};
use crate::report::{self, fmt_f64};

pub const CONFIG_FILE: &str = "config.json";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const LAMBDA_TRACE_FILE: &str = "lambda_trace.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RESUME_FILE: &str = "resume.bin";

const EPOCH_LOG_HEADER: [&str; 5] = ["epoch", "train_loss", "natural_acc", "robust_acc", "mean_lambda_A"];
const LAMBDA_HEADER: [&str; 3] = ["step", "lambda_S", "lambda_A"];
const TIMING_HEADER: [&str; 2] = ["epoch", "wall_seconds"];
const RESUME_MAGIC: &[u8; 8] = b"HFATRSUM";
const RESUME_VERSION: u32 = 1;

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.ckpt"))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from `resume.bin` when present.
    pub resume: bool,
    /// Stop after this epoch (an interrupted run, for testing resume).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub logs: Vec<EpochLog>,
    pub lambdas: Vec<LambdaRecord>,
    pub state: TrainState,
    pub snapshots: Vec<PathBuf>,
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    report::write_csv(
        path,
        &EPOCH_LOG_HEADER,
        logs.iter().map(|l| {
            vec![
                l.epoch.to_string(),
                fmt_f64(l.train_loss),
                fmt_f64(l.natural_acc),
                fmt_f64(l.robust_acc),
                fmt_f64(l.mean_lambda_a),
            ]
        }),
    )
}

/// Reads `epoch_log.csv` and, when present, the sibling `timing.csv`.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let rows = report::read_csv(path, &EPOCH_LOG_HEADER)?;
    let mut logs = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            Ok(EpochLog {
                epoch: report::field(path, line, &r[0])?,
                train_loss: report::float_field(path, line, &r[1])?,
                natural_acc: report::float_field(path, line, &r[2])?,
                robust_acc: report::float_field(path, line, &r[3])?,
                mean_lambda_a: report::float_field(path, line, &r[4])?,
                wall_seconds: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let timing = path.with_file_name(TIMING_FILE);
    if timing.exists() {
        for (i, r) in report::read_csv(&timing, &TIMING_HEADER)?.iter().enumerate() {
            let epoch: usize = report::field(&timing, i + 2, &r[0])?;
            let secs = report::float_field(&timing, i + 2, &r[1])?;
            if let Some(l) = logs.iter_mut().find(|l| l.epoch == epoch) {
                l.wall_seconds = secs;
            }
        }
    }
    Ok(logs)
}

fn write_timing(path: &Path, logs: &[EpochLog]) -> Result<()> {
    report::write_csv(
        path,
        &TIMING_HEADER,
        logs.iter().map(|l| vec![l.epoch.to_string(), format!("{:.3}", l.wall_seconds)]),
    )
}

pub fn write_lambda_trace(path: &Path, records: &[LambdaRecord]) -> Result<()> {
    report::write_csv(
        path,
        &LAMBDA_HEADER,
        records
            .iter()
            .map(|r| vec![r.step.to_string(), fmt_f64(r.lambda_S), fmt_f64(r.lambda_A)]),
    )
}

pub fn read_lambda_trace(path: &Path) -> Result<Vec<LambdaRecord>> {
    report::read_csv(path, &LAMBDA_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(LambdaRecord {
                step: report::field(path, i + 2, &r[0])?,
                lambda_S: report::float_field(path, i + 2, &r[1])?,
                lambda_A: report::float_field(path, i + 2, &r[2])?,
            })
        })
        .collect()
}

fn push_block(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn encode_state(state: &TrainState, seed: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RESUME_MAGIC);
    buf.extend_from_slice(&RESUME_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    let weights = Checkpoint::new(state.weights.clone(), state.epoch as u64, seed);
    push_block(&mut buf, &weights.to_bytes());
    let velocity = ModelWeights::from_params(
        state.weights.spec().clone(),
        state.sgd.velocity.tensors().to_vec(),
        state.epoch as u64,
    )
    .expect("velocity mirrors the weight layout");
    push_block(&mut buf, &Checkpoint::new(velocity, state.epoch as u64, seed).to_bytes());
    buf.extend_from_slice(&(state.ratios.len() as u64).to_le_bytes());
    for r in &state.ratios {
        buf.extend_from_slice(&r.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HfatError::Format("resume file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != RESUME_MAGIC {
        return Err(HfatError::Format("not a resume file".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != RESUME_VERSION {
        return Err(HfatError::UnsupportedVersion {
            found: version,
            supported: RESUME_VERSION,
        });
    }
    let epoch = c.u64()? as usize;
    let step = c.u64()?;
    let n = c.u64()? as usize;
    let weights = Checkpoint::from_bytes(c.take(n)?)?.weights;
    let n = c.u64()? as usize;
    let velocity = Checkpoint::from_bytes(c.take(n)?)?.weights;
    if velocity.spec() != weights.spec() {
        return Err(HfatError::Format("velocity layout differs from weights".into()));
    }
    let n_ratios = c.u64()? as usize;
    let ratios = (0..n_ratios)
        .map(|_| Ok(f64::from_le_bytes(c.take(8)?.try_into().unwrap())))
        .collect::<Result<Vec<_>>>()?;
    if c.pos != bytes.len() {
        return Err(HfatError::Format("trailing bytes in resume file".into()));
    }
    Ok(TrainState {
        sgd: SgdState {
            velocity: ParamGrads::from_tensors(velocity.params().to_vec()),
        },
        weights,
        epoch,
        step,
        ratios,
    })
}

fn config_text(cfg: &TrainConfig) -> Result<String> {
    let mut s = serde_json::to_string_pretty(cfg)?;
    s.push('\n');
    Ok(s)
}

/// Trains `cfg` on `data`, writing everything into `dir`.
pub fn run_training(cfg: &TrainConfig, data: &Dataset, dir: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    if data.dim() != spec.input_dim() || data.n_classes != spec.n_classes() {
        return Err(HfatError::Config(format!(
            "dataset has dim {} and {} classes; config expects {} and {}",
            data.dim(),
            data.n_classes,
            spec.input_dim(),
            spec.n_classes()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| HfatError::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    let text = config_text(cfg)?;
    let resume_path = dir.join(RESUME_FILE);

    let (mut state, mut logs, mut lambdas) = if opts.resume && resume_path.exists() {
        let saved = fs::read_to_string(&cfg_path).map_err(|e| HfatError::io(&cfg_path, e))?;
        let saved: TrainConfig = serde_json::from_str(&saved)?;
        if &saved != cfg {
            return Err(HfatError::Config(format!(
                "{} was written by a different configuration",
                dir.display()
            )));
        }
        let bytes = fs::read(&resume_path).map_err(|e| HfatError::io(&resume_path, e))?;
        let state = decode_state(&bytes)?;
        let mut logs = read_epoch_log(&dir.join(EPOCH_LOG_FILE))?;
        logs.retain(|l| l.epoch <= state.epoch);
        let mut lambdas = read_lambda_trace(&dir.join(LAMBDA_TRACE_FILE))?;
        lambdas.retain(|r| r.step <= state.step);
        if logs.len() != state.epoch || lambdas.len() as u64 != state.step {
            return Err(HfatError::Format(format!(
                "logs in {} do not cover the resume point",
                dir.display()
            )));
        }
        (state, logs, lambdas)
    } else {
        fs::write(&cfg_path, &text).map_err(|e| HfatError::io(&cfg_path, e))?;
        (TrainState::init(cfg)?, Vec::new(), Vec::new())
    };

    let last = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < last {
        let out = train_epoch(&mut state, data, cfg)?;
        let epoch = state.epoch;
        if epoch % cfg.snapshot_every == 0 || epoch == cfg.epochs {
            let ck = Checkpoint::new(state.weights.clone(), epoch as u64, cfg.seed);
            save_checkpoint(&ck, checkpoint_path(dir, epoch))?;
        }
        logs.push(out.log);
        lambdas.extend(out.lambdas);
        write_epoch_log(&dir.join(EPOCH_LOG_FILE), &logs)?;
        write_lambda_trace(&dir.join(LAMBDA_TRACE_FILE), &lambdas)?;
        write_timing(&dir.join(TIMING_FILE), &logs)?;
        crate::model::write_atomic(&resume_path, &encode_state(&state, cfg.seed))?;
    }

    let snapshots = (1..=state.epoch)
        .filter(|e| e % cfg.snapshot_every == 0 || *e == cfg.epochs)
        .map(|e| checkpoint_path(dir, e))
        .collect();
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        logs,
        lambdas,
        state,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;
    use crate::trainer::config::{PriorMode, TrainMode};

    fn tiny(mode: TrainMode, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::desk_moons(mode, 11);
        cfg.dataset.n_samples = 120;
        cfg.hidden = vec![6];
        cfg.batch_size = 40;
        cfg.epochs = epochs;
        cfg.lr_drops = vec![(2, 0.5)];
        cfg.train_attack.steps = 2;
        cfg.aux_attack.steps = 2;
        cfg
    }

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap())
            .filter(|e| e.file_name() != TIMING_FILE)
            .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
            .collect();
        out.sort();
        out
    }

    #[test]
    fn single_epoch_writes_one_snapshot_and_one_row() {
        let cfg = tiny(TrainMode::At, 1);
        let data = make_dataset(&cfg.dataset).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        let s = run_training(&cfg, &data, dir.path(), RunOptions::default()).unwrap();
        assert_eq!(s.snapshots, vec![checkpoint_path(dir.path(), 1)]);
        assert_eq!(read_epoch_log(&dir.path().join(EPOCH_LOG_FILE)).unwrap().len(), 1);
        let ckpts = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt"))
            .count();
        assert_eq!(ckpts, 1);
        for f in [CONFIG_FILE, EPOCH_LOG_FILE, LAMBDA_TRACE_FILE] {
            assert!(dir.path().join(f).exists());
        }
    }

    #[test]
    fn logs_round_trip() {
        let cfg = tiny(TrainMode::AtHf, 2);
        let data = make_dataset(&cfg.dataset).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        let s = run_training(&cfg, &data, dir.path(), RunOptions::default()).unwrap();
        let back = read_lambda_trace(&dir.path().join(LAMBDA_TRACE_FILE)).unwrap();
        assert_eq!(back, s.lambdas);
        let logs = read_epoch_log(&dir.path().join(EPOCH_LOG_FILE)).unwrap();
        for (a, b) in logs.iter().zip(&s.logs) {
            assert_eq!((a.epoch, a.train_loss, a.robust_acc), (b.epoch, b.train_loss, b.robust_acc));
        }
        let decoded = decode_state(&fs::read(dir.path().join(RESUME_FILE)).unwrap()).unwrap();
        assert_eq!(decoded, s.state);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let mut cfg = tiny(TrainMode::AtHf, 4);
        cfg.prior_mode = PriorMode::Online;
        cfg.prior_warmup = 2;
        let data = make_dataset(&cfg.dataset).unwrap().train;
        let full = tempfile::tempdir().unwrap();
        run_training(&cfg, &data, full.path(), RunOptions::default()).unwrap();
        let split = tempfile::tempdir().unwrap();
        let stop = RunOptions {
            resume: false,
            stop_after: Some(2),
        };
        run_training(&cfg, &data, split.path(), stop).unwrap();
        let resume = RunOptions {
            resume: true,
            stop_after: None,
        };
        run_training(&cfg, &data, split.path(), resume).unwrap();
        assert_eq!(files(full.path()), files(split.path()));
    }

    #[test]
    fn resume_rejects_other_config() {
        let cfg = tiny(TrainMode::At, 2);
        let data = make_dataset(&cfg.dataset).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, &data, dir.path(), RunOptions { resume: false, stop_after: Some(1) }).unwrap();
        let other = TrainConfig { lr: 0.01, ..cfg };
        let opts = RunOptions {
            resume: true,
            stop_after: None,
        };
        assert!(matches!(
            run_training(&other, &data, dir.path(), opts),
            Err(HfatError::Config(_))
        ));
    }

    #[test]
    fn corrupt_resume_file_is_a_format_error() {
        let cfg = tiny(TrainMode::At, 1);
        let s = TrainState::init(&cfg).unwrap();
        let bytes = encode_state(&s, 1);
        assert_eq!(decode_state(&bytes).unwrap(), s);
        assert!(matches!(decode_state(&bytes[..bytes.len() - 3]), Err(HfatError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_state(&bad), Err(HfatError::Format(_))));
    }
}
