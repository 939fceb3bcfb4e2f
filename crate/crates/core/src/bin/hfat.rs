use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hfat::attacks::{run_attack, AttackSpec};
use hfat::data::{make_dataset, Dataset, DatasetSpec};
use hfat::error::{HfatError, Result};
use hfat::eval::{
    default_suite, evaluate, landscape_grid, transfer_matrix, LandscapeDirection, NamedAttack,
};
use hfat::hiders::{
    detect_hiders, failed_set, fit_gaussian, occurrence_indices, proportion_report,
    read_ratios_csv, snapshot_ratios, write_ratios_csv, HiderStats, DEFAULT_INTERVALS,
};
use hfat::model::{load_checkpoint, Checkpoint};
use hfat::report;
use hfat::trainer::{run_training, RunOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "hfat", version, about = "Hider-focused adversarial training on desk-scale benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Grad,
    Hider,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset: a training config or dataset spec (JSON), or a dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; `runs/<mode>-seed<seed>` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run in the same directory.
        #[arg(long)]
        resume: bool,
    },
    /// Natural and robust accuracy of one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Budget; taken from the config when `--data` is one.
        #[arg(long)]
        eps: Option<f64>,
        /// Comma-separated subset of fgsm, pgdN, mimN, cwN.
        #[arg(long, value_delimiter = ',')]
        attacks: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Black-box transfer matrix over two or more checkpoints.
    Transfer {
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value = "pgd20")]
        attack: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hider proportions, occurrences and ratios over a run's snapshots.
    Hiders {
        /// Run directory holding `epoch_<n>.ckpt` snapshots.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value = "pgd20")]
        attack: String,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_INTERVALS)]
        intervals: Vec<u64>,
        /// Largest failed set used for occurrence counting.
        #[arg(long, default_value_t = 1000)]
        failed_limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian prior from ratio samples.
    Fitprior {
        #[arg(long)]
        ratios: PathBuf,
        /// Epoch interval whose samples are fitted.
        #[arg(long, default_value_t = 1)]
        interval: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss surface around one input.
    Landscape {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Row of the anchor in the chosen split. Defaults to row 0 in grad
        /// mode and to the first detected hider in hider mode.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, value_enum, default_value = "grad")]
        mode: ModeArg,
        /// Later snapshot that defines hiders (hider mode).
        #[arg(long)]
        later: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
        /// Half-width of each axis; 1.5·eps when omitted.
        #[arg(long)]
        extent: Option<f64>,
        #[arg(long, default_value_t = 41)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid CSV; metadata goes next to it as `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset and write `train.csv` and `test.csv`.
    Dataset {
        /// Dataset spec or training config (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

struct Source {
    data: Dataset,
    id: String,
    eps: Option<f64>,
}

/// Config first, then bare dataset spec; `.csv` files are read whole.
fn load_data(args: &DataArgs) -> Result<Source> {
    let path = &args.data;
    if path.extension().is_some_and(|e| e == "csv") {
        return Ok(Source {
            data: Dataset::read_csv(path, None, None)?,
            id: format!("csv:{}", path.display()),
            eps: None,
        });
    }
    let text = fs::read_to_string(path).map_err(|e| HfatError::Io {
        path: path.clone(),
        source: e,
    })?;
    let (spec, eps) = match serde_json::from_str::<TrainConfig>(&text) {
        Ok(cfg) => (cfg.dataset, Some(cfg.eps)),
        Err(_) => (serde_json::from_str::<DatasetSpec>(&text)?, None),
    };
    let split = make_dataset(&spec)?;
    let (data, part) = match args.split {
        SplitArg::Train => (split.train, "train"),
        SplitArg::Test => (split.test, "test"),
    };
    Ok(Source {
        data,
        id: format!("{}:{part}", spec.id()),
        eps,
    })
}

fn resolve_eps(flag: Option<f64>, src: &Source) -> Result<f64> {
    flag.or(src.eps)
        .ok_or_else(|| HfatError::Config("--eps is required unless --data is a training config".into()))
}

/// `fgsm`, `pgd<steps>`, `mim<steps>` or `cw<steps>`.
fn parse_attack(name: &str, eps: f64) -> Result<NamedAttack> {
    let bad = || HfatError::Config(format!("unknown attack {name:?} (expected fgsm, pgdN, mimN or cwN)"));
    if name == "fgsm" {
        return Ok(NamedAttack::new(name, AttackSpec::fgsm(eps)));
    }
    let split = name.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?;
    let steps: usize = name[split..].parse().map_err(|_| bad())?;
    let spec = match &name[..split] {
        "pgd" => AttackSpec::pgd(eps, steps),
        "mim" => AttackSpec::mim(eps, steps),
        "cw" => AttackSpec::cw(eps, steps),
        _ => return Err(bad()),
    };
    Ok(NamedAttack::new(name, spec))
}

fn model_id(path: &Path) -> String {
    path.display().to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HfatError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// `epoch_<n>.ckpt` files in a run directory, by epoch.
fn load_snapshots(dir: &Path) -> Result<Vec<Checkpoint>> {
    let entries = fs::read_dir(dir).map_err(|e| HfatError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| HfatError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(epoch) = name
            .strip_prefix("epoch_")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|e| e.parse::<u64>().ok())
        {
            found.push((epoch, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(HfatError::Config(format!("no snapshots in {}", dir.display())));
    }
    found.into_iter().map(|(_, p)| load_checkpoint(p)).collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, resume } => {
            let cfg: TrainConfig = report::read_json(&config)?;
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.mode.as_str(), cfg.seed)));
            let data = make_dataset(&cfg.dataset)?.train;
            let summary = run_training(&cfg, &data, &dir, RunOptions { resume, stop_after: None })?;
            if let Some(last) = summary.logs.last() {
                println!(
                    "{}: epoch {} loss {:.4} natural {:.4} robust {:.4}",
                    dir.display(),
                    last.epoch,
                    last.train_loss,
                    last.natural_acc,
                    last.robust_acc
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            eps,
            attacks,
            seed,
            out,
            csv,
        } => {
            let src = load_data(&data)?;
            let eps = resolve_eps(eps, &src)?;
            let suite = if attacks.is_empty() {
                default_suite(eps)
            } else {
                attacks.iter().map(|a| parse_attack(a, eps)).collect::<Result<_>>()?
            };
            let model = load_checkpoint(&ckpt)?;
            let rep = evaluate(&model, &model_id(&ckpt), &src.data, &src.id, &suite, seed)?;
            rep.write_json(&out)?;
            if let Some(csv) = csv {
                rep.write_csv(&csv)?;
            }
            println!("natural {:.4}", rep.natural);
            for (name, r) in &rep.attacks {
                println!("{name} {:.4}", r.accuracy);
            }
        }
        Command::Transfer {
            ckpts,
            data,
            eps,
            attack,
            seed,
            out,
        } => {
            let src = load_data(&data)?;
            let attack = parse_attack(&attack, resolve_eps(eps, &src)?)?;
            let models = ckpts
                .iter()
                .map(|p| Ok((model_id(p), load_checkpoint(p)?)))
                .collect::<Result<Vec<_>>>()?;
            transfer_matrix(&models, &src.data, &attack, seed)?.write_csv(&out)?;
        }
        Command::Hiders {
            run,
            data,
            eps,
            attack,
            intervals,
            failed_limit,
            seed,
            out,
        } => {
            let src = load_data(&data)?;
            let attack = parse_attack(&attack, resolve_eps(eps, &src)?)?;
            let snaps = load_snapshots(&run)?;
            let (x, y, bounds) = (&src.data.x, &src.data.y, src.data.bounds);
            let mut stats: HiderStats = proportion_report(&snaps, x, y, &attack.spec, &intervals, bounds, seed)?;
            let (probe, earlier) = snaps.split_last().expect("snapshots are non-empty");
            let mut rng = hfat::eval::attack_rng(seed, &attack.name);
            let (idx, x_failed, y_failed) = failed_set(probe, x, y, &attack.spec, bounds, &mut rng, failed_limit)?;
            stats.occurrences = occurrence_indices(earlier, probe, &x_failed, &y_failed, &idx)?;
            let mut ratios = Vec::new();
            for &interval in &intervals {
                ratios.extend(snapshot_ratios(&snaps, x, y, &attack.spec, interval, bounds, seed)?.0);
            }
            create_dir(&out)?;
            stats.write_proportions_csv(&out.join("proportions.csv"))?;
            stats.write_occurrences_csv(&out.join("occurrences.csv"))?;
            write_ratios_csv(&out.join("ratios.csv"), &ratios)?;
            println!(
                "{} proportion rows, {} gaps, {} ratio samples",
                stats.proportions.len(),
                stats.gaps.len(),
                ratios.len()
            );
        }
        Command::Fitprior { ratios, interval, out } => {
            let mut samples = read_ratios_csv(&ratios)?;
            samples.retain(|s| s.epoch_interval == interval);
            let prior = fit_gaussian(&samples)?;
            report::write_json(&out, &prior)?;
            println!("mu {} sigma {} n {}", prior.mu, prior.sigma, prior.n);
        }
        Command::Landscape {
            ckpt,
            data,
            index,
            mode,
            later,
            eps,
            extent,
            n,
            seed,
            out,
        } => {
            let src = load_data(&data)?;
            let extent = match extent {
                Some(e) => e,
                None => 1.5 * resolve_eps(eps, &src)?,
            };
            let model = load_checkpoint(&ckpt)?;
            let (index, direction) = match mode {
                ModeArg::Grad => (index.unwrap_or(0), LandscapeDirection::Gradient),
                ModeArg::Hider => {
                    let later = later
                        .ok_or_else(|| HfatError::Config("hider mode needs --later <checkpoint>".into()))?;
                    let later = load_checkpoint(&later)?;
                    let attack = parse_attack("pgd20", resolve_eps(eps, &src)?)?;
                    let mut rng = hfat::eval::attack_rng(seed, &attack.name);
                    let (x, y) = (&src.data.x, &src.data.y);
                    let adv = run_attack(&later.weights, x, y, &attack.spec, src.data.bounds, &mut rng)?;
                    let hiders = detect_hiders(&model, &later, x, y, &adv.delta)?;
                    let record = match index {
                        Some(i) => hiders.into_iter().find(|h| h.sample_index == i),
                        None => hiders.into_iter().next(),
                    };
                    (
                        index.or(record.as_ref().map(|r| r.sample_index)).unwrap_or(0),
                        LandscapeDirection::Hider(record),
                    )
                }
            };
            if index >= src.data.len() {
                return Err(HfatError::Config(format!(
                    "anchor index {index} out of range for {} samples",
                    src.data.len()
                )));
            }
            let anchor = src.data.x.row(index).to_vec();
            let label = src.data.y[index];
            let mut grid = landscape_grid(&model.weights, &anchor, label, &direction, extent, n, seed)?;
            grid.anchor_index = Some(index);
            grid.write_csv(&out)?;
            grid.write_meta(&out.with_extension("json"))?;
        }
        Command::Dataset { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| HfatError::Io {
                path: spec.clone(),
                source: e,
            })?;
            let spec = match serde_json::from_str::<TrainConfig>(&text) {
                Ok(cfg) => cfg.dataset,
                Err(_) => serde_json::from_str::<DatasetSpec>(&text)?,
            };
            let split = make_dataset(&spec)?;
            create_dir(&out)?;
            split.train.write_csv(&out.join("train.csv"))?;
            split.test.write_csv(&out.join("test.csv"))?;
            report::write_json(&out.join("spec.json"), &spec)?;
        }
    }
    Ok(())
}
