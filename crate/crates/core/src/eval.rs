//! Robustness evaluation, transfer matrices and loss-landscape grids.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{input_gradient, per_sample_cross_entropy, run_attack, AttackSpec, Objective};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{HfatError, Result};
use crate::hiders::HiderRecord;
use crate::model::{Checkpoint, ModelWeights};
use crate::report::{self, fmt_f64};

/// Rows attacked per batch.
pub const EVAL_CHUNK: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    pub spec: AttackSpec,
}

impl NamedAttack {
    pub fn new(name: impl Into<String>, spec: AttackSpec) -> Self {
        NamedAttack {
            name: name.into(),
            spec,
        }
    }
}

/// FGSM, PGD-20, PGD-100, MIM-20 and C&W-30, all with `alpha = eps/4` and
/// no random start.
pub fn default_suite(eps: f64) -> Vec<NamedAttack> {
    vec![
        NamedAttack::new("fgsm", AttackSpec::fgsm(eps)),
        NamedAttack::new("pgd20", AttackSpec::pgd(eps, 20)),
        NamedAttack::new("pgd100", AttackSpec::pgd(eps, 100)),
        NamedAttack::new("mim20", AttackSpec::mim(eps, 20)),
        NamedAttack::new("cw30", AttackSpec::cw(eps, 30)),
    ]
}

/// Private stream per (global seed, attack name).
pub fn attack_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream id stable across platforms and releases
    let id = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub spec: AttackSpec,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub natural: f64,
    pub seed: u64,
    pub attacks: BTreeMap<String, AttackResult>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        report::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        report::read_json(path)
    }

    /// `attack,accuracy`, with the clean accuracy on a `natural` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = std::iter::once(vec!["natural".to_string(), fmt_f64(self.natural)]).chain(
            self.attacks
                .iter()
                .map(|(name, r)| vec![name.clone(), fmt_f64(r.accuracy)]),
        );
        report::write_csv(path, &["attack", "accuracy"], rows)
    }
}

fn accuracy(model: &ModelWeights, x: &Tensor, y: &[usize]) -> Result<f64> {
    let pred = model.predict(x)?;
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

fn check_compatible(model: &ModelWeights, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(HfatError::Contract("evaluation set is empty".into()));
    }
    if model.spec().input_dim() != data.dim() {
        return Err(HfatError::Contract(format!(
            "model expects {}-dimensional inputs, dataset has {}",
            model.spec().input_dim(),
            data.dim()
        )));
    }
    if let Some(&bad) = data.y.iter().find(|&&l| l >= model.spec().n_classes()) {
        return Err(HfatError::Index {
            index: bad,
            len: model.spec().n_classes(),
        });
    }
    Ok(())
}

/// Adversarial inputs for the whole set, crafted in chunks of
/// [`EVAL_CHUNK`] rows from the attack's own stream.
pub fn craft(model: &ModelWeights, data: &Dataset, attack: &NamedAttack, seed: u64) -> Result<Tensor> {
    check_compatible(model, data)?;
    let mut rng = attack_rng(seed, &attack.name);
    let mut out = Vec::with_capacity(data.x.numel());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = data.x.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
        let adv = run_attack(model, &x, &y, &attack.spec, data.bounds, &mut rng)?;
        out.extend_from_slice(adv.x_adv.data());
    }
    Tensor::new(vec![data.len(), data.dim()], out)
}

/// Clean and per-attack accuracy. Attacks run on separate threads, each
/// with its own stream, so the result does not depend on scheduling.
pub fn evaluate(
    ckpt: &Checkpoint,
    model_id: &str,
    data: &Dataset,
    dataset_id: &str,
    attacks: &[NamedAttack],
    seed: u64,
) -> Result<EvalReport> {
    let model = &ckpt.weights;
    check_compatible(model, data)?;
    for a in attacks {
        a.spec.validate()?;
    }
    let natural = accuracy(model, &data.x, &data.y)?;
    let results: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = attacks
            .iter()
            .map(|a| s.spawn(move || accuracy(model, &craft(model, data, a, seed)?, &data.y)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("attack worker panicked")).collect()
    });
    let mut map = BTreeMap::new();
    for (a, acc) in attacks.iter().zip(results) {
        map.insert(
            a.name.clone(),
            AttackResult {
                spec: a.spec.clone(),
                accuracy: acc?,
            },
        );
    }
    Ok(EvalReport {
        model: model_id.to_string(),
        dataset: dataset_id.to_string(),
        natural,
        seed,
        attacks: map,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    /// `accuracy[s][t]`: target `t` on examples crafted against source `s`.
    pub accuracy: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["source"];
        header.extend(self.names.iter().map(String::as_str));
        report::write_csv(
            path,
            &header,
            self.names.iter().zip(&self.accuracy).map(|(n, row)| {
                std::iter::once(n.clone())
                    .chain(row.iter().map(|&v| fmt_f64(v)))
                    .collect::<Vec<_>>()
            }),
        )
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| HfatError::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.first().map(String::as_str) != Some("source") {
            return Err(HfatError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "first column must be `source`".into(),
            });
        }
        let names: Vec<String> = header[1..].to_vec();
        let mut accuracy = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != names.len() + 1 || rec[0] != names.get(i).cloned().unwrap_or_default() {
                return Err(HfatError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: "row does not match the header".into(),
                });
            }
            accuracy.push(
                rec.iter()
                    .skip(1)
                    .map(|v| report::float_field(path, line, v))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(TransferMatrix { names, accuracy })
    }
}

/// Black-box transfer: each source's adversarial set is crafted once (with
/// the same stream [`evaluate`] uses) and scored on every target.
pub fn transfer_matrix(
    models: &[(String, Checkpoint)],
    data: &Dataset,
    attack: &NamedAttack,
    seed: u64,
) -> Result<TransferMatrix> {
    if models.is_empty() {
        return Err(HfatError::Contract("transfer matrix needs at least one model".into()));
    }
    let dim = models[0].1.spec().input_dim();
    if let Some((name, _)) = models.iter().find(|(_, c)| c.spec().input_dim() != dim) {
        return Err(HfatError::Contract(format!("model {name} has a different input dimension")));
    }
    attack.spec.validate()?;
    let crafted: Vec<Result<Tensor>> = std::thread::scope(|s| {
        let handles: Vec<_> = models
            .iter()
            .map(|(_, c)| s.spawn(move || craft(&c.weights, data, attack, seed)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("transfer worker panicked")).collect()
    });
    let mut accuracy = Vec::with_capacity(models.len());
    for x_adv in crafted {
        let x_adv = x_adv?;
        accuracy.push(
            models
                .iter()
                .map(|(_, t)| self::accuracy(&t.weights, &x_adv, &data.y))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(TransferMatrix {
        names: models.iter().map(|(n, _)| n.clone()).collect(),
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum LandscapeDirection {
    /// Normalized input gradient of the cross-entropy at the anchor.
    Gradient,
    /// Normalized hider displacement; needs a detected record.
    Hider(Option<HiderRecord>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub n: usize,
    /// `grad-random` or `hider-random`.
    pub directions: String,
    pub extent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_index: Option<usize>,
    pub seed: u64,
    /// Offsets along both axes, ascending, with the origin in the middle.
    pub axis: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// `values[i][j]` is the loss at `anchor + axis[i]·d1 + axis[j]·d2`.
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
}

fn normalized(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(HfatError::Contract(format!("{what} direction is zero")));
    }
    Ok(v.into_iter().map(|a| a / norm).collect())
}

/// Loss surface over the plane spanned by `d1` and a seeded random `d2`
/// orthogonalized against it.
pub fn landscape_grid(
    model: &ModelWeights,
    anchor_x: &[f64],
    anchor_y: usize,
    direction: &LandscapeDirection,
    extent: f64,
    n: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    let d = model.spec().input_dim();
    if anchor_x.len() != d {
        return Err(HfatError::dim("landscape_grid", &[anchor_x.len()], &[d]));
    }
    if d < 2 {
        return Err(HfatError::Contract("landscape needs at least 2 input dimensions".into()));
    }
    if !(extent.is_finite() && extent > 0.0) {
        return Err(HfatError::Contract(format!("extent must be > 0, got {extent}")));
    }
    if n < 3 || n % 2 == 0 {
        return Err(HfatError::Contract(format!("grid size must be odd and ≥ 3, got {n}")));
    }
    if anchor_y >= model.spec().n_classes() {
        return Err(HfatError::Index {
            index: anchor_y,
            len: model.spec().n_classes(),
        });
    }
    let x = Tensor::new(vec![1, d], anchor_x.to_vec())?;
    let (d1, directions) = match direction {
        LandscapeDirection::Gradient => {
            let (_, g) = input_gradient(model, &x, &[anchor_y], Objective::CrossEntropy)?;
            (normalized(g.into_data(), "gradient")?, "grad-random")
        }
        LandscapeDirection::Hider(None) => {
            return Err(HfatError::Contract("hider direction needs a hider record".into()));
        }
        LandscapeDirection::Hider(Some(rec)) => {
            if rec.delta.len() != d {
                return Err(HfatError::dim("landscape_grid", &[rec.delta.len()], &[d]));
            }
            (normalized(rec.delta.clone(), "hider")?, "hider-random")
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d2 = Vec::new();
    for _ in 0..8 {
        let r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dot: f64 = r.iter().zip(&d1).map(|(a, b)| a * b).sum();
        let orth: Vec<f64> = r.iter().zip(&d1).map(|(a, b)| a - dot * b).collect();
        if let Ok(v) = normalized(orth, "random") {
            // one more pass removes what rounding left along d1
            let dot: f64 = v.iter().zip(&d1).map(|(a, b)| a * b).sum();
            d2 = normalized(v.iter().zip(&d1).map(|(a, b)| a - dot * b).collect(), "random")?;
            break;
        }
    }
    if d2.is_empty() {
        return Err(HfatError::Numeric("could not draw an orthogonal direction".into()));
    }

    let half = (n - 1) / 2;
    let axis: Vec<f64> = (0..n)
        .map(|i| extent * (i as f64 - half as f64) / half as f64)
        .collect();
    let mut points = Vec::with_capacity(n * n * d);
    for &a in &axis {
        for &b in &axis {
            if a == 0.0 && b == 0.0 {
                points.extend_from_slice(anchor_x);
            } else {
                points.extend((0..d).map(|k| anchor_x[k] + a * d1[k] + b * d2[k]));
            }
        }
    }
    let xs = Tensor::new(vec![n * n, d], points)?;
    let losses = per_sample_cross_entropy(&model.forward(&xs)?, &vec![anchor_y; n * n]);
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(HfatError::Numeric("non-finite loss on the landscape grid".into()));
    }
    Ok(LandscapeGrid {
        n,
        directions: directions.into(),
        extent,
        anchor_index: None,
        seed,
        axis,
        d1,
        d2,
        values: losses.chunks(n).map(<[f64]>::to_vec).collect(),
    })
}

impl LandscapeGrid {
    /// `n` columns headed by the `b` offsets; row `i` holds offset
    /// `axis[i]` along `d1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = self.axis.iter().map(|&b| format!("b={}", fmt_f64(b))).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        report::write_csv(
            path,
            &header,
            self.values.iter().map(|row| row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>()),
        )
    }

    /// Reads values written by [`LandscapeGrid::write_csv`].
    pub fn read_csv(path: &Path) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let f = std::fs::File::open(path).map_err(|e| HfatError::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
        let axis = r
            .headers()?
            .iter()
            .map(|h| {
                let v = h.strip_prefix("b=").ok_or_else(|| HfatError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("bad column {h:?}"),
                })?;
                report::float_field(path, 1, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            values.push(
                rec.iter()
                    .map(|v| report::float_field(path, i + 2, v))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok((axis, values))
    }

    /// Grid metadata (directions, extent, axis) without the values.
    pub fn write_meta(&self, path: &Path) -> Result<()> {
        report::write_json(path, self)
    }
}
