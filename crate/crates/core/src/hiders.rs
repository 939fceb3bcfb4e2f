//! Hider detection across epoch snapshots, the relative-position ratio, its
//! Gaussian prior, and the proportion/occurrence statistics.
//!
//! A hider for the pair of epochs `i < j` is an input `x + δ` (δ inside the
//! ε-ball, possibly zero) that the epoch-`i` model classifies correctly and
//! the epoch-`j` model gets wrong.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{input_gradient, run_attack, AttackSpec, Bounds, Objective};
use crate::autodiff::Tensor;
use crate::error::{HfatError, Result};
use crate::model::{Checkpoint, ModelWeights};
use crate::report::{self, fmt_f64};

/// Projections of the adversarial displacement onto the gradient direction
/// below this are treated as degenerate and skipped.
pub const RATIO_FLOOR: f64 = 1e-8;
pub const DEFAULT_R_MAX: f64 = 2.0;
pub const DEFAULT_INTERVALS: [u64; 4] = [1, 5, 20, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiderKind {
    Adversarial,
    Natural,
}

impl HiderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HiderKind::Adversarial => "adversarial",
            HiderKind::Natural => "natural",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "adversarial" => Some(HiderKind::Adversarial),
            "natural" => Some(HiderKind::Natural),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiderRecord {
    pub sample_index: usize,
    pub epoch_i: u64,
    pub epoch_j: u64,
    pub delta: Vec<f64>,
    pub kind: HiderKind,
}

impl HiderRecord {
    /// `x + delta` for the record's sample row.
    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.delta).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub r: f64,
    pub epoch_interval: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub interval: u64,
}

impl GaussianPrior {
    /// Prior given directly by configuration rather than fitted.
    pub fn fixed(mu: f64, sigma: f64) -> Self {
        GaussianPrior {
            mu,
            sigma,
            n: 0,
            interval: 1,
        }
    }
}

/// Samples correct under `ckpt_i` and wrong under `ckpt_j` at `x + deltas`.
pub fn detect_hiders(
    ckpt_i: &Checkpoint,
    ckpt_j: &Checkpoint,
    x: &Tensor,
    y: &[usize],
    deltas: &Tensor,
) -> Result<Vec<HiderRecord>> {
    if ckpt_j.epoch <= ckpt_i.epoch {
        return Err(HfatError::Contract(format!(
            "hider detection needs epoch_j > epoch_i, got {} and {}",
            ckpt_i.epoch, ckpt_j.epoch
        )));
    }
    if x.shape() != deltas.shape() {
        return Err(HfatError::dim("detect_hiders", x.shape(), deltas.shape()));
    }
    let x_hat = x.add(deltas)?;
    let pred_i = ckpt_i.weights.predict(&x_hat)?;
    let pred_j = ckpt_j.weights.predict(&x_hat)?;
    if y.len() != pred_i.len() {
        return Err(HfatError::dim("detect_hiders", &[pred_i.len()], &[y.len()]));
    }
    let mut out = Vec::new();
    for (k, &label) in y.iter().enumerate() {
        if pred_i[k] == label && pred_j[k] != label {
            let delta = deltas.row(k).to_vec();
            let kind = if delta.iter().all(|&v| v == 0.0) {
                HiderKind::Natural
            } else {
                HiderKind::Adversarial
            };
            out.push(HiderRecord {
                sample_index: k,
                epoch_i: ckpt_i.epoch,
                epoch_j: ckpt_j.epoch,
                delta,
                kind,
            });
        }
    }
    Ok(out)
}

/// `r = ⟨x_hider − x, ĝ⟩ / ⟨x_adv − x, ĝ⟩` with `ĝ = grad_dir / ‖grad_dir‖₂`.
///
/// Returns `None` when the denominator is below [`RATIO_FLOOR`] (adversarial
/// displacement orthogonal to, or against, the gradient). Projections are
/// signed.
pub fn compute_ratio(
    x: &[f64],
    x_hider: &[f64],
    x_adv: &[f64],
    grad_dir: &[f64],
    epoch_interval: u64,
) -> Option<RatioSample> {
    let norm = grad_dir.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    let proj = |p: &[f64]| -> f64 {
        p.iter()
            .zip(x)
            .zip(grad_dir)
            .map(|((a, b), g)| (a - b) * (g / norm))
            .sum()
    };
    let den = proj(x_adv);
    if den < RATIO_FLOOR {
        return None;
    }
    let r = proj(x_hider) / den;
    r.is_finite().then_some(RatioSample { r, epoch_interval })
}

/// Ratios for a batch of hiders under `model`, the epoch-`i` snapshot whose
/// gradient at each clean `x` sets the direction. Returns the samples and
/// the number skipped by the floor.
pub fn hider_ratios(
    model: &ModelWeights,
    x: &Tensor,
    y: &[usize],
    x_hider: &Tensor,
    x_adv: &Tensor,
    epoch_interval: u64,
) -> Result<(Vec<RatioSample>, usize)> {
    if x.shape() != x_hider.shape() || x.shape() != x_adv.shape() {
        return Err(HfatError::dim("hider_ratios", x.shape(), x_hider.shape()));
    }
    if y.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let (_, grad) = input_gradient(model, x, y, Objective::CrossEntropy)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for k in 0..y.len() {
        match compute_ratio(x.row(k), x_hider.row(k), x_adv.row(k), grad.row(k), epoch_interval) {
            Some(s) => out.push(s),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Sample mean and population (maximum-likelihood) standard deviation.
pub fn fit_gaussian(samples: &[RatioSample]) -> Result<GaussianPrior> {
    if samples.len() < 2 {
        return Err(HfatError::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    let interval = samples[0].epoch_interval;
    if samples.iter().any(|s| s.epoch_interval != interval) {
        return Err(HfatError::Contract(
            "ratio samples mix epoch intervals; fit one interval at a time".into(),
        ));
    }
    let n = samples.len() as f64;
    // shifted by the first sample so constant inputs reproduce exactly
    let shift = samples[0].r;
    let mu = shift + samples.iter().map(|s| s.r - shift).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.r - mu).powi(2)).sum::<f64>() / n;
    Ok(GaussianPrior {
        mu,
        sigma: var.sqrt(),
        n: samples.len(),
        interval,
    })
}

/// One draw from `N(mu, sigma²)` clipped to `[0, r_max]`.
pub fn sample_ratio<R: Rng + ?Sized>(prior: &GaussianPrior, r_max: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (prior.mu + prior.sigma * z).clamp(0.0, r_max)
}

/// Ratio draws with an explicit randomness policy.
///
/// In deterministic mode an entropy-backed sampler refuses to draw.
#[derive(Debug)]
pub struct RatioSampler {
    rng: Option<ChaCha8Rng>,
    deterministic: bool,
    pub r_max: f64,
}

impl RatioSampler {
    pub fn seeded(seed: u64, r_max: f64) -> Self {
        RatioSampler {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            deterministic: true,
            r_max,
        }
    }

    pub fn from_entropy(r_max: f64, deterministic: bool) -> Self {
        RatioSampler {
            rng: None,
            deterministic,
            r_max,
        }
    }

    pub fn sample(&mut self, prior: &GaussianPrior) -> Result<f64> {
        match &mut self.rng {
            Some(rng) => Ok(sample_ratio(prior, self.r_max, rng)),
            None if self.deterministic => Err(HfatError::Contract(
                "unseeded ratio sampling requested in deterministic mode".into(),
            )),
            None => Ok(sample_ratio(prior, self.r_max, &mut rand::rng())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionRow {
    pub present_epoch: u64,
    pub interval: u64,
    pub kind: HiderKind,
    pub proportion: f64,
}

/// A requested (present epoch, interval) cell with no value: the later
/// snapshot is missing, or nothing was defended at the present epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProportionGap {
    pub present_epoch: u64,
    pub interval: u64,
    pub kind: HiderKind,
    pub reason: GapReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapReason {
    MissingSnapshot,
    EmptyBase,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct HiderStats {
    pub proportions: Vec<ProportionRow>,
    pub gaps: Vec<ProportionGap>,
    pub occurrences: Vec<OccurrenceSet>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccurrenceSet {
    pub probe_epoch: u64,
    pub earlier_epoch: u64,
    pub indices: Vec<usize>,
}

impl HiderStats {
    pub fn proportion(&self, present_epoch: u64, interval: u64, kind: HiderKind) -> Option<f64> {
        self.proportions
            .iter()
            .find(|r| r.present_epoch == present_epoch && r.interval == interval && r.kind == kind)
            .map(|r| r.proportion)
    }

    pub fn write_proportions_csv(&self, path: &Path) -> Result<()> {
        report::write_csv(
            path,
            &["present_epoch", "interval", "kind", "proportion"],
            self.proportions.iter().map(|r| {
                vec![
                    r.present_epoch.to_string(),
                    r.interval.to_string(),
                    r.kind.as_str().to_string(),
                    fmt_f64(r.proportion),
                ]
            }),
        )
    }

    pub fn read_proportions_csv(path: &Path) -> Result<Vec<ProportionRow>> {
        let rows = report::read_csv(path, &["present_epoch", "interval", "kind", "proportion"])?;
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let line = i + 2;
                Ok(ProportionRow {
                    present_epoch: report::field(path, line, &r[0])?,
                    interval: report::field(path, line, &r[1])?,
                    kind: HiderKind::parse(&r[2]).ok_or_else(|| HfatError::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("unknown hider kind {:?}", r[2]),
                    })?,
                    proportion: report::float_field(path, line, &r[3])?,
                })
            })
            .collect()
    }

    pub fn write_occurrences_csv(&self, path: &Path) -> Result<()> {
        report::write_csv(
            path,
            &["probe_epoch", "earlier_epoch", "sample_index"],
            self.occurrences.iter().flat_map(|o| {
                o.indices.iter().map(move |&i| {
                    vec![o.probe_epoch.to_string(), o.earlier_epoch.to_string(), i.to_string()]
                })
            }),
        )
    }

    /// Reads occurrence rows back, grouped by (probe, earlier) epoch pair.
    /// Pairs with an empty index set have no rows and do not come back.
    pub fn read_occurrences_csv(path: &Path) -> Result<Vec<OccurrenceSet>> {
        let rows = report::read_csv(path, &["probe_epoch", "earlier_epoch", "sample_index"])?;
        let mut grouped: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            let line = i + 2;
            let key = (report::field(path, line, &r[0])?, report::field(path, line, &r[1])?);
            grouped.entry(key).or_default().push(report::field(path, line, &r[2])?);
        }
        Ok(grouped
            .into_iter()
            .map(|((probe_epoch, earlier_epoch), indices)| OccurrenceSet {
                probe_epoch,
                earlier_epoch,
                indices,
            })
            .collect())
    }
}

pub fn write_ratios_csv(path: &Path, samples: &[RatioSample]) -> Result<()> {
    report::write_csv(
        path,
        &["r", "epoch_interval"],
        samples.iter().map(|s| vec![fmt_f64(s.r), s.epoch_interval.to_string()]),
    )
}

pub fn read_ratios_csv(path: &Path) -> Result<Vec<RatioSample>> {
    let rows = report::read_csv(path, &["r", "epoch_interval"])?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RatioSample {
                r: report::float_field(path, i + 2, &r[0])?,
                epoch_interval: report::field(path, i + 2, &r[1])?,
            })
        })
        .collect()
}

fn correct(model: &ModelWeights, x: &Tensor, y: &[usize]) -> Result<Vec<bool>> {
    Ok(model
        .predict(x)?
        .into_iter()
        .zip(y)
        .map(|(p, &l)| p == l)
        .collect())
}

/// Proportion table from precomputed per-snapshot adversarial inputs.
///
/// `adv_inputs[k]` are the adversarial inputs crafted against
/// `snapshots[k]`. For each present snapshot, kind and interval, the base set
/// is the samples the present snapshot gets right on that kind's input; the
/// proportion is the fraction of the base set the snapshot `interval` epochs
/// later gets wrong on the same input.
pub fn proportion_table(
    snapshots: &[Checkpoint],
    x: &Tensor,
    y: &[usize],
    adv_inputs: &[Tensor],
    intervals: &[u64],
) -> Result<HiderStats> {
    if adv_inputs.len() != snapshots.len() {
        return Err(HfatError::Contract(format!(
            "{} adversarial sets for {} snapshots",
            adv_inputs.len(),
            snapshots.len()
        )));
    }
    let by_epoch: BTreeMap<u64, usize> = snapshots.iter().enumerate().map(|(k, s)| (s.epoch, k)).collect();
    if by_epoch.len() != snapshots.len() {
        return Err(HfatError::Contract("duplicate snapshot epochs".into()));
    }
    let mut stats = HiderStats::default();
    for (&epoch, &k) in &by_epoch {
        let present = &snapshots[k].weights;
        for kind in [HiderKind::Adversarial, HiderKind::Natural] {
            let input = match kind {
                HiderKind::Adversarial => &adv_inputs[k],
                HiderKind::Natural => x,
            };
            let base = correct(present, input, y)?;
            let n_base = base.iter().filter(|&&b| b).count();
            for &interval in intervals {
                let gap = |reason| ProportionGap {
                    present_epoch: epoch,
                    interval,
                    kind,
                    reason,
                };
                let Some(&later) = by_epoch.get(&(epoch + interval)) else {
                    stats.gaps.push(gap(GapReason::MissingSnapshot));
                    continue;
                };
                if n_base == 0 {
                    stats.gaps.push(gap(GapReason::EmptyBase));
                    continue;
                }
                let later_ok = correct(&snapshots[later].weights, input, y)?;
                let failed = base.iter().zip(&later_ok).filter(|(&b, &ok)| b && !ok).count();
                stats.proportions.push(ProportionRow {
                    present_epoch: epoch,
                    interval,
                    kind,
                    proportion: failed as f64 / n_base as f64,
                });
            }
        }
    }
    Ok(stats)
}

/// Seed of the attack stream for a snapshot in hider statistics.
fn snapshot_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Crafts `attack` against every snapshot and builds the proportion table.
pub fn proportion_report(
    snapshots: &[Checkpoint],
    x: &Tensor,
    y: &[usize],
    attack: &AttackSpec,
    intervals: &[u64],
    bounds: Option<Bounds>,
    seed: u64,
) -> Result<HiderStats> {
    let adv = snapshots
        .iter()
        .map(|s| {
            run_attack(&s.weights, x, y, attack, bounds, &mut snapshot_rng(seed, s.epoch))
                .map(|a| a.x_adv)
        })
        .collect::<Result<Vec<_>>>()?;
    proportion_table(snapshots, x, y, &adv, intervals)
}

/// For each earlier snapshot, the members of the probe's failed set that it
/// classifies correctly.
///
/// `x_failed` holds the inputs the probe fails on, one row per entry of
/// `failed_indices` (dataset indices reported back in the result).
pub fn occurrence_indices(
    earlier: &[Checkpoint],
    probe: &Checkpoint,
    x_failed: &Tensor,
    y_failed: &[usize],
    failed_indices: &[usize],
) -> Result<Vec<OccurrenceSet>> {
    if y_failed.len() != failed_indices.len() || x_failed.rows() != y_failed.len() {
        return Err(HfatError::dim(
            "occurrence_indices",
            &[x_failed.rows(), y_failed.len()],
            &[failed_indices.len()],
        ));
    }
    if y_failed.is_empty() {
        return Ok(earlier
            .iter()
            .map(|e| OccurrenceSet {
                probe_epoch: probe.epoch,
                earlier_epoch: e.epoch,
                indices: Vec::new(),
            })
            .collect());
    }
    if correct(&probe.weights, x_failed, y_failed)?.iter().any(|&c| c) {
        return Err(HfatError::Contract(
            "failed set contains samples the probe snapshot defends".into(),
        ));
    }
    earlier
        .iter()
        .map(|e| {
            let ok = correct(&e.weights, x_failed, y_failed)?;
            Ok(OccurrenceSet {
                probe_epoch: probe.epoch,
                earlier_epoch: e.epoch,
                indices: failed_indices
                    .iter()
                    .zip(ok)
                    .filter_map(|(&i, ok)| ok.then_some(i))
                    .collect(),
            })
        })
        .collect()
}

/// Adversarial inputs the probe fails on: (dataset indices, inputs, labels),
/// truncated to the first `limit` failures.
pub fn failed_set<R: Rng + ?Sized>(
    probe: &Checkpoint,
    x: &Tensor,
    y: &[usize],
    attack: &AttackSpec,
    bounds: Option<Bounds>,
    rng: &mut R,
    limit: usize,
) -> Result<(Vec<usize>, Tensor, Vec<usize>)> {
    let adv = run_attack(&probe.weights, x, y, attack, bounds, rng)?;
    let ok = correct(&probe.weights, &adv.x_adv, y)?;
    let idx: Vec<usize> = ok
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| (!c).then_some(i))
        .take(limit)
        .collect();
    let labels = idx.iter().map(|&i| y[i]).collect();
    let rows = if idx.is_empty() {
        Tensor::zeros(&[1, x.cols()])
    } else {
        adv.x_adv.select_rows(&idx)
    };
    Ok((idx, rows, labels))
}

/// Ratio samples from hiders between snapshots `interval` epochs apart.
///
/// Hiders are inputs crafted against the later snapshot that the earlier
/// one still defends; the ratio uses the earlier snapshot's own adversarial
/// example and input gradient. Snapshot pairs with a missing partner are
/// skipped.
pub fn snapshot_ratios(
    snapshots: &[Checkpoint],
    x: &Tensor,
    y: &[usize],
    attack: &AttackSpec,
    interval: u64,
    bounds: Option<Bounds>,
    seed: u64,
) -> Result<(Vec<RatioSample>, usize)> {
    if interval == 0 {
        return Err(HfatError::Contract("ratio interval must be ≥ 1".into()));
    }
    let by_epoch: BTreeMap<u64, &Checkpoint> = snapshots.iter().map(|s| (s.epoch, s)).collect();
    let mut adv: BTreeMap<u64, Tensor> = BTreeMap::new();
    let mut craft = |c: &Checkpoint| -> Result<Tensor> {
        if let Some(t) = adv.get(&c.epoch) {
            return Ok(t.clone());
        }
        let t = run_attack(&c.weights, x, y, attack, bounds, &mut snapshot_rng(seed, c.epoch))?.x_adv;
        adv.insert(c.epoch, t.clone());
        Ok(t)
    };
    let mut out = Vec::new();
    let mut skipped = 0;
    for (&epoch, &early) in &by_epoch {
        let Some(&late) = by_epoch.get(&(epoch + interval)) else {
            continue;
        };
        let adv_late = craft(late)?;
        let adv_early = craft(early)?;
        let hiders = detect_hiders(early, late, x, y, &adv_late.sub(x)?)?;
        if hiders.is_empty() {
            continue;
        }
        let rows: Vec<usize> = hiders.iter().map(|h| h.sample_index).collect();
        let labels: Vec<usize> = rows.iter().map(|&k| y[k]).collect();
        let (s, k) = hider_ratios(
            &early.weights,
            &x.select_rows(&rows),
            &labels,
            &adv_late.select_rows(&rows),
            &adv_early.select_rows(&rows),
            interval,
        )?;
        out.extend(s);
        skipped += k;
    }
    Ok((out, skipped))
}
