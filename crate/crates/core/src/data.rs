//! Synthetic generators (two moons, Gaussian blobs) and CSV ingestion.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::Bounds;
use crate::autodiff::Tensor;
use crate::error::{HfatError, Result};
use crate::report::{self, fmt_f64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Moons,
    Blobs,
    Csv,
}

fn default_train_fraction() -> f64 {
    2.0 / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub n_samples: usize,
    #[serde(default = "two")]
    pub n_classes: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "two")]
    pub dim: usize,
    /// Fraction of samples in the training split; the rest is the test split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    /// Source file for `csv` datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn two() -> usize {
    2
}

impl DatasetSpec {
    /// Two moons, noise 0.2, 2000 train / 1000 test, unbounded.
    pub fn desk_moons(seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Moons,
            n_samples: 3000,
            n_classes: 2,
            noise: 0.2,
            dim: 2,
            train_fraction: 2.0 / 3.0,
            seed,
            bounds: None,
            path: None,
        }
    }

    /// Ten Gaussian blobs in `[0,1]^16`.
    pub fn desk_blobs(seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Blobs,
            n_samples: 3000,
            n_classes: 10,
            noise: 0.1,
            dim: 16,
            train_fraction: 2.0 / 3.0,
            seed,
            bounds: Some(Bounds::UNIT),
            path: None,
        }
    }

    pub fn id(&self) -> String {
        match self.kind {
            DatasetKind::Csv => format!(
                "csv:{}",
                self.path.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
            ),
            kind => format!(
                "{}-n{}-c{}-d{}-noise{}-seed{}",
                match kind {
                    DatasetKind::Moons => "moons",
                    _ => "blobs",
                },
                self.n_samples,
                self.n_classes,
                self.dim,
                self.noise,
                self.seed
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HfatError::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(HfatError::Config(format!("noise must be ≥ 0, got {}", self.noise)));
        }
        if let Some(b) = self.bounds {
            if !(b.lo < b.hi) {
                return Err(HfatError::Config(format!("empty domain [{}, {}]", b.lo, b.hi)));
            }
        }
        match self.kind {
            DatasetKind::Moons => {
                if self.dim != 2 || self.n_classes != 2 {
                    return Err(HfatError::Config("moons are 2-D with 2 classes".into()));
                }
                if self.n_samples < 4 {
                    return Err(HfatError::Config("moons need at least 4 samples".into()));
                }
            }
            DatasetKind::Blobs => {
                if self.dim == 0 || self.n_classes < 2 || self.n_samples < 2 * self.n_classes {
                    return Err(HfatError::Config(
                        "blobs need dim ≥ 1, ≥ 2 classes and ≥ 2 samples per class".into(),
                    ));
                }
            }
            DatasetKind::Csv => {
                if self.path.is_none() {
                    return Err(HfatError::Config("csv dataset needs a path".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub bounds: Option<Bounds>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            bounds: self.bounds,
        }
    }

    /// Header `x0,…,x{d-1},label`; floats with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        header.push("label".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        report::write_csv(
            path,
            &header,
            (0..self.len()).map(|i| {
                self.x
                    .row(i)
                    .iter()
                    .map(|&v| fmt_f64(v))
                    .chain(std::iter::once(self.y[i].to_string()))
                    .collect::<Vec<_>>()
            }),
        )
    }

    /// Reads a file written by [`Dataset::write_csv`] (any `x*` column count).
    /// The class count is the largest label plus one unless given.
    pub fn read_csv(path: &Path, n_classes: Option<usize>, bounds: Option<Bounds>) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| HfatError::io(path, e))?;
        let parse_err = |line: usize, msg: String| HfatError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols.last() != Some(&"label") {
            return Err(parse_err(1, format!("header must be x0,…,label; got {header:?}")));
        }
        let d = cols.len() - 1;
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(parse_err(i + 1, format!("expected {} fields, got {}", d + 1, fields.len())));
            }
            for f in &fields[..d] {
                let v = report::parse_f64(f).map_err(|m| parse_err(i + 1, m))?;
                if !v.is_finite() {
                    return Err(parse_err(i + 1, format!("non-finite value {f:?}")));
                }
                data.push(v);
            }
            let label: usize = fields[d]
                .trim()
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad label {:?}: {e}", fields[d])))?;
            y.push(label);
        }
        if y.is_empty() {
            return Err(parse_err(2, "no data rows".into()));
        }
        let max_label = *y.iter().max().unwrap();
        let n_classes = n_classes.unwrap_or(max_label + 1);
        if max_label >= n_classes {
            return Err(HfatError::Index {
                index: max_label,
                len: n_classes,
            });
        }
        Ok(Dataset {
            x: Tensor::new(vec![y.len(), d], data)?,
            y,
            n_classes,
            bounds,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn moons(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let n_out = spec.n_samples / 2;
    let n_in = spec.n_samples - n_out;
    let mut data = Vec::with_capacity(2 * spec.n_samples);
    let mut y = Vec::with_capacity(spec.n_samples);
    let t = |i: usize, n: usize| if n > 1 { PI * i as f64 / (n - 1) as f64 } else { 0.0 };
    for i in 0..n_out {
        data.extend([t(i, n_out).cos(), t(i, n_out).sin()]);
        y.push(0);
    }
    for i in 0..n_in {
        data.extend([1.0 - t(i, n_in).cos(), 0.5 - t(i, n_in).sin()]);
        y.push(1);
    }
    if spec.noise > 0.0 {
        for v in &mut data {
            *v += spec.noise * normal(rng);
        }
    }
    (data, y)
}

fn blobs(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let (lo, hi) = spec.bounds.map_or((-1.0, 1.0), |b| (b.lo, b.hi));
    let (c_lo, c_hi) = (lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo));
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(c_lo..=c_hi)).collect())
        .collect();
    let mut data = Vec::with_capacity(spec.dim * spec.n_samples);
    let mut y = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let c = i % spec.n_classes;
        for &m in &centers[c] {
            let mut v = m + spec.noise * normal(rng);
            if let Some(b) = spec.bounds {
                v = b.clamp(v);
            }
            data.push(v);
        }
        y.push(c);
    }
    (data, y)
}

/// Deterministic generation (or ingestion) followed by a seeded shuffle and
/// a train/test split. Splits are disjoint by construction.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let full = match spec.kind {
        DatasetKind::Moons | DatasetKind::Blobs => {
            let (data, y) = if spec.kind == DatasetKind::Moons {
                moons(spec, &mut rng)
            } else {
                blobs(spec, &mut rng)
            };
            Dataset {
                x: Tensor::new(vec![y.len(), spec.dim], data)?,
                y,
                n_classes: spec.n_classes,
                bounds: spec.bounds,
            }
        }
        DatasetKind::Csv => {
            let path = spec.path.as_deref().unwrap();
            Dataset::read_csv(path, Some(spec.n_classes), spec.bounds)?
        }
    };
    if full.len() < 2 {
        return Err(HfatError::Config("dataset needs at least 2 samples to split".into()));
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((full.len() as f64 * spec.train_fraction).round() as usize).clamp(1, full.len() - 1);
    Ok(Split {
        train: full.subset(&order[..n_train]),
        test: full.subset(&order[n_train..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_same_bytes() {
        let s = DatasetSpec::desk_moons(3);
        assert_eq!(make_dataset(&s).unwrap(), make_dataset(&s).unwrap());
        let other = make_dataset(&DatasetSpec::desk_moons(4)).unwrap();
        assert_ne!(make_dataset(&s).unwrap(), other);
    }

    #[test]
    fn desk_moons_split_sizes() {
        let split = make_dataset(&DatasetSpec::desk_moons(0)).unwrap();
        assert_eq!(split.train.len(), 2000);
        assert_eq!(split.test.len(), 1000);
        assert_eq!(split.train.dim(), 2);
    }

    #[test]
    fn splits_are_disjoint() {
        // noiseless moons points are all distinct, so rows identify samples
        let spec = DatasetSpec {
            noise: 0.0,
            n_samples: 200,
            ..DatasetSpec::desk_moons(1)
        };
        let split = make_dataset(&spec).unwrap();
        for i in 0..split.test.len() {
            let r = split.test.x.row(i);
            assert!((0..split.train.len()).all(|j| split.train.x.row(j) != r));
        }
    }

    #[test]
    fn noiseless_blobs_are_linearly_separable() {
        let spec = DatasetSpec {
            kind: DatasetKind::Blobs,
            n_samples: 200,
            n_classes: 2,
            noise: 0.0,
            dim: 3,
            train_fraction: 0.5,
            seed: 5,
            bounds: Some(Bounds::UNIT),
            path: None,
        };
        let split = make_dataset(&spec).unwrap();
        let all = [&split.train, &split.test];
        // linear probe: the perpendicular bisector of the two class means
        let mean = |c: usize| -> Vec<f64> {
            let rows: Vec<&[f64]> = all
                .iter()
                .flat_map(|d| (0..d.len()).filter(move |&i| d.y[i] == c).map(move |i| d.x.row(i)))
                .collect();
            (0..3).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect()
        };
        let (m0, m1) = (mean(0), mean(1));
        let w: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
        let b: f64 = -m1.iter().zip(&m0).zip(&w).map(|((a, c), wk)| 0.5 * (a + c) * wk).sum::<f64>();
        for d in all {
            for i in 0..d.len() {
                let s: f64 = d.x.row(i).iter().zip(&w).map(|(x, wk)| x * wk).sum::<f64>() + b;
                assert_eq!(usize::from(s > 0.0), d.y[i]);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = make_dataset(&DatasetSpec::desk_blobs(2)).unwrap();
        let path = dir.path().join("train.csv");
        split.train.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, Some(10), Some(Bounds::UNIT)).unwrap();
        assert_eq!(back, split.train);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x0,x1,label\n0.1,0.2,0\n0.3,oops,1\n").unwrap();
        match Dataset::read_csv(&path, None, None) {
            Err(HfatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "x0,x1,label\n0.1,0.2\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path, None, None), Err(HfatError::Parse { line: 2, .. })));
    }
}
