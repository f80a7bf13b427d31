use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Scalar};

/// Inputs `(n, features)` with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub x: DenseArray<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `idx` as a new split.
    pub fn gather(&self, idx: &[usize]) -> Split<T> {
        let d = self.features();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(&self.x.values()[i * d..(i + 1) * d]);
        }
        Split {
            x: DenseArray::new(vec![idx.len(), d], values).expect("gathered rows are consistent"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    fn cast<U: Scalar>(&self) -> Split<U> {
        Split {
            x: self.x.cast(),
            y: self.y.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Split<T>,
    pub val: Split<T>,
    pub test: Split<T>,
    pub classes: usize,
    /// Per-sample input shape, `[features]` unless declared otherwise.
    pub input_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[serde(alias = "synthetic_spirals")]
    Spirals,
    #[serde(alias = "synthetic_gaussians")]
    Gaussians,
    RawArrayFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub classes: usize,
    /// Standard deviation of the Gaussian noise added to every coordinate.
    pub noise: f64,
    pub seed: u64,
    /// Feature count of `gaussians`.
    pub dim: usize,
    /// Distance scale between `gaussians` class means.
    pub separation: f64,
    /// Revolutions of each spiral arm.
    pub turns: f64,
    /// Payload of `raw_array_file`; the sidecar is the same path with `.json` appended.
    pub path: Option<PathBuf>,
    /// Optional per-sample shape, for example `[1, 4, 4]` for a convolutional stem.
    pub input_shape: Option<Vec<usize>>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spirals,
            train: 600,
            val: 300,
            test: 600,
            classes: 3,
            noise: 0.05,
            seed: 0,
            dim: 8,
            separation: 2.0,
            turns: 1.0,
            path: None,
            input_shape: None,
        }
    }
}

/// Sidecar of a raw array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawArrayMeta {
    /// `[samples, feature dims...]`.
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: Option<usize>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("dataset.classes", "must be at least 2"));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::config("dataset", "train, val and test sizes must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("dataset.noise", "must be finite and non-negative"));
        }
        if self.kind == DatasetKind::Gaussians && self.dim == 0 {
            return Err(Error::config("dataset.dim", "must be positive"));
        }
        if self.kind == DatasetKind::RawArrayFile && self.path.is_none() {
            return Err(Error::config("dataset.path", "raw_array_file needs a path"));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Class `k` occupies arm `k` of an Archimedean spiral.
fn spiral_points(rng: &mut ChaCha8Rng, n: usize, spec: &DatasetSpec) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..spec.classes);
        let t: f64 = rng.gen_range(0.05..1.0);
        let angle = TAU * (class as f64 / spec.classes as f64 + spec.turns * t);
        x.push(t * angle.cos() + spec.noise * normal(rng));
        x.push(t * angle.sin() + spec.noise * normal(rng));
        y.push(class);
    }
    (x, y)
}

fn gaussian_means(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Vec<Vec<f64>> {
    (0..spec.classes)
        .map(|k| {
            if spec.dim >= spec.classes {
                (0..spec.dim).map(|d| if d == k { spec.separation } else { 0.0 }).collect()
            } else {
                (0..spec.dim).map(|_| spec.separation * normal(rng)).collect()
            }
        })
        .collect()
}

fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, means: &[Vec<f64>], spec: &DatasetSpec) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(spec.dim * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..spec.classes);
        for &m in &means[class] {
            x.push(m + spec.noise * normal(rng));
        }
        y.push(class);
    }
    (x, y)
}

fn split_f64(x: Vec<f64>, y: Vec<usize>, features: usize) -> Result<Split<f64>> {
    Ok(Split {
        x: DenseArray::new(vec![y.len(), features], x)?,
        y,
    })
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::DatasetFormat {
        offset: offset as u64,
        message: message.into(),
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads `n` samples of little-endian 32-bit floats with their sidecar.
pub fn read_raw_array(path: &Path) -> Result<(Split<f64>, Vec<usize>, Option<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RawArrayMeta = serde_json::from_str(&meta_text)?;
    let (&n, dims) = meta
        .shape
        .split_first()
        .ok_or_else(|| format_err(0, "sidecar shape is empty"))?;
    let features: usize = dims.iter().product();
    if n == 0 || features == 0 {
        return Err(format_err(0, format!("sidecar shape {:?} has a zero extent", meta.shape)));
    }
    if bytes.len() % 4 != 0 {
        return Err(format_err(bytes.len() - bytes.len() % 4, "payload ends in a partial 32-bit value"));
    }
    let expected = n * features * 4;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("sidecar shape {:?} needs {expected} bytes, payload has {}", meta.shape, bytes.len()),
        ));
    }
    if meta.labels.len() != n {
        return Err(format_err(0, format!("{} labels for {n} samples", meta.labels.len())));
    }
    let mut values = Vec::with_capacity(n * features);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(format_err(i * 4, "non-finite value"));
        }
        values.push(f64::from(v));
    }
    let input_shape = if dims.is_empty() { vec![1] } else { dims.to_vec() };
    Ok((split_f64(values, meta.labels, features)?, input_shape, meta.classes))
}

/// Generates (or loads) the three splits. Synthetic data is drawn from one
/// seeded stream in train, val, test order, so splits never share a draw.
pub fn gen_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes = [spec.train, spec.val, spec.test];
    let (splits, features, input_shape, classes): (Vec<Split<f64>>, usize, Vec<usize>, usize) = match spec.kind {
        DatasetKind::Spirals => {
            let s = sizes
                .iter()
                .map(|&n| {
                    let (x, y) = spiral_points(&mut rng, n, spec);
                    split_f64(x, y, 2)
                })
                .collect::<Result<_>>()?;
            (s, 2, vec![2], spec.classes)
        }
        DatasetKind::Gaussians => {
            let means = gaussian_means(&mut rng, spec);
            let s = sizes
                .iter()
                .map(|&n| {
                    let (x, y) = gaussian_points(&mut rng, n, &means, spec);
                    split_f64(x, y, spec.dim)
                })
                .collect::<Result<_>>()?;
            (s, spec.dim, vec![spec.dim], spec.classes)
        }
        DatasetKind::RawArrayFile => {
            let path = spec.path.as_deref().expect("validated");
            let (all, shape, declared) = read_raw_array(path)?;
            let classes = declared.unwrap_or(spec.classes);
            if let Some((i, &l)) = all.y.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(Error::LabelOutOfRange { sample: i, label: l, classes });
            }
            let total: usize = sizes.iter().sum();
            if total > all.len() {
                return Err(Error::Dataset(format!("splits need {total} samples, file has {}", all.len())));
            }
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.shuffle(&mut rng);
            let mut start = 0;
            let s = sizes
                .iter()
                .map(|&n| {
                    let part = all.gather(&order[start..start + n]);
                    start += n;
                    part
                })
                .collect();
            (s, all.features(), shape, classes)
        }
    };
    let input_shape = match &spec.input_shape {
        Some(shape) if shape.iter().product::<usize>() != features => {
            return Err(Error::config(
                "dataset.input_shape",
                format!("{shape:?} does not hold {features} features"),
            ))
        }
        Some(shape) => shape.clone(),
        None => input_shape,
    };
    let [train, val, test]: [Split<f64>; 3] = splits.try_into().expect("three splits");
    Ok(Dataset {
        train: train.cast(),
        val: val.cast(),
        test: test.cast(),
        classes,
        input_shape,
    })
}
