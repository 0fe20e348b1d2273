//! Datasets, synthetic generators, and partitioning across devices.

mod idx;

pub use idx::{load_idx, load_idx_dataset, parse_idx, IdxData};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("malformed IDX data at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn config(msg: impl Into<String>) -> DataError {
    DataError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

/// A feature matrix stored row-major, with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dims: usize,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Labels { classes, .. } => Some(*classes),
            Targets::Values(_) => None,
        }
    }

    /// Copies the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.dims);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        let targets = match &self.targets {
            Targets::Labels { labels, classes } => {
                Targets::Labels { labels: rows.iter().map(|&r| labels[r]).collect(), classes: *classes }
            }
            Targets::Values(v) => Targets::Values(rows.iter().map(|&r| v[r]).collect()),
        };
        Dataset { features, dims: self.dims, targets }
    }

    /// Splits into the first `len − tail` rows and the last `tail` rows.
    pub fn split_tail(&self, tail: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(tail);
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&rest))
    }
}

/// Gaussian class clusters: class means drawn from `N(0, 1)` per coordinate,
/// unit-variance noise around them. Labels cycle through the classes before
/// the rows are shuffled, so class counts differ by at most one.
pub fn synth_classification<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    dims: usize,
    classes: usize,
) -> Result<Dataset, DataError> {
    synth_classification_scaled(rng, n, dims, classes, 1.0)
}

/// [`synth_classification`] with class means drawn from `N(0, mean_std²)`.
/// Smaller `mean_std` makes the classes overlap more.
pub fn synth_classification_scaled<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    dims: usize,
    classes: usize,
    mean_std: f64,
) -> Result<Dataset, DataError> {
    if classes == 0 || dims == 0 || n < classes {
        return Err(config(format!(
            "need n >= classes >= 1 and dims >= 1 (n = {n}, classes = {classes}, dims = {dims})"
        )));
    }
    let means: Vec<f64> = (0..classes * dims)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mean_std * z
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(n * dims);
    for &c in &labels {
        for j in 0..dims {
            let noise: f64 = StandardNormal.sample(rng);
            features.push(means[c * dims + j] + noise);
        }
    }
    Ok(Dataset { features, dims, targets: Targets::Labels { labels, classes } })
}

/// `y = w_trueᵀx + noise_std·ε` with standard normal features and noise.
pub fn synth_regression<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    w_true: &[f64],
    noise_std: f64,
) -> Result<Dataset, DataError> {
    let dims = w_true.len();
    if dims == 0 || n == 0 {
        return Err(config("regression needs at least one row and one feature"));
    }
    let mut features = Vec::with_capacity(n * dims);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = 0.0;
        for w in w_true {
            let x: f64 = StandardNormal.sample(rng);
            y += w * x;
            features.push(x);
        }
        let e: f64 = StandardNormal.sample(rng);
        values.push(y + noise_std * e);
    }
    Ok(Dataset { features, dims, targets: Targets::Values(values) })
}

/// How training rows are distributed over devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionSpec {
    Iid,
    /// Each class is cut into `2l` shards and every device receives `l`
    /// shards of different classes.
    Shards(usize),
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionSpec::Iid => write!(f, "iid"),
            PartitionSpec::Shards(l) => write!(f, "shards({l})"),
        }
    }
}

impl FromStr for PartitionSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "iid" {
            return Ok(PartitionSpec::Iid);
        }
        lower
            .strip_prefix("shards(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|n| n.trim().parse().ok())
            .map(PartitionSpec::Shards)
            .ok_or_else(|| config(format!("cannot parse partition {s:?}")))
    }
}

/// Row indices owned by each device, plus the rows no device received.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub parts: Vec<Vec<usize>>,
    pub dropped: Vec<usize>,
}

impl Partition {
    pub fn datasets(&self, data: &Dataset) -> Vec<Dataset> {
        self.parts.iter().map(|rows| data.subset(rows)).collect()
    }
}

/// Assigns equally many rows to each of `devices` devices.
///
/// Rows that do not fit the equal split (the remainder of `n / devices`, or of
/// the per-class pools for shards) are reported in `dropped`.
pub fn partition<R: Rng + ?Sized>(
    data: &Dataset,
    devices: usize,
    spec: PartitionSpec,
    rng: &mut R,
) -> Result<Partition, DataError> {
    let n = data.len();
    if devices == 0 || n < devices {
        return Err(config(format!("cannot split {n} rows over {devices} devices")));
    }
    match spec {
        PartitionSpec::Iid => {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(rng);
            let per = n / devices;
            let dropped = rows.split_off(per * devices);
            let parts = rows.chunks(per).map(<[usize]>::to_vec).collect();
            Ok(Partition { parts, dropped })
        }
        PartitionSpec::Shards(l) => shard_partition(data, devices, l, rng),
    }
}

fn shard_partition<R: Rng + ?Sized>(
    data: &Dataset,
    devices: usize,
    l: usize,
    rng: &mut R,
) -> Result<Partition, DataError> {
    let (labels, classes) = match &data.targets {
        Targets::Labels { labels, classes } => (labels, *classes),
        Targets::Values(_) => return Err(config("shard partitioning needs class labels")),
    };
    if l == 0 || l > classes {
        return Err(config(format!("shards per device must lie in 1..={classes}, got {l}")));
    }
    let shards_per_class = 2 * l;
    if devices * l > classes * shards_per_class {
        return Err(config(format!(
            "{devices} devices × {l} shards exceeds the {} shards available",
            classes * shards_per_class
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        pools[c].push(i);
    }
    let shard_len = pools.iter().map(Vec::len).min().unwrap_or(0) / shards_per_class;
    if shard_len == 0 {
        return Err(config(format!(
            "smallest class has fewer than {shards_per_class} rows; cannot cut {shards_per_class} shards"
        )));
    }
    let mut dropped = Vec::new();
    let mut shards: Vec<Vec<Vec<usize>>> = Vec::with_capacity(classes);
    for pool in &mut pools {
        pool.shuffle(rng);
        dropped.extend(pool.drain(shards_per_class * shard_len..));
        shards.push(pool.chunks(shard_len).map(<[usize]>::to_vec).rev().collect());
    }

    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(rng);
    let mut parts = Vec::with_capacity(devices);
    for j in 0..devices {
        let mut rows = Vec::with_capacity(l * shard_len);
        for t in 0..l {
            let c = order[(j * l + t) % classes];
            rows.extend(shards[c].pop().expect("shard arithmetic checked above"));
        }
        parts.push(rows);
    }
    for class_shards in shards {
        dropped.extend(class_shards.into_iter().flatten());
    }
    dropped.sort_unstable();
    Ok(Partition { parts, dropped })
}
