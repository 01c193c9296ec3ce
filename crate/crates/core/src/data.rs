//! Labeled datasets: synthetic generators and the binary dataset format.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    /// `features` is row-major `N x dim`.
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {class_count}")));
        }
        if labels.len() < class_count {
            return Err(Error::invalid(format!(
                "{} samples cannot cover {class_count} classes",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= class_count) {
            return Err(Error::invalid(format!(
                "label {} of sample {i} outside [0, {class_count})",
                labels[i]
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature in sample {}", i / dim)));
        }
        Ok(Self {
            features,
            dim,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows in the given order; labels and class count carried over.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.class_count)
    }

    /// Sends the last `test_per_class` samples of every class (in dataset
    /// order) to the test split, everything else to train.
    pub fn split_stratified(&self, test_per_class: usize) -> Result<(Self, Self)> {
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n <= test_per_class) {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, cannot hold out {test_per_class}",
                counts[c]
            )));
        }
        let mut seen = vec![0; self.class_count];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &y) in self.labels.iter().enumerate() {
            seen[y] += 1;
            if seen[y] > counts[y] - test_per_class {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Gaussian blobs around `k` centers drawn uniformly on the unit sphere.
///
/// Sample `i` belongs to class `i % k`, so every class gets exactly
/// `per_class` points.
pub fn gen_blobs(k: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if k < 2 || per_class < 2 || dim == 0 {
        return Err(Error::invalid(format!(
            "gen_blobs needs k >= 2, per_class >= 2, dim >= 1 (got {k}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be nonnegative, got {spread}")));
    }
    let mut rng = SeededRng::new(seed, Stream::Data);
    let mut centers = Vec::with_capacity(k);
    while centers.len() < k {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = crate::numerics::norm(&v);
        if n > 1e-9 {
            centers.push(v.into_iter().map(|x| x / n).collect::<Vec<_>>());
        }
    }
    let n = k * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        features.extend(centers[c].iter().map(|&m| m + spread * rng.normal()));
        labels.push(c);
    }
    LabeledDataset::new(features, dim, labels, k)
}

/// Number of full turns each spiral arm makes.
pub const SPIRAL_TURNS: f64 = 1.0;
/// Radius at the start of an arm.
pub const SPIRAL_INNER_RADIUS: f64 = 0.15;

/// Point at position `t` in `[0, 1]` along arm `arm` of a `k`-arm spiral,
/// before noise: radius grows linearly, angle turns `SPIRAL_TURNS` times.
pub fn spiral_point(arm: usize, k: usize, t: f64) -> [f64; 2] {
    let (r, theta) = spiral_polar(arm, k, t);
    [r * theta.cos(), r * theta.sin()]
}

fn spiral_polar(arm: usize, k: usize, t: f64) -> (f64, f64) {
    let r = SPIRAL_INNER_RADIUS + (1.0 - SPIRAL_INNER_RADIUS) * t;
    let theta = std::f64::consts::TAU * (arm as f64 / k as f64 + SPIRAL_TURNS * t);
    (r, theta)
}

/// Interleaved 2-D spiral arms, one per class, with Gaussian angular noise
/// of standard deviation `noise` radians.
pub fn gen_spirals(k: usize, per_class: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if !(2..=8).contains(&k) || per_class < 2 {
        return Err(Error::invalid(format!(
            "gen_spirals needs k in [2, 8] and per_class >= 2 (got {k}, {per_class})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be nonnegative, got {noise}")));
    }
    let mut rng = SeededRng::new(seed, Stream::Data);
    let n = k * per_class;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (arm, j) = (i % k, i / k);
        let t = j as f64 / (per_class - 1) as f64;
        let (r, theta) = spiral_polar(arm, k, t);
        let theta = theta + noise * rng.normal();
        features.push(r * theta.cos());
        features.push(r * theta.sin());
        labels.push(arm);
    }
    LabeledDataset::new(features, 2, labels, k)
}

const DATASET_MAGIC: &[u8; 4] = b"ICKD";
const DATASET_RECORD: u8 = 0x01;

/// Magic `ICKD`, record type `0x01`, N u32, D u32, K u16, features f64
/// row-major, labels u16. Little-endian throughout.
pub fn dataset_bytes(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.len() > u32::MAX as usize || ds.dim > u32::MAX as usize || ds.class_count > u16::MAX as usize {
        return Err(Error::invalid("dataset too large for the binary format"));
    }
    let mut out = Vec::with_capacity(15 + 8 * ds.features.len() + 2 * ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.push(DATASET_RECORD);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.class_count as u16).to_le_bytes());
    for v in &ds.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::format(0, "bad dataset magic"));
    }
    let record = r.u8()?;
    if record != DATASET_RECORD {
        return Err(Error::format(4, format!("unexpected record type {record:#04x}")));
    }
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let k = r.u16()? as usize;
    let body = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(2 * n));
    if body != Some(bytes.len() - r.offset()) {
        let expected = body.map_or("overflow".to_string(), |b| (b + r.offset()).to_string());
        return Err(Error::format(
            bytes.len(),
            format!("file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let features = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let labels_at = r.offset();
    let labels = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    LabeledDataset::new(features, dim, labels, k).map_err(|e| Error::format(labels_at, e.to_string()))
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&dataset_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}
