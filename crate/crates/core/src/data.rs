//! Datasets, loaders and client partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::models::Batch;
use crate::rng::{self, Domain};
use crate::{Error, Result};

pub const MNIST_DIR_ENV: &str = "MNIST_DIR";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Mnist,
    Csv,
}

/// Samples stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<i32>,
    dim: usize,
    num_classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<i32>,
        dim: usize,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        let binary = num_classes == 2 && labels.contains(&-1);
        let bad = labels.iter().find(|&&l| {
            if binary {
                l != 1 && l != -1
            } else {
                l < 0 || l as usize >= num_classes
            }
        });
        if let Some(l) = bad {
            return Err(Error::domain(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
            provenance,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.labels, self.dim).expect("dataset shape is validated")
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::domain(format!("row {i} out of range ({} rows)", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
            provenance: self.provenance,
        })
    }

    /// Splits off the rows from `at` onwards.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        let head: Vec<usize> = (0..at.min(self.len())).collect();
        let tail: Vec<usize> = (at.min(self.len())..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, bytes.len(), "truncated header"))
}

/// Parses an IDX image file into `(count, rows * cols, pixels / 255)`.
fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(parse_err(path, 8, "zero image dimension"));
    }
    let body = &bytes[16..];
    if body.len() < n * dim {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated: expected {} pixel bytes, found {}", n * dim, body.len()),
        ));
    }
    if body.len() > n * dim {
        return Err(parse_err(path, 16 + n * dim, "trailing bytes after pixel data"));
    }
    Ok((n, dim, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<i32>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated: expected {n} labels, found {}", body.len()),
        ));
    }
    if body.len() > n {
        return Err(parse_err(path, 8 + n, "trailing bytes after label data"));
    }
    Ok(body.iter().map(|&b| b as i32).collect())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, dim, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let labels_vec = parse_idx_labels(&read_file(labels)?, labels)?;
    if labels_vec.len() != n {
        return Err(parse_err(
            labels,
            4,
            format!("label count {} does not match image count {n}", labels_vec.len()),
        ));
    }
    let classes = labels_vec.iter().copied().max().map_or(1, |m| m as usize + 1).max(10);
    Dataset::new(pixels, labels_vec, dim, classes, Provenance::Mnist)
}

/// MNIST directory from the environment, if set.
pub fn mnist_dir() -> Option<PathBuf> {
    std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from)
}

/// Loads the standard `(train, test)` MNIST pair from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    let test = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
    Ok((train, test))
}

/// Loads a CSV file with a header row, float feature columns and an integer
/// label in the last column. Labels `{-1, +1}` make a binary dataset; otherwise
/// labels must be `0..c`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(parse_err(path, 0, "need at least one feature and one label column"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte()) as usize;
        if record.len() != width {
            return Err(parse_err(
                path,
                offset,
                format!("expected {width} fields, got {}", record.len()),
            ));
        }
        for field in record.iter().take(width - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, offset, format!("bad feature {field:?}")))?;
            features.push(v);
        }
        let label = &record[width - 1];
        labels.push(
            label
                .trim()
                .parse::<i32>()
                .map_err(|_| parse_err(path, offset, format!("bad label {label:?}")))?,
        );
    }
    let classes = if labels.contains(&-1) {
        2
    } else {
        labels.iter().copied().max().map_or(2, |m| (m + 1).max(2) as usize)
    };
    Dataset::new(features, labels, width - 1, classes, Provenance::Csv)
}

/// Two `+-1` Gaussian clusters separated by `margin` along a random unit
/// direction `u`: `x = z + y (margin/2 + |g|) u` with `z` orthogonal to `u`.
pub fn synth_linear(n: usize, dim: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || dim == 0 {
        return Err(Error::domain("synth_linear needs n >= 2 and dim >= 1"));
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::domain(format!("margin {margin} must be > 0")));
    }
    let mut rng = rng::stream(seed, Domain::Data, 0, 0);
    let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= un);
    let mut labels: Vec<i32> = (0..n).map(|i| if i < n.div_ceil(2) { 1 } else { -1 }).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        let mut z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let proj: f64 = z.iter().zip(&u).map(|(a, b)| a * b).sum();
        let g: f64 = StandardNormal.sample(&mut rng);
        let shift = y as f64 * (0.5 * margin + g.abs()) - proj;
        z.iter_mut().zip(&u).for_each(|(zj, uj)| *zj += shift * uj);
        features.extend(z);
    }
    Dataset::new(features, labels, dim, 2, Provenance::Synthetic)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    LabelSkew,
    Unbalanced,
}

/// Relative shard sizes of the five client groups in unbalanced mode.
pub const UNBALANCED_RATIOS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    /// Samples per client (iid, label_skew) or the middle group's size (unbalanced).
    pub shard_size: usize,
    #[serde(default = "default_labels_per_client")]
    pub labels_per_client: usize,
}

fn default_labels_per_client() -> usize {
    4
}

impl PartitionPlan {
    pub fn iid(shard_size: usize) -> Self {
        Self {
            mode: PartitionMode::Iid,
            shard_size,
            labels_per_client: default_labels_per_client(),
        }
    }

    pub fn label_skew(shard_size: usize, labels_per_client: usize) -> Self {
        Self {
            mode: PartitionMode::LabelSkew,
            shard_size,
            labels_per_client,
        }
    }

    pub fn unbalanced(shard_size: usize) -> Self {
        Self {
            mode: PartitionMode::Unbalanced,
            shard_size,
            labels_per_client: default_labels_per_client(),
        }
    }

    /// Planned size of every client's shard.
    pub fn shard_sizes(&self, clients: usize) -> Vec<usize> {
        match self.mode {
            PartitionMode::Iid | PartitionMode::LabelSkew => vec![self.shard_size; clients],
            PartitionMode::Unbalanced => (0..clients)
                .map(|i| {
                    let group = i * UNBALANCED_RATIOS.len() / clients;
                    (self.shard_size as f64 * UNBALANCED_RATIOS[group]).round() as usize
                })
                .collect(),
        }
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Assigns each client a `k`-subset of the classes. Subsets are distinct while
/// enough exist, and each is chosen greedily to keep per-class demand level.
pub fn assign_label_sets(classes: usize, k: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > classes {
        return Err(Error::domain(format!("cannot pick {k} of {classes} labels")));
    }
    let mut pool = combinations(classes, k);
    pool.shuffle(&mut rng::stream(seed, Domain::Partition, 1, 0));
    let mut used = vec![false; pool.len()];
    let mut load = vec![0usize; classes];
    let mut out = Vec::with_capacity(clients);
    for _ in 0..clients {
        if used.iter().all(|&u| u) {
            used.iter_mut().for_each(|u| *u = false);
        }
        let best = (0..pool.len())
            .filter(|&i| !used[i])
            .min_by_key(|&i| {
                let s = &pool[i];
                (
                    s.iter().map(|&c| load[c]).max().unwrap_or(0),
                    s.iter().map(|&c| load[c]).sum::<usize>(),
                )
            })
            .expect("at least one unused subset");
        used[best] = true;
        for &c in &pool[best] {
            load[c] += 1;
        }
        out.push(pool[best].clone());
    }
    Ok(out)
}

/// Splits `dataset` into `clients` disjoint shards of row indices.
pub fn partition(dataset: &Dataset, plan: &PartitionPlan, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || plan.shard_size == 0 {
        return Err(Error::domain(
            "partition needs at least one client and a positive shard size",
        ));
    }
    let sizes = plan.shard_sizes(clients);
    if sizes.contains(&0) {
        return Err(Error::domain("shard size rounds to zero for some client group"));
    }
    let total: usize = sizes.iter().sum();
    let mut rng = rng::stream(seed, Domain::Partition, 0, 0);
    match plan.mode {
        PartitionMode::Iid | PartitionMode::Unbalanced => {
            if total > dataset.len() {
                return Err(Error::domain(format!(
                    "plan needs {total} samples, dataset has {}",
                    dataset.len()
                )));
            }
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let mut shards = Vec::with_capacity(clients);
            let mut at = 0;
            for s in sizes {
                shards.push(order[at..at + s].to_vec());
                at += s;
            }
            Ok(shards)
        }
        PartitionMode::LabelSkew => {
            let k = plan.labels_per_client;
            if !plan.shard_size.is_multiple_of(k) {
                return Err(Error::domain(format!(
                    "shard size {} is not divisible by {k} labels",
                    plan.shard_size
                )));
            }
            let per_label = plan.shard_size / k;
            let c = dataset.num_classes();
            let label_index = |l: i32| if l < 0 { 0 } else { l as usize };
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, &l) in dataset.labels().iter().enumerate() {
                pools[label_index(l)].push(i);
            }
            for p in pools.iter_mut() {
                p.shuffle(&mut rng);
            }
            let sets = assign_label_sets(c, k, clients, seed)?;
            let mut taken = vec![0usize; c];
            let mut shards = Vec::with_capacity(clients);
            for set in sets {
                let mut shard = Vec::with_capacity(plan.shard_size);
                for &class in &set {
                    let from = taken[class];
                    if from + per_label > pools[class].len() {
                        return Err(Error::domain(format!(
                            "class {class} has only {} samples, plan needs more",
                            pools[class].len()
                        )));
                    }
                    shard.extend_from_slice(&pools[class][from..from + per_label]);
                    taken[class] += per_label;
                }
                shards.push(shard);
            }
            Ok(shards)
        }
    }
}

/// Draws `count` distinct row indices uniformly (sorted by draw order).
pub fn sample_rows<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count > len {
        return Err(Error::domain(format!("cannot draw {count} of {len} rows")));
    }
    Ok(rand::seq::index::sample(rng, len, count).into_vec())
}
