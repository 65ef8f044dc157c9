//! Datasets (IDX ingestion, synthetic Gaussian blobs) and client partitions.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{self, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled examples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::dim("dataset labels", features.nrows(), labels.len()));
        }
        if features.nrows() == 0 {
            return Err(Error::invalid("dataset", "at least one example required"));
        }
        if n_classes < 2 {
            return Err(Error::invalid("n_classes", "need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid("labels", format!("label {bad} >= {n_classes}")));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("features", "entries must lie in [0, 1]"));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// One-hot batch over `indices` in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let inputs = self.features.select(Axis(0), indices);
        let mut targets = Array2::zeros((indices.len(), self.n_classes));
        for (row, &i) in indices.iter().enumerate() {
            targets[[row, self.labels[i]]] = 1.0;
        }
        Batch { inputs, targets }
    }

    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// First `n` examples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
        }
    }
}

/// `e^(label)` as a length-`n` row.
pub fn one_hot(label: usize, n: usize) -> Result<Vec<f64>> {
    if label >= n {
        return Err(Error::invalid("label", format!("{label} out of range for {n} classes")));
    }
    let mut row = vec![0.0; n];
    row[label] = 1.0;
    Ok(row)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Ingest {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.fail("truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated payload: need {n} bytes, {} available",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Reads an IDX image file (magic `0x00000803`) and its label file
/// (magic `0x00000801`). Pixel bytes are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let mut img = Cursor {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    let magic = img.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        img.pos = 0;
        return Err(img.fail(format!("bad magic number {magic:#010x}, expected 0x00000803")));
    }
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.take(count * rows * cols)?;
    let features = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("shape matches payload");

    let mut lab = Cursor {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    let magic = lab.u32()?;
    if magic != IDX_LABELS_MAGIC {
        lab.pos = 0;
        return Err(lab.fail(format!("bad magic number {magic:#010x}, expected 0x00000801")));
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        lab.pos = 4;
        return Err(lab.fail(format!(
            "label count {label_count} does not match image count {count}"
        )));
    }
    let labels: Vec<usize> = lab.take(count)?.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, n_classes)
}

/// Writes `dataset` as an IDX image/label pair with `rows x cols` images.
/// Features are quantized to bytes with rounding.
pub fn write_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::dim("image size", dataset.dim(), rows * cols));
    }
    if dataset.n_classes > 256 {
        return Err(Error::invalid("n_classes", "IDX labels are single bytes"));
    }
    let mut images = fs::File::create(images_path)?;
    images.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for v in [dataset.len(), rows, cols] {
        images.write_all(&(v as u32).to_be_bytes())?;
    }
    let pixels: Vec<u8> = dataset
        .features
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    images.write_all(&pixels)?;

    let mut labels = fs::File::create(labels_path)?;
    labels.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    labels.write_all(&(dataset.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    labels.write_all(&bytes)?;
    Ok(())
}

/// Mean of class `class` for [`synth_blobs`]: the class index written in base
/// `m` (smallest base with `m^dim >= n_classes`), digits cycled over the
/// coordinates and mapped onto `[0.2, 0.8]`.
pub fn blob_mean(class: usize, n_classes: usize, dim: usize) -> Vec<f64> {
    let mut base = 2usize;
    while (base as f64).powi(dim.min(64) as i32) < n_classes as f64 {
        base += 1;
    }
    let mut digits_needed = 1usize;
    while base.pow(digits_needed as u32) < n_classes {
        digits_needed += 1;
    }
    (0..dim)
        .map(|i| {
            let digit = (class / base.pow((i % digits_needed) as u32)) % base;
            0.2 + 0.6 * digit as f64 / (base - 1) as f64
        })
        .collect()
}

/// Gaussian blobs around [`blob_mean`], clipped to `[0, 1]`, class-major order.
pub fn synth_blobs(
    n_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::invalid("synthetic", "n_classes >= 2, dim >= 1, per_class >= 1"));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::invalid("spread", "must be positive"));
    }
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0, 0);
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let mut features = Array2::zeros((n_classes * per_class, dim));
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        let mean = blob_mean(class, n_classes, dim);
        for k in 0..per_class {
            let row = class * per_class + k;
            for (j, m) in mean.iter().enumerate() {
                features[[row, j]] = (m + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    OneClass,
    TwoClass,
    UniformRandom,
    PowerLawOneClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionParams {
    pub power_law_exponent: f64,
    pub min_client_size: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            power_law_exponent: 1.5,
            min_client_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub assignments: Vec<Vec<usize>>,
    pub scheme: Scheme,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn client_labels(&self, dataset: &Dataset, client: usize) -> BTreeSet<usize> {
        self.assignments[client]
            .iter()
            .map(|&i| dataset.labels[i])
            .collect()
    }

    /// Disjointness, range and non-emptiness.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut seen = vec![false; dataset.len()];
        for (c, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Infeasible(format!("client {c} is empty")));
            }
            for &i in idx {
                if i >= dataset.len() {
                    return Err(Error::Infeasible(format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Infeasible(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }
}

fn shuffled_by_class<R: Rng>(dataset: &Dataset, rng: &mut R) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.n_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(rng);
    }
    by_class
}

fn split_even(members: &[usize], parts: usize, what: &str) -> Result<Vec<Vec<usize>>> {
    let size = members.len() / parts;
    if size == 0 {
        return Err(Error::Infeasible(format!(
            "{what}: {} examples cannot fill {parts} clients",
            members.len()
        )));
    }
    let dropped = members.len() - size * parts;
    if dropped > 0 {
        log::debug!("{what}: dropping {dropped} leftover examples");
    }
    Ok(members.chunks(size).take(parts).map(<[usize]>::to_vec).collect())
}

/// Splits `dataset` across `n_clients` according to `scheme`.
pub fn partition(
    dataset: &Dataset,
    scheme: Scheme,
    n_clients: usize,
    seed: u64,
    params: &PartitionParams,
) -> Result<ClientPartition> {
    if n_clients == 0 {
        return Err(Error::invalid("n_clients", "must be >= 1"));
    }
    if n_clients > dataset.len() {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients but only {} examples",
            dataset.len()
        )));
    }
    if n_clients == 1 {
        return Ok(ClientPartition {
            assignments: vec![(0..dataset.len()).collect()],
            scheme,
        });
    }
    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0);
    let by_class = shuffled_by_class(dataset, &mut rng);
    let present: Vec<usize> = (0..dataset.n_classes)
        .filter(|&c| !by_class[c].is_empty())
        .collect();

    let assignments = match scheme {
        Scheme::UniformRandom => {
            let mut all: Vec<usize> = (0..dataset.len()).collect();
            all.shuffle(&mut rng);
            split_even(&all, n_clients, "uniform_random")?
        }
        Scheme::OneClass => {
            let owners = class_owners(n_clients, &present);
            let mut out = vec![Vec::new(); n_clients];
            for (class, clients) in owners.iter().enumerate() {
                if clients.is_empty() {
                    continue;
                }
                let chunks = split_even(&by_class[class], clients.len(), "one_class")?;
                for (&client, chunk) in clients.iter().zip(chunks) {
                    out[client] = chunk;
                }
            }
            out
        }
        Scheme::TwoClass => {
            let p = present.len();
            if p < 2 {
                return Err(Error::Infeasible("two_class needs two populated classes".into()));
            }
            let pair = |c: usize| {
                let first = c % p;
                let second = (first + 1 + (c / p) % (p - 1)) % p;
                (present[first], present[second])
            };
            let mut owners = vec![Vec::new(); dataset.n_classes];
            for c in 0..n_clients {
                let (a, b) = pair(c);
                owners[a].push(c);
                owners[b].push(c);
            }
            let mut out = vec![Vec::new(); n_clients];
            for (class, clients) in owners.iter().enumerate() {
                if clients.is_empty() {
                    continue;
                }
                let chunks = split_even(&by_class[class], clients.len(), "two_class")?;
                for (&client, chunk) in clients.iter().zip(chunks) {
                    out[client].extend(chunk);
                }
            }
            out
        }
        Scheme::PowerLawOneClass => power_law_one_class(&by_class, &present, n_clients, params, &mut rng)?,
    };
    let partition = ClientPartition {
        assignments,
        scheme,
    };
    partition.validate(dataset)?;
    Ok(partition)
}

/// Round-robin class ownership: client `c` owns `present[c % present.len()]`.
fn class_owners(n_clients: usize, present: &[usize]) -> Vec<Vec<usize>> {
    let n = present.iter().max().map_or(0, |&m| m + 1);
    let mut owners = vec![Vec::new(); n];
    for c in 0..n_clients {
        owners[present[c % present.len()]].push(c);
    }
    owners
}

/// Continuous power law `p(s) ~ s^-alpha` for `s >= min_size`, sampled by
/// inversion, then scaled down per class to fit the available examples.
fn power_law_one_class<R: Rng>(
    by_class: &[Vec<usize>],
    present: &[usize],
    n_clients: usize,
    params: &PartitionParams,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let alpha = params.power_law_exponent;
    if !(alpha > 1.0) {
        return Err(Error::invalid("power_law_exponent", "must be > 1"));
    }
    let min_size = params.min_client_size.max(1);
    let raw: Vec<f64> = (0..n_clients)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>();
            min_size as f64 * u.powf(-1.0 / (alpha - 1.0))
        })
        .collect();
    let owners = class_owners(n_clients, present);
    let mut out = vec![Vec::new(); n_clients];
    for (class, clients) in owners.iter().enumerate() {
        if clients.is_empty() {
            continue;
        }
        let available = by_class[class].len();
        if clients.len() * min_size > available {
            return Err(Error::Infeasible(format!(
                "class {class}: {} clients of size >= {min_size} need more than {available} examples",
                clients.len()
            )));
        }
        let demand: f64 = clients.iter().map(|&c| raw[c]).sum();
        let factor = if demand > available as f64 {
            available as f64 / demand
        } else {
            1.0
        };
        let mut sizes: Vec<usize> = clients
            .iter()
            .map(|&c| ((raw[c] * factor).floor() as usize).max(min_size))
            .collect();
        // Clamping at min_size can overshoot; trim the largest clients.
        while sizes.iter().sum::<usize>() > available {
            let (largest, _) = sizes
                .iter()
                .enumerate()
                .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))
                .unwrap();
            sizes[largest] -= 1;
        }
        let mut start = 0;
        for (&client, size) in clients.iter().zip(sizes) {
            out[client] = by_class[class][start..start + size].to_vec();
            start += size;
        }
        if start < available {
            log::debug!("power_law_one_class: class {class} drops {} examples", available - start);
        }
    }
    Ok(out)
}
