//! Synthetic vertically partitioned datasets.
//!
//! The generator describes a fixed population: every sample has one feature
//! block ("view") per potential party, and view `k` of sample `i` depends only
//! on the seed, `i` and `k`. A `K`-party dataset holds views `0..K`, the last
//! party being the label holder.
//!
//! Within a view, class centers are built from prototypes shared by pairs of
//! classes (the pairing differs between views) plus a smaller class-specific
//! direction. A single view therefore confuses paired classes while any two
//! views together separate all of them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("overlap fraction {0} leaves no aligned samples")]
    EmptyOverlap(f64),
    #[error("class {class} has {count} samples, fewer than {splits} splits")]
    ClassTooSmall {
        class: usize,
        count: usize,
        splits: usize,
    },
    #[error("malformed dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub parties: usize,
    pub samples: usize,
    /// Feature width of every view.
    pub dim: usize,
    pub classes: usize,
    /// Norm of every class center within a view.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Weight of the class-specific center direction; the rest of the
    /// center comes from the prototype shared with the paired class.
    pub distinct: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            parties: 2,
            samples: 2000,
            dim: 16,
            classes: 8,
            separation: 3.2,
            noise: 1.0,
            distinct: 0.3,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.parties == 0 {
            return bad("parties must be at least 1");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.samples < self.classes {
            return bad("fewer samples than classes");
        }
        if !(self.separation >= 0.0 && self.noise >= 0.0) {
            return bad("separation and noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.distinct) {
            return bad("distinct must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalDataset {
    shards: Vec<Tensor>,
    labels: Vec<Option<u32>>,
    aligned: Vec<usize>,
    surplus: Vec<usize>,
    classes: usize,
}

/// Disjoint index sets over the aligned samples.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

const LABEL_STREAM: u64 = 1 << 40;

fn view_rng(seed: u64, view: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((view as u64) << 2) | purpose);
    rng
}

fn unit_gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Class partner sharing a prototype in `view`, if any.
fn partner(class: usize, view: usize, classes: usize) -> usize {
    let bits = (usize::BITS - 1 - classes.leading_zeros()).max(1) as usize;
    let p = class ^ (1 << (view % bits));
    if p < classes {
        p
    } else {
        class
    }
}

fn view_centers(spec: &BlobSpec, seed: u64, view: usize) -> Vec<Vec<f64>> {
    let mut rng = view_rng(seed, view, 0);
    let protos: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit_gaussian(&mut rng, spec.dim)).collect();
    let own: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit_gaussian(&mut rng, spec.dim)).collect();
    let shared = (1.0 - spec.distinct * spec.distinct).sqrt();
    (0..spec.classes)
        .map(|c| {
            let p = &protos[c.min(partner(c, view, spec.classes))];
            let mut v: Vec<f64> = p
                .iter()
                .zip(&own[c])
                .map(|(a, b)| shared * a + spec.distinct * b)
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x *= spec.separation / n);
            }
            v
        })
        .collect()
}

/// Balanced labels in a seeded random order; independent of the party count.
fn population_labels(spec: &BlobSpec, seed: u64) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..spec.samples).map(|i| (i % spec.classes) as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LABEL_STREAM);
    labels.shuffle(&mut rng);
    labels
}

/// Feature block of `view` for every sample of the population.
pub fn generate_view(spec: &BlobSpec, seed: u64, view: usize) -> Tensor {
    let labels = population_labels(spec, seed);
    view_from_labels(spec, seed, view, &labels)
}

fn view_from_labels(spec: &BlobSpec, seed: u64, view: usize, labels: &[u32]) -> Tensor {
    let centers = view_centers(spec, seed, view);
    let mut rng = view_rng(seed, view, 1);
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    for &y in labels {
        for &c in &centers[y as usize] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + spec.noise * z);
        }
    }
    Tensor::matrix(spec.samples, spec.dim, data)
}

/// Generates a fully aligned `spec.parties`-party dataset.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<VerticalDataset, DataError> {
    spec.validate()?;
    let labels = population_labels(spec, seed);
    let shards = (0..spec.parties)
        .map(|k| view_from_labels(spec, seed, k, &labels))
        .collect();
    VerticalDataset::new(shards, labels.into_iter().map(Some).collect(), spec.classes)
}

impl VerticalDataset {
    /// Builds a dataset from per-party shards; samples with a label are the
    /// aligned ones.
    pub fn new(shards: Vec<Tensor>, labels: Vec<Option<u32>>, classes: usize) -> Result<Self, DataError> {
        if shards.is_empty() {
            return Err(DataError::InvalidSpec("no shards".into()));
        }
        let n = labels.len();
        for (k, s) in shards.iter().enumerate() {
            if s.shape().len() != 2 || s.rows() != n || s.cols() == 0 {
                return Err(DataError::InvalidSpec(format!(
                    "shard {k} has shape {:?}, expected {n} rows",
                    s.shape()
                )));
            }
        }
        if let Some(y) = labels.iter().flatten().find(|&&y| y as usize >= classes) {
            return Err(DataError::InvalidSpec(format!("label {y} out of range")));
        }
        let aligned: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
        if aligned.is_empty() {
            return Err(DataError::EmptyOverlap(0.0));
        }
        let surplus = (0..n).filter(|&i| labels[i].is_none()).collect();
        Ok(Self {
            shards,
            labels,
            aligned,
            surplus,
            classes,
        })
    }

    pub fn parties(&self) -> usize {
        self.shards.len()
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shard(&self, party: usize) -> &Tensor {
        &self.shards[party]
    }

    pub fn shards(&self) -> &[Tensor] {
        &self.shards
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shards.iter().map(Tensor::cols).collect()
    }

    /// Labels of the label-holding party; `None` marks unaligned samples.
    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn aligned(&self) -> &[usize] {
        &self.aligned
    }

    pub fn surplus(&self) -> &[usize] {
        &self.surplus
    }

    /// Copy restricted to the first `k` parties.
    pub fn first_parties(&self, k: usize) -> Result<Self, DataError> {
        if k == 0 || k > self.parties() {
            return Err(DataError::InvalidSpec(format!("cannot take {k} parties")));
        }
        let mut out = self.clone();
        out.shards.truncate(k);
        Ok(out)
    }

    /// Copy holding only the shard of `party` (0-based), e.g. the label
    /// party's own view.
    pub fn only_party(&self, party: usize) -> Result<Self, DataError> {
        if party >= self.parties() {
            return Err(DataError::InvalidSpec(format!("no party {party}")));
        }
        let mut out = self.clone();
        out.shards = vec![self.shards[party].clone()];
        Ok(out)
    }
}

/// Keeps `ceil(fraction * N)` randomly chosen samples aligned and labeled;
/// the rest become unlabeled surplus usable only for local pretraining.
pub fn set_overlap(ds: &VerticalDataset, fraction: f64, seed: u64) -> Result<VerticalDataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::EmptyOverlap(fraction));
    }
    let n = ds.samples();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    if keep == 0 {
        return Err(DataError::EmptyOverlap(fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LABEL_STREAM + 1);
    order.shuffle(&mut rng);
    let mut labels = vec![None; n];
    for &i in &order[..keep] {
        labels[i] = ds.labels[i];
    }
    if labels.iter().all(Option::is_none) {
        return Err(DataError::EmptyOverlap(fraction));
    }
    VerticalDataset::new(ds.shards.clone(), labels, ds.classes)
}

/// Stratified split of the aligned samples. Split sizes are the
/// largest-remainder rounding of `ratios * N`; within each class every
/// split receives the floor or ceiling of its proportional share.
pub fn split(ds: &VerticalDataset, ratios: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSpec(format!("split ratios {ratios:?}")));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in ds.aligned() {
        by_class.entry(ds.labels[i].expect("aligned")).or_default().push(i);
    }
    for (&c, members) in &by_class {
        if members.len() < ratios.len() {
            return Err(DataError::ClassTooSmall {
                class: c as usize,
                count: members.len(),
                splits: ratios.len(),
            });
        }
    }
    let n = ds.aligned().len();
    let targets = largest_remainder(n, &ratios);

    // Per-class counts: floor of the proportional share, then the leftover
    // samples go one per split to the splits furthest below their totals.
    let mut counts: Vec<[usize; 3]> = by_class
        .values()
        .map(|m| {
            let mut c = [0; 3];
            for s in 0..3 {
                c[s] = (ratios[s] * m.len() as f64).floor() as usize;
            }
            c
        })
        .collect();
    let mut need: [usize; 3] = [0; 3];
    for s in 0..3 {
        need[s] = targets[s] - counts.iter().map(|c| c[s]).sum::<usize>();
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let mut class_order: Vec<usize> = (0..sizes.len()).collect();
    class_order.sort_by_key(|&c| std::cmp::Reverse(sizes[c] - counts[c].iter().sum::<usize>()));
    for c in class_order {
        let extra = sizes[c] - counts[c].iter().sum::<usize>();
        let mut order = [0, 1, 2];
        order.sort_by_key(|&s| std::cmp::Reverse(need[s]));
        for &s in order.iter().take(extra) {
            counts[c][s] += 1;
            need[s] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LABEL_STREAM + 2);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (members, c) in by_class.values_mut().zip(&counts) {
        members.shuffle(&mut rng);
        let mut rest = members.as_slice();
        for s in 0..3 {
            let (head, tail) = rest.split_at(c[s]);
            parts[s].extend_from_slice(head);
            rest = tail;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}

fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..ratios.len()).collect();
    rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let missing = n - out.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// Shuffles `indices` and cuts them into batches of at most `batch` samples.
pub fn batches<R: Rng + ?Sized>(indices: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Serialize, Deserialize)]
struct ShardEntry {
    party: usize,
    file: String,
    rows: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    classes: usize,
    samples: usize,
    shards: Vec<ShardEntry>,
    labels: String,
    label_party: usize,
    aligned: Vec<usize>,
    surplus: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    splits: Option<Splits>,
}

pub const MANIFEST: &str = "manifest.json";
const UNLABELED: u32 = u32::MAX;

/// Writes `party{k}.bin` shards, `labels.bin` and `manifest.json`.
///
/// Shard files hold `N: u64`, `d_k: u64` and the row-major `f64` matrix, all
/// little-endian. The label file holds one `u32` per sample, `u32::MAX` for
/// unlabeled samples.
pub fn write_dataset(dir: &Path, ds: &VerticalDataset, splits: Option<&Splits>) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut shards = Vec::new();
    for (k, s) in ds.shards.iter().enumerate() {
        let file = format!("party{}.bin", k + 1);
        let mut buf = Vec::with_capacity(16 + s.numel() * 8);
        buf.extend_from_slice(&(s.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(s.cols() as u64).to_le_bytes());
        for v in s.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(dir.join(&file))?.write_all(&buf)?;
        shards.push(ShardEntry {
            party: k + 1,
            file,
            rows: s.rows(),
            dim: s.cols(),
        });
    }
    let mut buf = Vec::with_capacity(ds.samples() * 4);
    for y in &ds.labels {
        buf.extend_from_slice(&y.unwrap_or(UNLABELED).to_le_bytes());
    }
    fs::File::create(dir.join("labels.bin"))?.write_all(&buf)?;
    let manifest = Manifest {
        format: 1,
        classes: ds.classes,
        samples: ds.samples(),
        shards,
        labels: "labels.bin".into(),
        label_party: ds.parties(),
        aligned: ds.aligned.clone(),
        surplus: ds.surplus.clone(),
        splits: splits.cloned(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a dataset written by [`write_dataset`] (or any pre-sharded data in
/// the same layout).
pub fn read_dataset(dir: &Path) -> Result<(VerticalDataset, Option<Splits>), DataError> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&read_all(&mpath)?)
        .map_err(|e| format_err(&mpath, e.to_string()))?;
    let mut shards = Vec::new();
    for entry in &manifest.shards {
        let path = dir.join(&entry.file);
        let buf = read_all(&path)?;
        if buf.len() < 16 {
            return Err(format_err(&path, "truncated header"));
        }
        let rows = u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        if rows != manifest.samples || cols != entry.dim || buf.len() != 16 + rows * cols * 8 {
            return Err(format_err(&path, "size does not match header or manifest"));
        }
        let data = buf[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        shards.push(Tensor::matrix(rows, cols, data));
    }
    let lpath = dir.join(&manifest.labels);
    let buf = read_all(&lpath)?;
    if buf.len() != manifest.samples * 4 {
        return Err(format_err(&lpath, "label count does not match manifest"));
    }
    let labels = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .map(|y| (y != UNLABELED).then_some(y))
        .collect();
    let ds = VerticalDataset::new(shards, labels, manifest.classes)?;
    if ds.aligned != manifest.aligned || ds.surplus != manifest.surplus {
        return Err(format_err(&mpath, "overlap indices disagree with labels"));
    }
    Ok((ds, manifest.splits))
}
