//! Datasets and batch schedules.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples stored row-major (`n × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    d: usize,
    num_classes: usize,
}

/// Borrowed view of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, d: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if d == 0 || features.len() != labels.len() * d {
            return Err(Error::invalid(format!(
                "feature buffer of length {} does not match n={} d={d}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite feature"));
        }
        Ok(Dataset {
            features,
            labels,
            d,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            x: &self.features[i * self.d..(i + 1) * self.d],
            y: self.labels[i],
        }
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(ids.len() * self.d);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample id {i} out of range (n={})", self.len())));
            }
            features.extend_from_slice(self.sample(i).x);
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.d, self.num_classes)
    }

    /// The first `⌊fraction·n⌋` samples.
    pub fn first_fraction(&self, fraction: f64) -> Result<Dataset> {
        let k = self.fraction_count(fraction)?;
        self.subset(&(0..k).collect::<Vec<_>>())
    }

    /// A seeded random `⌊fraction·n⌋` subset, kept in original order.
    pub fn random_fraction(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        let k = self.fraction_count(fraction)?;
        let mut rng = RngStream::named(seed, "subset").rng();
        let mut ids = rand::seq::index::sample(&mut rng, self.len(), k).into_vec();
        ids.sort_unstable();
        self.subset(&ids)
    }

    fn fraction_count(&self, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let k = (fraction * self.len() as f64).floor() as usize;
        if k == 0 {
            return Err(Error::invalid("fraction selects no samples"));
        }
        Ok(k)
    }

    /// Reassign a seeded `fraction` of labels to a different, uniformly drawn
    /// class. Returns the noisy dataset and the sorted ids that were flipped.
    pub fn with_label_noise(&self, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!("noise fraction {fraction} outside [0, 1]")));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("label noise needs at least two classes"));
        }
        let k = (fraction * self.len() as f64).round() as usize;
        let mut rng = RngStream::named(seed, "label-noise").rng();
        let mut flipped = rand::seq::index::sample(&mut rng, self.len(), k).into_vec();
        flipped.sort_unstable();
        let mut labels = self.labels.clone();
        for &i in &flipped {
            let shift = rng.random_range(1..self.num_classes);
            labels[i] = (labels[i] + shift) % self.num_classes;
        }
        let noisy = Dataset::new(self.features.clone(), labels, self.d, self.num_classes)?;
        Ok((noisy, flipped))
    }
}

/// Class-conditional Gaussian clusters. Centres are drawn once from the seed
/// (standard normal, scaled by 2); sample `i` belongs to class `i % classes`.
/// `spread = 0` collapses every class onto its centre.
pub fn gen_blobs(n: usize, d: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid(format!(
            "need n >= classes >= 1, got n={n} classes={classes}"
        )));
    }
    if d == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "spread must be finite and non-negative, got {spread}"
        )));
    }
    let base = RngStream::named(seed, "blobs");
    let mut center_rng = base.child(0).rng();
    let centers: Vec<f64> = (0..classes * d)
        .map(|_| 2.0 * center_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut noise_rng = base.child(1).rng();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for j in 0..d {
            let eps: f64 = noise_rng.sample(StandardNormal);
            features.push(centers[c * d + j] + spread * eps);
        }
    }
    Dataset::new(features, labels, d, classes)
}

fn read_u32_be(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file ends inside the header"))
}

/// Read an IDX image/label pair (big-endian headers, row-major `u8` payload).
/// Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected 0x00000803, found {magic:#010x}"),
        ));
    }
    let n_images = read_u32_be(images, 4, "images.count")? as usize;
    let rows = read_u32_be(images, 8, "images.rows")? as usize;
    let cols = read_u32_be(images, 12, "images.cols")? as usize;

    let magic = read_u32_be(labels, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected 0x00000801, found {magic:#010x}"),
        ));
    }
    let n_labels = read_u32_be(labels, 4, "labels.count")? as usize;
    if n_labels != n_images {
        return Err(Error::format(
            "labels.count",
            format!("labels header declares {n_labels} items but images header declares {n_images}"),
        ));
    }
    let d = rows * cols;
    if d == 0 {
        return Err(Error::format("images.rows", "zero-sized images"));
    }
    let pixels = &images[16..];
    if pixels.len() < n_images * d {
        return Err(Error::format(
            "images.payload",
            format!("expected {} bytes, found {}", n_images * d, pixels.len()),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::format(
            "labels.payload",
            format!("expected {n_labels} bytes, found {}", label_bytes.len()),
        ));
    }
    let features = pixels[..n_images * d].iter().map(|&p| f64::from(p) / 255.0).collect();
    let ys: Vec<usize> = label_bytes[..n_labels].iter().map(|&y| usize::from(y)).collect();
    let num_classes = ys.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, ys, d, num_classes)
}

/// Encode a dataset with features in `[0, 1]` as an IDX pair (images, labels).
/// Used to build fixtures; values are quantised to `u8`.
pub fn encode_idx(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.dim() {
        return Err(Error::invalid("rows × cols must equal the feature dimension"));
    }
    let n = data.len() as u32;
    let mut images = Vec::with_capacity(16 + data.features.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(data.features.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(data.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// Reproducible mini-batch order. Each epoch is a seeded permutation of
/// `0..n`, cut into full batches; the remainder is dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub n: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    #[serde(skip)]
    steps: Vec<Vec<usize>>,
}

impl BatchSchedule {
    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn batch(&self, t: usize) -> &[usize] {
        &self.steps[t]
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    /// Rebuild the step list after deserialising a descriptor.
    pub fn regenerate(&self) -> Result<BatchSchedule> {
        make_schedule(self.n, self.batch_size, self.epochs, self.shuffle_seed)
    }

    /// Step index of the first occurrence of `sample` at or after `from`.
    pub fn find(&self, sample: usize, from: usize) -> Option<usize> {
        (from..self.steps.len()).find(|&t| self.steps[t].contains(&sample))
    }
}

pub fn make_schedule(n: usize, batch_size: usize, epochs: usize, shuffle_seed: u64) -> Result<BatchSchedule> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::invalid(format!("batch size {batch_size} must be in [1, n={n}]")));
    }
    let per_epoch = n / batch_size;
    let base = RngStream::named(shuffle_seed, "schedule");
    let mut steps = Vec::with_capacity(epochs * per_epoch);
    for epoch in 0..epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut base.child(epoch as u64).rng());
        steps.extend(perm.chunks_exact(batch_size).map(<[usize]>::to_vec));
    }
    Ok(BatchSchedule {
        n,
        batch_size,
        epochs,
        shuffle_seed,
        steps,
    })
}
