//! Datasets, IDX files, the synthetic generator, and client partitioning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n x c x h x w`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Consistency(format!("label {bad} >= {n_classes} classes")));
        }
        Ok(Self {
            images,
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

    /// `[c, h, w]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given rows into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sl..(i + 1) * sl]);
        }
        let [c, h, w] = self.sample_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            n_classes: self.n_classes,
        }
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Reads an IDX image/label file pair (MNIST layout) into a single-channel dataset.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;

    let magic = read_u32(&ib, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            reason: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let magic = read_u32(&lb, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            reason: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32(&ib, 4, ip)? as usize;
    let h = read_u32(&ib, 8, ip)? as usize;
    let w = read_u32(&ib, 12, ip)? as usize;
    let nl = read_u32(&lb, 4, lp)? as usize;
    let expected = 16 + n * h * w;
    if ib.len() < expected {
        return Err(Error::Truncated {
            path: ip.to_path_buf(),
            expected,
            found: ib.len(),
        });
    }
    if lb.len() < 8 + nl {
        return Err(Error::Truncated {
            path: lp.to_path_buf(),
            expected: 8 + nl,
            found: lb.len(),
        });
    }
    if n != nl {
        return Err(Error::Consistency(format!("{n} images but {nl} labels")));
    }
    let images = Tensor::new(
        vec![n, 1, h, w],
        ib[16..expected].iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lb[8..8 + nl].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, n_classes)
}

/// Writes a single-channel dataset as an IDX pair; pixels are rounded to bytes.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = ds.sample_shape();
    if c != 1 {
        return Err(Error::dim("IDX export needs single-channel images"));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    for &y in &ds.labels {
        lb.push(u8::try_from(y).map_err(|_| Error::Domain(format!("label {y} does not fit a byte")))?);
    }
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, ib).map_err(|e| Error::io(ip.to_path_buf(), e))?;
    std::fs::write(lp, lb).map_err(|e| Error::io(lp.to_path_buf(), e))
}

/// Class-prototype images plus Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub noise: f64,
    /// Gaussian blobs per prototype.
    pub blobs: usize,
    /// Random per-sample shift of the prototype, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            n,
            n_classes,
            image_size: 8,
            noise: 0.1,
            blobs: 3,
            jitter: 0,
            seed,
        }
    }

    /// 28x28 single-channel profile standing in for FMNIST.
    pub fn fmnist_like(n: usize, seed: u64) -> Self {
        Self {
            image_size: 28,
            noise: 0.5,
            blobs: 4,
            jitter: 2,
            ..Self::new(n, 10, seed)
        }
    }

    /// The class prototypes, each `image_size²` pixels in `[0, 1]`.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_9a07_0000);
        let s = self.image_size;
        (0..self.n_classes)
            .map(|_| {
                let mut img = vec![0.0; s * s];
                for _ in 0..self.blobs.max(1) {
                    let cy = rng.random_range(0.15..0.85) * s as f64;
                    let cx = rng.random_range(0.15..0.85) * s as f64;
                    let sy = rng.random_range(0.08..0.25) * s as f64;
                    let sx = rng.random_range(0.08..0.25) * s as f64;
                    for y in 0..s {
                        for x in 0..s {
                            let dy = (y as f64 - cy) / sy;
                            let dx = (x as f64 - cx) / sx;
                            img[y * s + x] += (-0.5 * (dx * dx + dy * dy)).exp();
                        }
                    }
                }
                let m = img.iter().copied().fold(0.0, f64::max);
                img.iter().map(|v| v / m).collect()
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n_classes == 0 || self.n < self.n_classes || self.image_size == 0 {
            return Err(Error::config(
                "synthetic",
                format!("need n >= n_classes >= 1, got n={} classes={}", self.n, self.n_classes),
            ));
        }
        let protos = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.image_size;
        let j = self.jitter as i64;
        let mut data = Vec::with_capacity(self.n * s * s);
        let labels: Vec<usize> = (0..self.n).map(|i| i % self.n_classes).collect();
        for &y in &labels {
            let (oy, ox) = if j > 0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0, 0)
            };
            for r in 0..s as i64 {
                for c in 0..s as i64 {
                    let (sr, sc) = (r - oy, c - ox);
                    let base = if (0..s as i64).contains(&sr) && (0..s as i64).contains(&sc) {
                        protos[y][sr as usize * s + sc as usize]
                    } else {
                        0.0
                    };
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push((base + self.noise * eps).clamp(0.0, 1.0));
                }
            }
        }
        Dataset::new(Tensor::new(vec![self.n, 1, s, s], data)?, labels, self.n_classes)
    }
}

/// 8x8 synthetic dataset with default noise.
pub fn synthetic_dataset(n: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(n, n_classes, seed).generate()
}

/// Shuffles and halves a held-out set into validation and test parts.
pub fn split_val_test(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 2 {
        return Err(Error::Domain("need at least two samples to split".into()));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = ds.len() / 2;
    Ok((ds.subset(&idx[..half]), ds.subset(&idx[half..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet,
    LabelCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    #[serde(default = "default_dirichlet_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_labels_per_client")]
    pub labels_per_client: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_dirichlet_alpha() -> f64 {
    0.3
}

fn default_labels_per_client() -> usize {
    3
}

impl PartitionSpec {
    pub fn new(scheme: PartitionScheme, n_clients: usize, seed: u64) -> Self {
        Self {
            scheme,
            n_clients,
            dirichlet_alpha: default_dirichlet_alpha(),
            labels_per_client: default_labels_per_client(),
            seed,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("partition.n_clients", "must be at least 1"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("partition.dirichlet_alpha", "must be positive and finite"));
        }
        if self.scheme == PartitionScheme::LabelCount {
            if self.labels_per_client == 0 || self.labels_per_client > n_classes {
                return Err(Error::config(
                    "partition.labels_per_client",
                    format!("must be in 1..={n_classes}"),
                ));
            }
            if self.n_clients * self.labels_per_client < n_classes {
                return Err(Error::config(
                    "partition.labels_per_client",
                    format!(
                        "{} clients x {} labels cannot cover {n_classes} classes",
                        self.n_clients, self.labels_per_client
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Splits `items` into `parts` contiguous chunks, remainder to the first chunks.
fn equal_shares(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let (q, r) = (items.len() / parts, items.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let take = q + usize::from(p < r);
        out.push(items[at..at + take].to_vec());
        at += take;
    }
    out
}

fn dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = p.iter().sum();
    if s > 0.0 && s.is_finite() {
        p.iter_mut().for_each(|x| *x /= s);
    } else {
        // every draw underflowed: all mass on one client
        p.iter_mut().for_each(|x| *x = 0.0);
        p[rng.random_range(0..k)] = 1.0;
    }
    p
}

/// Client index lists for `ds`; disjoint and covering every sample.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate(ds.n_classes)?;
    let k = spec.n_clients;
    if ds.len() < k {
        return Err(Error::config(
            "partition.n_clients",
            format!("{k} clients for {} samples", ds.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    match spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            parts = equal_shares(&idx, k);
        }
        PartitionScheme::Dirichlet => {
            for pool in &mut by_class {
                pool.shuffle(&mut rng);
                let p = dirichlet(spec.dirichlet_alpha, k, &mut rng);
                let n = pool.len();
                let mut cum = 0.0;
                let mut start = 0;
                for (c, pc) in p.iter().enumerate() {
                    cum += pc;
                    let end = if c + 1 == k { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
                    parts[c].extend_from_slice(&pool[start..end]);
                    start = end;
                }
            }
        }
        PartitionScheme::LabelCount => {
            let l = spec.labels_per_client;
            let mut order: Vec<usize> = (0..ds.n_classes).collect();
            order.shuffle(&mut rng);
            let mut holders: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
            for c in 0..k {
                let mut mine: Vec<usize> = Vec::with_capacity(l);
                for slot in 0..l {
                    let s = c * l + slot;
                    let label = if s < ds.n_classes {
                        order[s]
                    } else {
                        let free: Vec<usize> = (0..ds.n_classes).filter(|y| !mine.contains(y)).collect();
                        free[rng.random_range(0..free.len())]
                    };
                    mine.push(label);
                    holders[label].push(c);
                }
            }
            for (y, pool) in by_class.iter_mut().enumerate() {
                pool.shuffle(&mut rng);
                for (share, &c) in equal_shares(pool, holders[y].len()).into_iter().zip(&holders[y]) {
                    parts[c].extend(share);
                }
            }
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Client → index-list manifest, as written to `partition.json`.
pub fn partition_manifest(parts: &[Vec<usize>]) -> String {
    let map: BTreeMap<String, &Vec<usize>> = parts
        .iter()
        .enumerate()
        .map(|(c, p)| (format!("client_{c:04}"), p))
        .collect();
    serde_json::to_string_pretty(&map).expect("index lists serialize")
}

/// KL divergence of a histogram from the uniform distribution over its bins.
pub fn kl_from_uniform(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let u = 1.0 / hist.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * (p / u).ln()
        })
        .sum()
}
