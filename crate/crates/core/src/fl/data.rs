//! Datasets and their partition across clients.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::idx;
use crate::rng::{self, domain};

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(features.len(), dim * labels.len());
        Self {
            dim,
            classes,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset::new(
            self.dim,
            self.classes,
            features,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Classes present, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.classes).filter(|&c| seen[c]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Partition {
    #[default]
    Iid,
    /// Every client holds samples from exactly `classes_per_client` classes.
    LabelSkew { classes_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Isotropic Gaussian blobs around class means placed at random on a
    /// sphere of radius `separation`, all shifted by a shared random vector
    /// of norm `offset`.
    SyntheticBlobs {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_offset")]
        offset: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_test_samples")]
        test_samples: usize,
    },
    /// MNIST-style IDX files; pixels scaled to `[0, 1]`.
    IdxFiles {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_dim() -> usize {
    32
}
fn default_separation() -> f64 {
    3.0
}
fn default_offset() -> f64 {
    20.0
}
fn default_noise() -> f64 {
    1.0
}
fn default_test_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_samples_per_client")]
    pub samples_per_client: usize,
    #[serde(default)]
    pub partition: Partition,
}

fn default_classes() -> usize {
    10
}
fn default_samples_per_client() -> usize {
    600
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::SyntheticBlobs {
            dim: default_dim(),
            separation: default_separation(),
            offset: default_offset(),
            noise: default_noise(),
            test_samples: default_test_samples(),
        }
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            classes: default_classes(),
            samples_per_client: default_samples_per_client(),
            partition: Partition::Iid,
        }
    }
}

impl DatasetSpec {
    /// Materialises `(train pool, test set)`. The pool holds
    /// `clients * samples_per_client` samples, balanced across classes.
    pub fn load(&self, clients: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let total = clients * self.samples_per_client;
        match &self.source {
            DataSource::SyntheticBlobs {
                dim,
                separation,
                offset,
                noise,
                test_samples,
            } => {
                let blobs = Blobs::new(*dim, self.classes, *separation, *offset, *noise, seed);
                Ok((
                    blobs.sample(total, &mut rng::stream(seed, &[domain::DATA, 1])),
                    blobs.sample(*test_samples, &mut rng::stream(seed, &[domain::DATA, 2])),
                ))
            }
            DataSource::IdxFiles {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = idx::read_dataset(train_images, train_labels, self.classes)?;
                let test = idx::read_dataset(test_images, test_labels, self.classes)?;
                let pool = balanced_subsample(&train, total, seed)?;
                Ok((pool, test))
            }
        }
    }
}

/// Takes `total / classes` samples of every class (first after a seeded shuffle).
fn balanced_subsample(data: &Dataset, total: usize, seed: u64) -> Result<Dataset> {
    let per_class = total / data.classes;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[domain::DATA, 3]));
    let mut taken = vec![0usize; data.classes];
    let mut keep = Vec::with_capacity(total);
    for i in order {
        let c = data.labels[i];
        if taken[c] < per_class {
            taken[c] += 1;
            keep.push(i);
        }
    }
    if let Some(c) = taken.iter().position(|&t| t < per_class) {
        return Err(Error::InvalidParams(format!(
            "class {c} has only {} samples, need {per_class}",
            taken[c]
        )));
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}

struct Blobs {
    dim: usize,
    classes: usize,
    means: Vec<f64>,
    noise: f64,
}

impl Blobs {
    fn new(
        dim: usize,
        classes: usize,
        separation: f64,
        offset: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, &[domain::DATA, 0]);
        let mut means = Vec::with_capacity(dim * classes);
        for _ in 0..classes {
            let z: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            means.extend(z.iter().map(|v| v / norm * separation));
        }
        if offset != 0.0 {
            let z: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..classes {
                for (m, v) in means[c * dim..(c + 1) * dim].iter_mut().zip(&z) {
                    *m += v / norm * offset;
                }
            }
        }
        Self {
            dim,
            classes,
            means,
            noise,
        }
    }

    /// `n` samples with labels cycling through the classes, then shuffled.
    fn sample(&self, n: usize, r: &mut impl Rng) -> Dataset {
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(r);
        let mut features = Vec::with_capacity(n * self.dim);
        for &c in &labels {
            let mean = &self.means[c * self.dim..(c + 1) * self.dim];
            features.extend(
                mean.iter()
                    .map(|m| m + self.noise * r.sample::<f64, _>(StandardNormal)),
            );
        }
        Dataset::new(self.dim, self.classes, features, labels)
    }
}

/// Convenience constructor for Gaussian-blob data outside a full spec.
pub fn synthetic_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Dataset {
    Blobs::new(dim, classes, separation, 0.0, noise, seed)
        .sample(n, &mut rng::stream(seed, &[domain::DATA, 1]))
}

/// One client's local dataset and learning weight `p_m = n_m / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub data: Dataset,
    pub weight: f64,
}

pub fn partition_dataset(
    data: &Dataset,
    clients: usize,
    partition: Partition,
    seed: u64,
) -> Result<Vec<Shard>> {
    if clients == 0 {
        return Err(Error::InvalidParams("need at least one client".into()));
    }
    let mut r = rng::stream(seed, &[domain::PARTITION]);
    let groups: Vec<Vec<usize>> = match partition {
        Partition::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut r);
            let (base, extra) = (data.len() / clients, data.len() % clients);
            let mut start = 0;
            (0..clients)
                .map(|m| {
                    let size = base + usize::from(m < extra);
                    let g = order[start..start + size].to_vec();
                    start += size;
                    g
                })
                .collect()
        }
        Partition::LabelSkew { classes_per_client } => {
            label_skew_groups(data, clients, classes_per_client, &mut r)?
        }
    };
    let total: usize = groups.iter().map(Vec::len).sum();
    Ok(groups
        .into_iter()
        .map(|g| Shard {
            weight: g.len() as f64 / total as f64,
            data: data.subset(&g),
        })
        .collect())
}

/// Splits every class into `clients * k / C` equal blocks and deals the
/// class-sorted block list with stride `clients`, so client `m` gets blocks
/// `m, m + M, m + 2M, ...`, each from a different class.
fn label_skew_groups(
    data: &Dataset,
    clients: usize,
    k: usize,
    r: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let classes = data.label_set();
    let c = classes.len();
    if k == 0 || k > c {
        return Err(Error::InfeasibleSkew(format!(
            "{k} classes per client but {c} classes present"
        )));
    }
    if !(clients * k).is_multiple_of(c) {
        return Err(Error::InfeasibleSkew(format!(
            "{clients} clients x {k} classes is not a multiple of {c} classes"
        )));
    }
    let blocks_per_class = clients * k / c;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let smallest = classes
        .iter()
        .map(|&l| by_class[l].len())
        .min()
        .unwrap_or(0);
    let block = smallest / blocks_per_class;
    if block == 0 {
        return Err(Error::InfeasibleSkew(format!(
            "smallest class has {smallest} samples, need {blocks_per_class} blocks"
        )));
    }
    let mut blocks = Vec::with_capacity(clients * k);
    for &l in &classes {
        let mut members = std::mem::take(&mut by_class[l]);
        members.shuffle(r);
        for b in 0..blocks_per_class {
            blocks.push(members[b * block..(b + 1) * block].to_vec());
        }
    }
    Ok((0..clients)
        .map(|m| {
            (0..k)
                .flat_map(|j| blocks[m + j * clients].iter().copied())
                .collect()
        })
        .collect())
}
