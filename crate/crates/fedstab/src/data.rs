//! Synthetic labeled data, heterogeneous (Dirichlet) partitioning across
//! clients, and construction of the one-sample-perturbed neighboring
//! federation.

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use std::path::Path;
use std::sync::Arc;

/// Default feature noise scale around the class means.
pub const DEFAULT_NOISE_STD: f64 = 0.3;

/// Class-conditional Gaussian generator with unit-norm class means. Kept on
/// every pool and federation so perturbations and probe sets can draw fresh
/// samples from the same distributions.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub d: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Row-major classes x d.
    class_means: Vec<f64>,
}

impl GeneratorSpec {
    pub fn new(d: usize, classes: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if d < 1 {
            return Err(Error::validation("feature dimension must be >= 1"));
        }
        if classes < 2 {
            return Err(Error::validation("need at least 2 classes"));
        }
        if noise_std < 0.0 {
            return Err(Error::validation("noise_std must be non-negative"));
        }
        let mut means = vec![0.0; classes * d];
        for c in 0..classes {
            let mut rng = CounterRng::new(seed, Purpose::PoolMeans, c as u64, 0);
            let row = &mut means[c * d..(c + 1) * d];
            loop {
                for v in row.iter_mut() {
                    *v = rng.next_normal();
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        Ok(GeneratorSpec {
            d,
            classes,
            noise_std,
            seed,
            class_means: means,
        })
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.class_means[class * self.d..(class + 1) * self.d]
    }

    /// Draw one feature vector for `class` from the stream
    /// `(seed, purpose, stream, unit)`.
    pub fn draw(&self, class: usize, purpose: Purpose, stream: u64, unit: u64) -> Vec<f64> {
        let mut rng = CounterRng::new(self.seed, purpose, stream, unit);
        self.draw_with(class, &mut rng)
    }

    pub fn draw_with(&self, class: usize, rng: &mut CounterRng) -> Vec<f64> {
        let mean = self.class_mean(class);
        (0..self.d)
            .map(|j| mean[j] + self.noise_std * rng.next_normal())
            .collect()
    }
}

/// A flat pool of labeled samples.
#[derive(Debug, Clone)]
pub struct Pool {
    pub generator: GeneratorSpec,
    /// Row-major total x d.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let d = self.generator.d;
        &self.features[i * d..(i + 1) * d]
    }
}

/// One client's dataset: `len x d` features plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub d: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, j: usize) -> &[f64] {
        &self.features[j * self.d..(j + 1) * self.d]
    }

    pub fn sample(&self, j: usize) -> (&[f64], usize) {
        (self.feature_row(j), self.labels[j])
    }
}

/// `m` equally sized client shards plus the generator that produced them.
#[derive(Debug, Clone)]
pub struct Federation {
    pub m: usize,
    pub samples_per_client: usize,
    pub beta: f64,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub(crate) shards: Vec<Arc<Shard>>,
    /// Realized per-client class proportions.
    pub class_proportions: Vec<Vec<f64>>,
}

/// Descriptor of the single differing sample between a federation and its
/// neighbor.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub client: usize,
    pub sample: usize,
    pub original: (Vec<f64>, usize),
    pub replacement: (Vec<f64>, usize),
}

/// Deterministic balanced pool: `total` points in class-conditional Gaussian
/// clusters with unit-norm means, classes as equal in count as possible.
pub fn generate_synthetic(d: usize, classes: usize, total: usize, seed: u64) -> Result<Pool> {
    generate_synthetic_scaled(d, classes, total, seed, DEFAULT_NOISE_STD)
}

pub fn generate_synthetic_scaled(
    d: usize,
    classes: usize,
    total: usize,
    seed: u64,
    noise_std: f64,
) -> Result<Pool> {
    if total < classes {
        return Err(Error::validation(format!(
            "total ({total}) must be at least the class count ({classes})"
        )));
    }
    let generator = GeneratorSpec::new(d, classes, noise_std, seed)?;
    // Classes interleave by index, so pools of different sizes drawn from
    // the same seed share a common prefix and class counts stay as balanced
    // as possible.
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % classes;
        let x = generator.draw(c, Purpose::PoolNoise, i as u64, 0);
        features.extend_from_slice(&x);
        labels.push(c);
    }
    Ok(Pool {
        generator,
        features,
        labels,
    })
}

fn dirichlet_proportions(classes: usize, beta: f64, rng: &mut CounterRng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0 checked by caller");
    loop {
        let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
        // All-zero draws can occur for tiny beta; redraw.
    }
}

/// Split a pool into `m` shards of exactly `S = floor(total/m)` samples with
/// per-client class proportions drawn from Dirichlet(beta).
pub fn dirichlet_partition(pool: &Pool, m: usize, beta: f64, seed: u64) -> Result<Federation> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::validation(format!("beta must be > 0, got {beta}")));
    }
    if m < 1 {
        return Err(Error::validation("need at least one client"));
    }
    let total = pool.len();
    let s = total / m;
    if s < 1 {
        return Err(Error::validation(format!(
            "pool of {total} samples is too small for {m} clients"
        )));
    }
    let classes = pool.generator.classes;
    let d = pool.generator.d;

    // Per-class index stacks, deterministically shuffled.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &label) in pool.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    for (c, stack) in by_class.iter_mut().enumerate() {
        let mut rng = CounterRng::new(seed, Purpose::PartitionShuffle, c as u64, 0);
        rng.shuffle(stack);
    }

    // Target counts by largest remainder, then take what is available;
    // shortfalls are filled round-robin from whatever classes remain so all
    // shards end up with exactly S samples.
    let mut assigned: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut proportions = Vec::with_capacity(m);
    for client in 0..m {
        let mut rng = CounterRng::new(seed, Purpose::PartitionProportions, client as u64, 0);
        let props = dirichlet_proportions(classes, beta, &mut rng);
        let mut want: Vec<usize> = props.iter().map(|p| (p * s as f64).floor() as usize).collect();
        let mut short = s - want.iter().sum::<usize>().min(s);
        while short > 0 {
            let best = (0..classes)
                .max_by(|&a, &b| {
                    let ra = props[a] * s as f64 - want[a] as f64;
                    let rb = props[b] * s as f64 - want[b] as f64;
                    ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            want[best] += 1;
            short -= 1;
        }
        let mut idx = Vec::with_capacity(s);
        for c in 0..classes {
            let take = want[c].min(by_class[c].len());
            let split = by_class[c].len() - take;
            idx.extend(by_class[c].drain(split..));
        }
        let mut c = 0;
        while idx.len() < s {
            if let Some(i) = by_class[c].pop() {
                idx.push(i);
            }
            c = (c + 1) % classes;
        }
        proportions.push(props);
        assigned.push(idx);
    }

    let mut shards = Vec::with_capacity(m);
    let mut realized = Vec::with_capacity(m);
    for idx in &assigned {
        let mut features = Vec::with_capacity(s * d);
        let mut labels = Vec::with_capacity(s);
        let mut counts = vec![0usize; classes];
        for &i in idx {
            features.extend_from_slice(pool.feature_row(i));
            labels.push(pool.labels[i]);
            counts[pool.labels[i]] += 1;
        }
        realized.push(counts.iter().map(|&c| c as f64 / s as f64).collect());
        shards.push(Arc::new(Shard {
            d,
            features,
            labels,
        }));
    }

    Ok(Federation {
        m,
        samples_per_client: s,
        beta,
        seed,
        generator: pool.generator.clone(),
        shards,
        class_proportions: realized,
    })
}

impl Federation {
    pub fn shard(&self, i: usize) -> &Shard {
        &self.shards[i]
    }

    pub fn shards(&self) -> impl Iterator<Item = &Shard> {
        self.shards.iter().map(|a| a.as_ref())
    }

    /// Total number of positions at which the two federations differ.
    pub fn count_differing(&self, other: &Federation) -> usize {
        assert_eq!(self.m, other.m);
        let mut count = 0;
        for (a, b) in self.shards.iter().zip(&other.shards) {
            if Arc::ptr_eq(a, b) {
                continue;
            }
            for j in 0..a.len() {
                if a.labels[j] != b.labels[j] || a.feature_row(j) != b.feature_row(j) {
                    count += 1;
                }
            }
        }
        count
    }

    /// Whether shard `i` is shared storage with `other`'s shard `i`.
    pub fn shares_shard(&self, other: &Federation, i: usize) -> bool {
        Arc::ptr_eq(&self.shards[i], &other.shards[i])
    }

    /// Write one CSV per client (d feature columns then the label) plus a
    /// JSON manifest.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, shard) in self.shards.iter().enumerate() {
            let mut out = String::new();
            for j in 0..shard.len() {
                let (x, y) = shard.sample(j);
                for v in x {
                    out.push_str(&format!("{v},"));
                }
                out.push_str(&format!("{y}\n"));
            }
            std::fs::write(dir.join(format!("client_{i:04}.csv")), out)?;
        }
        let manifest = FederationManifest {
            m: self.m,
            s: self.samples_per_client,
            d: self.generator.d,
            c: self.generator.classes,
            beta: self.beta,
            seed: self.seed,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct FederationManifest {
    m: usize,
    s: usize,
    d: usize,
    c: usize,
    beta: f64,
    seed: u64,
}

/// Build the neighboring federation differing from `fed` at exactly
/// `(client, sample)`: the replacement is a fresh draw from the same
/// class-conditional generator. Unchanged shards share storage.
pub fn make_neighbor(
    fed: &Federation,
    client: usize,
    sample: usize,
    seed: u64,
) -> Result<(Federation, Perturbation)> {
    let class = check_position(fed, client, sample)?;
    let replacement = fed
        .generator
        .draw(class, Purpose::Replacement, seed ^ client as u64, sample as u64);
    Ok(replace_sample(fed, client, sample, replacement, class))
}

/// Neighbor whose "replacement" is byte-identical to the original: twin runs
/// on it must coincide bitwise.
pub fn make_identical_neighbor(
    fed: &Federation,
    client: usize,
    sample: usize,
) -> Result<(Federation, Perturbation)> {
    let class = check_position(fed, client, sample)?;
    let replacement = fed.shard(client).feature_row(sample).to_vec();
    Ok(replace_sample(fed, client, sample, replacement, class))
}

fn check_position(fed: &Federation, client: usize, sample: usize) -> Result<usize> {
    if client >= fed.m {
        return Err(Error::validation(format!(
            "client index {client} out of range (m = {})",
            fed.m
        )));
    }
    if sample >= fed.samples_per_client {
        return Err(Error::validation(format!(
            "sample index {sample} out of range (S = {})",
            fed.samples_per_client
        )));
    }
    Ok(fed.shard(client).labels[sample])
}

fn replace_sample(
    fed: &Federation,
    client: usize,
    sample: usize,
    replacement: Vec<f64>,
    class: usize,
) -> (Federation, Perturbation) {
    let mut shards = fed.shards.clone();
    let mut shard = (*shards[client]).clone();
    let original = shard.feature_row(sample).to_vec();
    let d = shard.d;
    shard.features[sample * d..(sample + 1) * d].copy_from_slice(&replacement);
    shards[client] = Arc::new(shard);
    let neighbor = Federation {
        shards,
        class_proportions: fed.class_proportions.clone(),
        generator: fed.generator.clone(),
        ..*fed
    };
    let pert = Perturbation {
        client,
        sample,
        original: (original, class),
        replacement: (replacement, class),
    };
    (neighbor, pert)
}
