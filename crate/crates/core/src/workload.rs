//! Seeded synthetic KV workloads.
//!
//! Keys of each (layer, kv head) are drawn around per-slot cluster centers
//! (or uniformly on a sphere); tokens are assigned to clusters at random so
//! any prefix is a representative sample. A query picks a cluster center of
//! its kv head, perturbs it, optionally adds a fixed out-of-distribution
//! offset, and is scaled to unit length times a sharpness factor. The
//! factor sets how peaked the softmax is: it varies per query head by
//! `head_spread` and per query by `query_spread` (both log-uniform).
//!
//! Every array is a pure function of the spec and the requested stream, so
//! runs are replayable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{Matrix, ModelShape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distribution {
    GaussianClusters { clusters: usize, spread: f32 },
    UniformSphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QueryModel {
    InDistribution,
    /// Adds a fixed random direction of the given norm (relative to a unit
    /// cluster direction) before normalizing.
    Shifted { offset: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sharpness {
    /// Norm of a query vector before the spreads apply.
    pub base: f32,
    /// Per query head multiplier is `exp(u · head_spread)`, `u ∈ [-1, 1]`.
    pub head_spread: f32,
    /// Per query multiplier is `exp(u · query_spread)`, `u ∈ [-1, 1]`.
    pub query_spread: f32,
    /// Standard deviation of the query's perturbation of its cluster center.
    pub query_noise: f32,
}

impl Default for Sharpness {
    fn default() -> Self {
        Sharpness {
            base: 10.0,
            head_spread: 0.0,
            query_spread: 0.0,
            query_noise: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_tokens: usize,
    pub shape: ModelShape,
    pub distribution: Distribution,
    pub query_model: QueryModel,
    #[serde(default)]
    pub sharpness: Sharpness,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn clustered(n_tokens: usize, shape: ModelShape, clusters: usize, seed: u64) -> Self {
        WorkloadSpec {
            n_tokens,
            shape,
            distribution: Distribution::GaussianClusters { clusters, spread: 0.5 },
            query_model: QueryModel::InDistribution,
            sharpness: Sharpness::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if let Distribution::GaussianClusters { clusters, spread } = self.distribution {
            if clusters == 0 || !(spread >= 0.0) {
                return Err(Error::invalid("clusters must be positive and spread >= 0"));
            }
        }
        if !(self.sharpness.base > 0.0) {
            return Err(Error::invalid("sharpness base must be positive"));
        }
        Ok(())
    }
}

const TAG_CENTERS: u64 = 1;
const TAG_KEYS: u64 = 2;
const TAG_VALUES: u64 = 3;
const TAG_QUERIES: u64 = 4;
const TAG_OFFSET: u64 = 5;
const TAG_HEAD: u64 = 6;

#[derive(Clone, Debug)]
pub struct Workload {
    spec: WorkloadSpec,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Workload { spec })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    fn rng(&self, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream((tag << 56) ^ (a << 28) ^ b);
        rng
    }

    fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    fn centers(&self, layer: usize, kv_head: usize) -> Vec<Vec<f32>> {
        let d = self.spec.shape.dim;
        let count = match self.spec.distribution {
            Distribution::GaussianClusters { clusters, .. } => clusters,
            Distribution::UniformSphere => 1,
        };
        let mut rng = self.rng(TAG_CENTERS, layer as u64, kv_head as u64);
        (0..count).map(|_| Self::gaussian(&mut rng, d)).collect()
    }

    /// Vocabulary ids of the prompt: a deterministic pseudo-random sequence.
    pub fn token_ids(&self) -> Vec<u32> {
        let mut rng = self.rng(TAG_KEYS, u64::MAX >> 8, 0);
        (0..self.spec.n_tokens).map(|_| rng.random_range(0..128_000)).collect()
    }

    pub fn keys(&self, layer: usize, kv_head: usize) -> Matrix {
        self.keys_n(layer, kv_head, self.spec.n_tokens)
    }

    /// First `n` keys of the slot's (unbounded) key stream.
    pub fn keys_n(&self, layer: usize, kv_head: usize, n: usize) -> Matrix {
        let d = self.spec.shape.dim;
        let mut rng = self.rng(TAG_KEYS, layer as u64, kv_head as u64);
        let mut data = Vec::with_capacity(n * d);
        match self.spec.distribution {
            Distribution::GaussianClusters { spread, .. } => {
                let centers = self.centers(layer, kv_head);
                for _ in 0..n {
                    let c = &centers[rng.random_range(0..centers.len())];
                    data.extend(c.iter().map(|x| x + spread * rng.sample::<f32, _>(StandardNormal)));
                }
            }
            Distribution::UniformSphere => {
                let radius = (d as f32).sqrt();
                for _ in 0..n {
                    let g = Self::gaussian(&mut rng, d);
                    let norm = g.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                    data.extend(g.iter().map(|x| x / norm * radius));
                }
            }
        }
        Matrix::from_flat(d, data).expect("generated keys are finite")
    }

    pub fn values(&self, layer: usize, kv_head: usize) -> Matrix {
        self.values_n(layer, kv_head, self.spec.n_tokens)
    }

    pub fn values_n(&self, layer: usize, kv_head: usize, n: usize) -> Matrix {
        let d = self.spec.shape.dim;
        let mut rng = self.rng(TAG_VALUES, layer as u64, kv_head as u64);
        let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Matrix::from_flat(d, data).expect("generated values are finite")
    }

    /// `(keys, values)` for every slot in `(layer, kv_head)` order.
    pub fn kv(&self) -> Vec<(Matrix, Matrix)> {
        let s = self.spec.shape;
        (0..s.n_layers)
            .flat_map(|l| (0..s.n_kv_heads).map(move |h| (l, h)))
            .map(|(l, h)| (self.keys(l, h), self.values(l, h)))
            .collect()
    }

    /// Sharpness multiplier of a query head.
    pub fn head_scale(&self, layer: usize, query_head: usize) -> f32 {
        let mut rng = self.rng(TAG_HEAD, layer as u64, query_head as u64);
        let u: f32 = rng.random_range(-1.0..=1.0);
        (u * self.spec.sharpness.head_spread).exp()
    }

    /// `count` queries of a query head; `stream` selects independent sets.
    pub fn queries(&self, layer: usize, query_head: usize, count: usize, stream: u64) -> Matrix {
        let shape = self.spec.shape;
        let d = shape.dim;
        let kv_head = shape.kv_head_of(query_head);
        let centers = self.centers(layer, kv_head);
        let sh = self.spec.sharpness;
        let offset = match self.spec.query_model {
            QueryModel::InDistribution => None,
            QueryModel::Shifted { offset } => {
                let mut rng = self.rng(TAG_OFFSET, layer as u64, kv_head as u64);
                let g = Self::gaussian(&mut rng, d);
                let n = g.iter().map(|x| x * x).sum::<f32>().sqrt();
                Some(g.into_iter().map(|x| x / n * offset).collect::<Vec<f32>>())
            }
        };
        let head_scale = self.head_scale(layer, query_head);
        let mut rng = self.rng(TAG_QUERIES, ((layer as u64) << 16) | query_head as u64, stream);
        let mut data = Vec::with_capacity(count * d);
        for _ in 0..count {
            let c = &centers[rng.random_range(0..centers.len())];
            let cn = c.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            let mut q: Vec<f32> = c
                .iter()
                .map(|x| x / cn + sh.query_noise / (d as f32).sqrt() * rng.sample::<f32, _>(StandardNormal))
                .collect();
            if let Some(off) = &offset {
                q.iter_mut().zip(off).for_each(|(a, b)| *a += b);
            }
            let u: f32 = rng.random_range(-1.0..=1.0);
            let scale = sh.base * head_scale * (u * sh.query_spread).exp();
            let qn = q.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            data.extend(q.iter().map(|x| x / qn * scale));
        }
        Matrix::from_flat(d, data).expect("generated queries are finite")
    }
}
