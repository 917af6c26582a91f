//! FrozenHopfield: a fixed random projection of observations into the token
//! embedding space followed by one Hopfield retrieval over the token
//! embeddings, `xᵀ = softmax(beta oᵀ Pᵀ Eᵀ) E`.
//!
//! The retrieved vector always lies in the convex hull of the embedding rows,
//! so the frozen sequence model only ever sees inputs from the region it was
//! trained on. Nothing here is trained.

use crate::error::{Error, Result};
use crate::hopfield::{argmax_lowest, PatternStore};
use crate::ndiff::{Array, Tape, Var};
use crate::rng::Rng;

/// Luma weights used when flattening RGB observations to grayscale.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Flattens an RGB image (row-major pixels) to grayscale values in [0, 1].
pub fn grayscale_flatten(pixels: &[[u8; 3]]) -> Vec<f64> {
    pixels
        .iter()
        .map(|p| (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) / 255.0)
        .collect()
}

/// Frozen `m x n` projection with i.i.d. N(0, n/m) entries.
#[derive(Clone, Debug)]
pub struct ProjectionMatrix {
    matrix: Array,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn sample(obs_dim: usize, embed_dim: usize, seed: u64) -> Self {
        assert!(obs_dim >= 1 && embed_dim >= 1, "projection dims must be positive");
        let std = (obs_dim as f64 / embed_dim as f64).sqrt();
        let mut rng = Rng::new(seed);
        let data = (0..embed_dim * obs_dim).map(|_| std * rng.normal()).collect();
        Self {
            matrix: Array::new(vec![embed_dim, obs_dim], data).expect("finite gaussian entries"),
            seed,
        }
    }

    /// Wraps an explicit matrix (used when a projection is trained or loaded).
    pub fn from_matrix(matrix: Array, seed: u64) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Invalid(format!(
                "projection must be rank 2, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix, seed })
    }

    pub fn matrix(&self) -> &Array {
        &self.matrix
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Observation dimension `n`.
    pub fn obs_dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Embedding dimension `m`.
    pub fn embed_dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn project(&self, o: &[f64]) -> Result<Vec<f64>> {
        if o.len() != self.obs_dim() {
            return Err(Error::Dimension {
                expected: self.obs_dim(),
                got: o.len(),
            });
        }
        self.matrix.matvec(o)
    }
}

/// Convenience wrapper matching the module's operation name.
pub fn sample_projection(obs_dim: usize, embed_dim: usize, seed: u64) -> ProjectionMatrix {
    ProjectionMatrix::sample(obs_dim, embed_dim, seed)
}

/// Projection plus the Hopfield store of token embeddings.
#[derive(Clone, Debug)]
pub struct FrozenHopfield {
    projection: ProjectionMatrix,
    store: PatternStore,
}

impl FrozenHopfield {
    pub fn new(embeddings: Array, projection: ProjectionMatrix, beta: f64) -> Result<Self> {
        let store = PatternStore::new(embeddings, beta)?;
        if store.dim() != projection.embed_dim() {
            return Err(Error::Shape {
                op: "frozen_hopfield",
                lhs: projection.matrix().shape().to_vec(),
                rhs: store.patterns().shape().to_vec(),
            });
        }
        Ok(Self { projection, store })
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    pub fn store(&self) -> &PatternStore {
        &self.store
    }

    pub fn embeddings(&self) -> &Array {
        self.store.patterns()
    }

    pub fn beta(&self) -> f64 {
        self.store.beta()
    }

    pub fn obs_dim(&self) -> usize {
        self.projection.obs_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.store.dim()
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Ok(Self {
            projection: self.projection.clone(),
            store: self.store.with_beta(beta)?,
        })
    }

    /// Token-space input `x = Eᵀ softmax(beta E P o)`.
    pub fn embed(&self, o: &[f64]) -> Result<Vec<f64>> {
        let query = self.projection.project(o)?;
        self.store.update(&query)
    }

    /// Softmax weights over tokens for observation `o`.
    pub fn token_weights(&self, o: &[f64]) -> Result<Vec<f64>> {
        let query = self.projection.project(o)?;
        self.store.weights(&query)
    }

    /// `argmax_i e_iᵀ P o`, lowest index on ties.
    pub fn nearest_token(&self, o: &[f64]) -> Result<usize> {
        let query = self.projection.project(o)?;
        let scores = self.store.patterns().matvec(&query)?;
        Ok(argmax_lowest(&scores))
    }
}

/// Differentiable FrozenHopfield for a batch `obs: [B, n]` with the projection
/// `proj: [m, n]` and embeddings `emb: [k, m]` given as tape nodes. Used when
/// the projection is made trainable.
pub fn embed_on_tape(tape: &mut Tape, obs: Var, proj: Var, emb: Var, beta: f64) -> Result<Var> {
    let query = tape.matmul_nt(obs, proj)?;
    let scores = tape.matmul_nt(query, emb)?;
    let scaled = tape.scale(scores, beta);
    let weights = tape.softmax(scaled);
    tape.matmul(weights, emb)
}

/// JL failure probability `2 exp(-m (eps^2/2 - eps^3/3) / 2)`.
pub fn jl_failure_prob(embed_dim: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    let m = embed_dim as f64;
    Ok(2.0 * (-m * (eps * eps / 2.0 - eps.powi(3) / 3.0) / 2.0).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JlReport {
    pub eps: f64,
    pub embed_dim: usize,
    pub delta: f64,
    /// Fraction of pairs whose squared-length ratio left `[1 - eps, 1 + eps]`.
    pub violation_fraction: f64,
    pub violations: usize,
    /// Pairs with a non-zero difference (zero differences are skipped).
    pub pairs: usize,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

/// Squared-length distortion of the projection over observation pairs.
///
/// Entries of `P` have variance `n/m`, which makes `E‖P d‖² = n ‖d‖²`. The
/// distance-preservation guarantee is stated for the isometric scaling, so
/// the ratio reported per pair is `‖P d‖² / (n ‖d‖²)`, i.e. the distortion of
/// `P / sqrt(n)` whose entries are N(0, 1/m). The rescaling is a single
/// global constant and does not change which pairs are relatively closer.
pub fn distortion_stats(projection: &ProjectionMatrix, pairs: &[(Vec<f64>, Vec<f64>)], eps: f64) -> Result<JlReport> {
    let delta = jl_failure_prob(projection.embed_dim(), eps)?;
    let n = projection.obs_dim() as f64;
    let mut ratios = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::Dimension {
                expected: a.len(),
                got: b.len(),
            });
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let dn: f64 = d.iter().map(|v| v * v).sum();
        if dn == 0.0 {
            continue;
        }
        let pd = projection.project(&d)?;
        let pn: f64 = pd.iter().map(|v| v * v).sum();
        ratios.push(pn / (n * dn));
    }
    if ratios.is_empty() {
        return Err(Error::Invalid("no pair with a non-zero difference".into()));
    }
    let violations = ratios.iter().filter(|&&r| r < 1.0 - eps || r > 1.0 + eps).count();
    let count = ratios.len();
    Ok(JlReport {
        eps,
        embed_dim: projection.embed_dim(),
        delta,
        violation_fraction: violations as f64 / count as f64,
        violations,
        pairs: count,
        mean_ratio: ratios.iter().sum::<f64>() / count as f64,
        min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        max_ratio: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Symmetric matrix of pairwise Euclidean distances.
pub fn pairwise_distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct DistanceMatrices {
    pub observation: Vec<Vec<f64>>,
    /// One matrix per requested beta, in the order given.
    pub embedded: Vec<(f64, Vec<Vec<f64>>)>,
}

pub fn mean_offdiagonal(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = matrix.iter().flatten().sum();
    total / (n * (n - 1)) as f64
}

/// Pairwise distances in observation space and, for every beta, in the
/// embedded space.
pub fn distance_matrices(observations: &[Vec<f64>], fh: &FrozenHopfield, betas: &[f64]) -> Result<DistanceMatrices> {
    if observations.len() < 2 {
        return Err(Error::Invalid(
            "distance matrices need at least two observations".into(),
        ));
    }
    let mut embedded = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cfg = fh.with_beta(beta)?;
        let xs = observations.iter().map(|o| cfg.embed(o)).collect::<Result<Vec<_>>>()?;
        embedded.push((beta, pairwise_distances(&xs)));
    }
    Ok(DistanceMatrices {
        observation: pairwise_distances(observations),
        embedded,
    })
}
