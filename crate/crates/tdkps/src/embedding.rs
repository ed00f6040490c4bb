//! The shared temporal embedding: block distance matrix construction,
//! classical multidimensional scaling, profile-likelihood dimension
//! selection, and fixed-basis re-embedding of perturbed distance matrices.
//!
//! Slots are `(timepoint, agent)` pairs laid out as `t * N + n`, matching
//! the tensor's storage order. The embedding solves CMDS on the squared
//! block distances; the spectral basis is kept so that a perturbed distance
//! matrix can be projected back into the same coordinate system without
//! refitting.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{MeanResponseMatrix, ResponseTensor};

/// Eigenvalues this far below the largest (relatively) are treated as zero.
const SPECTRUM_TOLERANCE: f64 = 1e-10;

/// Symmetric `TN x TN` matrix of Frobenius distances between per-slot mean
/// response matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDistanceMatrix {
    n_agents: usize,
    n_times: usize,
    values: DMatrix<f64>,
}

impl BlockDistanceMatrix {
    /// Wrap an existing matrix, validating symmetry, zero diagonal, and
    /// nonnegativity.
    pub fn from_matrix(values: DMatrix<f64>, n_agents: usize, n_times: usize) -> Result<Self> {
        let size = n_agents * n_times;
        if values.nrows() != size || values.ncols() != size {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{}, expected {size}x{size}",
                values.nrows(),
                values.ncols()
            )));
        }
        for i in 0..size {
            if values[(i, i)] != 0.0 {
                return Err(Error::Validation(format!(
                    "diagonal entry ({i}, {i}) is {} instead of 0",
                    values[(i, i)]
                )));
            }
            for j in 0..size {
                let v = values[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "entry ({i}, {j}) = {v} is negative or non-finite"
                    )));
                }
                if (v - values[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Validation(format!(
                        "asymmetry at ({i}, {j}): {v} vs {}",
                        values[(j, i)]
                    )));
                }
            }
        }
        Ok(Self {
            n_agents,
            n_times,
            values,
        })
    }

    pub fn size(&self) -> usize {
        self.n_agents * self.n_times
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    /// Row/column of slot `(t, n)`: `t * N + n`.
    pub fn index(&self, time: usize, agent: usize) -> usize {
        time * self.n_agents + agent
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Build the block distance matrix from a tensor:
/// entry `(index(t, n), index(t', n'))` is the Frobenius distance between
/// the two slots' mean response matrices.
pub fn pairwise_block_distances(tensor: &ResponseTensor) -> BlockDistanceMatrix {
    let means = tensor.all_mean_responses();
    block_distances_from_means(&means, tensor.n_agents(), tensor.n_times())
}

/// Same, starting from precomputed per-slot mean matrices in slot order.
pub fn block_distances_from_means(
    means: &[MeanResponseMatrix],
    n_agents: usize,
    n_times: usize,
) -> BlockDistanceMatrix {
    let size = n_agents * n_times;
    debug_assert_eq!(means.len(), size);
    let mut values = DMatrix::zeros(size, size);
    for i in 0..size {
        for j in (i + 1)..size {
            let d = means[i].frobenius_distance(&means[j]);
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    BlockDistanceMatrix {
        n_agents,
        n_times,
        values,
    }
}

/// Double-center the squared distances: `B = -1/2 J S J` with
/// `S = D .* D` and `J = I - 11^T / TN`. Rows and columns of the result sum
/// to zero up to rounding.
pub fn double_center(d: &BlockDistanceMatrix) -> DMatrix<f64> {
    double_center_matrix(&d.values)
}

fn double_center_matrix(d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let mut s = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let v = d[(i, j)];
            s[(i, j)] = v * v;
        }
    }
    let row_means: Vec<f64> = (0..n).map(|i| s.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| s.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for j in 0..n {
        for i in 0..n {
            s[(i, j)] = -0.5 * (s[(i, j)] - row_means[i] - col_means[j] + grand);
        }
    }
    s
}

/// The frozen spectral factorization of the centered Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBasis {
    /// Number of retained components.
    pub dim: usize,
    /// Top `dim` eigenvalues of the centered Gram matrix, nonincreasing and
    /// strictly positive.
    pub singular_values: Vec<f64>,
    /// `TN x dim` matrix with orthonormal columns (the retained
    /// eigenvectors).
    pub basis_vectors: DMatrix<f64>,
    /// Full eigenvalue list, nonincreasing, for dimension diagnostics.
    pub all_eigenvalues: Vec<f64>,
    /// Fraction of total absolute eigenvalue mass carried by negative
    /// eigenvalues; nonzero when the input is not exactly Euclidean.
    pub negative_mass: f64,
}

/// Requested embedding dimension for [`cmds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimensionRequest {
    /// Profile-likelihood selection on the positive spectrum.
    Auto,
    Fixed(usize),
}

/// Coordinates for every `(t, n)` slot plus the basis that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TdkpsEmbedding {
    /// `TN x d`; row `t * N + n` holds the representation of agent `n` at
    /// time `t`.
    pub coords: DMatrix<f64>,
    pub basis: EmbeddingBasis,
    /// Set when a fixed dimension request exceeded the positive spectrum and
    /// was clamped.
    pub clamped: bool,
    n_agents: usize,
    n_times: usize,
}

impl TdkpsEmbedding {
    pub fn dim(&self) -> usize {
        self.basis.dim
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn index(&self, time: usize, agent: usize) -> usize {
        time * self.n_agents + agent
    }

    /// Coordinate row for slot `(t, n)`.
    pub fn slot_coords(&self, time: usize, agent: usize) -> Vec<f64> {
        let row = self.index(time, agent);
        (0..self.basis.dim).map(|c| self.coords[(row, c)]).collect()
    }

    /// Euclidean distance between two slots' coordinates.
    pub fn slot_distance(&self, a: usize, b: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.basis.dim {
            let diff = self.coords[(a, c)] - self.coords[(b, c)];
            acc += diff * diff;
        }
        acc.sqrt()
    }
}

/// Classical multidimensional scaling of the block distance matrix.
///
/// Eigendecomposes the centered Gram matrix, keeps the top `d` strictly
/// positive eigenpairs, and scales eigenvectors by the square roots of their
/// eigenvalues. `Auto` picks `d` by profile likelihood over the positive
/// spectrum. A `Fixed` request larger than the positive spectrum is clamped
/// (with [`TdkpsEmbedding::clamped`] set).
pub fn cmds(d: &BlockDistanceMatrix, dim_request: DimensionRequest) -> Result<TdkpsEmbedding> {
    let gram = double_center(d);
    let size = gram.nrows();
    let eigen = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let all_eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();

    let max_eig = all_eigenvalues[0];
    if max_eig <= 0.0 {
        return Err(Error::Degenerate(
            "centered Gram matrix has no positive eigenvalues".to_string(),
        ));
    }
    let threshold = max_eig * SPECTRUM_TOLERANCE;
    let positive: Vec<f64> = all_eigenvalues
        .iter()
        .copied()
        .take_while(|&v| v > threshold)
        .collect();

    let total_mass: f64 = all_eigenvalues.iter().map(|v| v.abs()).sum();
    let negative_mass = if total_mass > 0.0 {
        all_eigenvalues
            .iter()
            .filter(|&&v| v < 0.0)
            .map(|v| v.abs())
            .sum::<f64>()
            / total_mass
    } else {
        0.0
    };

    let (dim, clamped) = match dim_request {
        DimensionRequest::Auto => (select_dimension(&positive), false),
        DimensionRequest::Fixed(req) => {
            if req == 0 {
                return Err(Error::InvalidArgument(
                    "requested dimension must be >= 1".to_string(),
                ));
            }
            (req.min(positive.len()), req > positive.len())
        }
    };

    let mut basis_vectors = DMatrix::zeros(size, dim);
    let mut singular_values = Vec::with_capacity(dim);
    for (col, &src) in order.iter().take(dim).enumerate() {
        let mut v: Vec<f64> = (0..size).map(|r| eigen.eigenvectors[(r, src)]).collect();
        // deterministic sign: largest-magnitude entry positive
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        for (r, &x) in v.iter().enumerate() {
            basis_vectors[(r, col)] = x;
        }
        singular_values.push(all_eigenvalues[col]);
    }

    let mut coords = basis_vectors.clone();
    for (col, &lambda) in singular_values.iter().enumerate() {
        let scale = lambda.sqrt();
        for r in 0..size {
            coords[(r, col)] *= scale;
        }
    }

    Ok(TdkpsEmbedding {
        coords,
        basis: EmbeddingBasis {
            dim,
            singular_values,
            basis_vectors,
            all_eigenvalues,
            negative_mass,
        },
        clamped,
        n_agents: d.n_agents,
        n_times: d.n_times,
    })
}

/// Profile-likelihood split of a nonincreasing eigenvalue sequence: the two
/// segments are modeled as Gaussians with a common pooled variance, and the
/// split with the highest log-likelihood wins. Ties go to the smaller index;
/// fewer than two eigenvalues return 1.
pub fn select_dimension(eigenvalues: &[f64]) -> usize {
    let len = eigenvalues.len();
    if len < 2 {
        return 1;
    }
    let mut best_q = 1usize;
    let mut best_ll = f64::NEG_INFINITY;
    for q in 1..len {
        let (head, tail) = eigenvalues.split_at(q);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let mu1 = mean(head);
        let mu2 = mean(tail);
        let ss: f64 = head.iter().map(|v| (v - mu1) * (v - mu1)).sum::<f64>()
            + tail.iter().map(|v| (v - mu2) * (v - mu2)).sum::<f64>();
        let denom = (len - 2).max(1) as f64;
        let var = (ss / denom).max(1e-12);
        // log N(x; mu, var) summed over both segments
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let ll = len as f64 * log_norm - ss / (2.0 * var);
        if ll > best_ll {
            best_ll = ll;
            best_q = q;
        }
    }
    best_q
}

/// Re-embed a perturbed distance matrix through a frozen basis.
///
/// The perturbed matrix is double-centered with its own means, then
/// projected through `V diag(1/sqrt(lambda))`. Feeding back the original
/// matrix reproduces the original coordinates, since `B V = V diag(lambda)`.
pub fn reembed_fixed_basis(
    d_perturbed: &BlockDistanceMatrix,
    basis: &EmbeddingBasis,
) -> Result<TdkpsEmbedding> {
    if d_perturbed.size() != basis.basis_vectors.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix size {} does not match basis size {}",
            d_perturbed.size(),
            basis.basis_vectors.nrows()
        )));
    }
    let gram = double_center(d_perturbed);
    let mut projection = basis.basis_vectors.clone();
    for (col, &lambda) in basis.singular_values.iter().enumerate() {
        let scale = 1.0 / lambda.sqrt();
        for r in 0..projection.nrows() {
            projection[(r, col)] *= scale;
        }
    }
    let coords = gram * projection;
    Ok(TdkpsEmbedding {
        coords,
        basis: basis.clone(),
        clamped: false,
        n_agents: d_perturbed.n_agents,
        n_times: d_perturbed.n_times,
    })
}

/// Copy of `d` with the rows/columns of slots `(t, agent)` and `(t2, agent)`
/// recomputed against the replacement mean matrices; everything else is
/// untouched. `means` are the original per-slot mean matrices in slot order.
pub fn update_agent_distances_with_means(
    d: &BlockDistanceMatrix,
    means: &[MeanResponseMatrix],
    replacement_t: &MeanResponseMatrix,
    replacement_t2: &MeanResponseMatrix,
    agent: usize,
    time: usize,
    time2: usize,
) -> Result<BlockDistanceMatrix> {
    let size = d.size();
    if means.len() != size {
        return Err(Error::DimensionMismatch(format!(
            "{} mean matrices for {} slots",
            means.len(),
            size
        )));
    }
    if agent >= d.n_agents {
        return Err(Error::IndexOutOfRange(format!(
            "agent {agent} >= N = {}",
            d.n_agents
        )));
    }
    if time >= d.n_times || time2 >= d.n_times {
        return Err(Error::IndexOutOfRange(format!(
            "timepoint out of range for T = {}",
            d.n_times
        )));
    }
    if time == time2 {
        return Err(Error::InvalidArgument(
            "the two timepoints must differ".to_string(),
        ));
    }

    let slot_a = d.index(time, agent);
    let slot_b = d.index(time2, agent);
    let mut values = d.values.clone();
    for (slot, replacement) in [(slot_a, replacement_t), (slot_b, replacement_t2)] {
        for other in 0..size {
            if other == slot_a || other == slot_b {
                continue;
            }
            let dist = replacement.frobenius_distance(&means[other]);
            values[(slot, other)] = dist;
            values[(other, slot)] = dist;
        }
    }
    let mutual = replacement_t.frobenius_distance(replacement_t2);
    values[(slot_a, slot_b)] = mutual;
    values[(slot_b, slot_a)] = mutual;

    Ok(BlockDistanceMatrix {
        n_agents: d.n_agents,
        n_times: d.n_times,
        values,
    })
}

/// As [`update_agent_distances_with_means`], recomputing the original means
/// from the tensor.
pub fn update_agent_distances(
    d: &BlockDistanceMatrix,
    tensor: &ResponseTensor,
    replacement_t: &MeanResponseMatrix,
    replacement_t2: &MeanResponseMatrix,
    agent: usize,
    time: usize,
    time2: usize,
) -> Result<BlockDistanceMatrix> {
    let means = tensor.all_mean_responses();
    update_agent_distances_with_means(d, &means, replacement_t, replacement_t2, agent, time, time2)
}

/// CSV export: `time_index,agent_index,c0,...,c{d-1}` with 17-significant-
/// digit floats.
pub fn write_embedding_csv<W: Write>(embedding: &TdkpsEmbedding, mut out: W) -> Result<()> {
    write!(out, "time_index,agent_index")?;
    for c in 0..embedding.dim() {
        write!(out, ",c{c}")?;
    }
    writeln!(out)?;
    for t in 0..embedding.n_times {
        for n in 0..embedding.n_agents {
            write!(out, "{t},{n}")?;
            let row = embedding.index(t, n);
            for c in 0..embedding.dim() {
                write!(out, ",{}", crate::format_g17(embedding.coords[(row, c)]))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
