//! Statistical primitives shared by the agent- and group-level tests:
//! permutation p-values, energy distance, distance correlation, Hotelling's
//! T-squared (two-sample and paired), Fisher's combination, Kendall's tau.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};

/// Outcome of a hypothesis test.
///
/// `n_permutations` is 0 for analytic tests. `null_sample` is retained only
/// when the caller opts in.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub null_sample: Option<Vec<f64>>,
    pub method_name: String,
}

impl TestResult {
    pub fn analytic(statistic: f64, p_value: f64, method_name: &str) -> Self {
        Self {
            statistic,
            p_value,
            n_permutations: 0,
            null_sample: None,
            method_name: method_name.to_string(),
        }
    }
}

/// Which side of the permutation null counts as at least as extreme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    OneSided,
    /// Compare absolute values on both sides.
    TwoSided,
}

/// Permutation p-value `(1 + #{nulls at least as extreme}) / (1 + B)`.
///
/// Ties count as exceedances, so the result is always in `[1/(1+B), 1]`.
pub fn perm_pvalue(observed: f64, nulls: &[f64], tail: Tail) -> Result<f64> {
    if nulls.is_empty() {
        return Err(Error::InvalidArgument(
            "permutation p-value needs at least one null draw".to_string(),
        ));
    }
    if !observed.is_finite() || nulls.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite statistic in permutation p-value".to_string(),
        ));
    }
    let exceed = match tail {
        Tail::OneSided => nulls.iter().filter(|&&v| v >= observed).count(),
        Tail::TwoSided => {
            let obs = observed.abs();
            nulls.iter().filter(|&&v| v.abs() >= obs).count()
        }
    };
    Ok((1 + exceed) as f64 / (1 + nulls.len()) as f64)
}

/// How the cross-timepoint average treats pairs with matching agent index.
///
/// The paired-energy statistic excludes them (all three averages run over
/// `n != n'` with denominator `n_l (n_l - 1)`); the standard two-sample
/// energy distance keeps them in the cross term with denominator `n_l^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossPairConvention {
    #[default]
    ExcludeMatched,
    IncludeMatched,
}

/// Paired energy distance `2 * D-bar_tt' - D-bar_t - D-bar_t'` over a
/// precomputed distance matrix.
///
/// `idx_t` and `idx_t2` pick the rows of the two samples; position `k` of
/// both vectors refers to the same agent, which is what "matching index"
/// means for [`CrossPairConvention`]. Under the default convention the
/// statistic can be negative.
pub fn energy_distance(dist: &DMatrix<f64>, idx_t: &[usize], idx_t2: &[usize]) -> Result<f64> {
    energy_distance_with_convention(dist, idx_t, idx_t2, CrossPairConvention::ExcludeMatched)
}

pub fn energy_distance_with_convention(
    dist: &DMatrix<f64>,
    idx_t: &[usize],
    idx_t2: &[usize],
    convention: CrossPairConvention,
) -> Result<f64> {
    energy_distance_counted(dist, idx_t, idx_t2, convention).map(|(v, _)| v)
}

/// Internal variant that also reports how many matrix cells were visited,
/// used to assert the permutation-loop complexity contract.
pub(crate) fn energy_distance_counted(
    dist: &DMatrix<f64>,
    idx_t: &[usize],
    idx_t2: &[usize],
    convention: CrossPairConvention,
) -> Result<(f64, u64)> {
    let n = idx_t.len();
    if n != idx_t2.len() {
        return Err(Error::InvalidArgument(format!(
            "index sets have different sizes {} and {}",
            n,
            idx_t2.len()
        )));
    }
    if n < 2 {
        return Err(Error::Degenerate(
            "energy distance needs at least two agents per timepoint".to_string(),
        ));
    }
    let size = dist.nrows();
    if idx_t.iter().chain(idx_t2).any(|&i| i >= size) {
        return Err(Error::IndexOutOfRange(format!(
            "slot index exceeds distance matrix size {size}"
        )));
    }
    for (a, b) in idx_t.iter().zip(idx_t2) {
        if a == b {
            return Err(Error::InvalidArgument(
                "index sets must be disjoint".to_string(),
            ));
        }
    }

    let mut ops = 0u64;
    let mut within_t = 0.0;
    let mut within_t2 = 0.0;
    let mut cross = 0.0;
    let mut cross_pairs = 0u64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                within_t += dist[(idx_t[i], idx_t[j])];
                within_t2 += dist[(idx_t2[i], idx_t2[j])];
                cross += dist[(idx_t[i], idx_t2[j])];
                cross_pairs += 1;
                ops += 3;
            } else if convention == CrossPairConvention::IncludeMatched {
                cross += dist[(idx_t[i], idx_t2[j])];
                cross_pairs += 1;
                ops += 1;
            }
        }
    }
    let pairs = (n * (n - 1)) as f64;
    let statistic =
        2.0 * cross / cross_pairs as f64 - within_t / pairs - within_t2 / pairs;
    Ok((statistic, ops))
}

/// Euclidean distance matrix between rows of a sample matrix.
fn row_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..x.ncols() {
                let diff = x[(i, c)] - x[(j, c)];
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

/// Double-center a distance matrix in place: `a_ij - rowmean_i - colmean_j + grandmean`.
fn center_distances(d: &mut DMatrix<f64>) {
    let n = d.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| d.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[(i, j)] = d[(i, j)] - row_means[i] - row_means[j] + grand;
        }
    }
}

struct CenteredPair {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dvar_a: f64,
    dvar_b: f64,
}

fn centered_pair(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<CenteredPair> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(Error::InvalidArgument(format!(
            "sample matrices have {} and {} rows",
            n,
            y.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "distance correlation needs at least two rows".to_string(),
        ));
    }
    let mut a = row_distances(x);
    let mut b = row_distances(y);
    center_distances(&mut a);
    center_distances(&mut b);
    let n2 = (n * n) as f64;
    let dvar_a = a.iter().map(|v| v * v).sum::<f64>() / n2;
    let dvar_b = b.iter().map(|v| v * v).sum::<f64>() / n2;
    if dvar_a <= 0.0 {
        return Err(Error::ZeroVariance(
            "first sample has zero distance variance".to_string(),
        ));
    }
    if dvar_b <= 0.0 {
        return Err(Error::ZeroVariance(
            "second sample has zero distance variance".to_string(),
        ));
    }
    Ok(CenteredPair { a, b, dvar_a, dvar_b })
}

/// Sample distance correlation (biased / V-statistic form), in `[0, 1]`.
pub fn distance_correlation(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let pair = centered_pair(x, y)?;
    let n2 = (x.nrows() * x.nrows()) as f64;
    let dcov = pair
        .a
        .iter()
        .zip(pair.b.iter())
        .map(|(u, v)| u * v)
        .sum::<f64>()
        / n2;
    Ok((dcov.max(0.0) / (pair.dvar_a * pair.dvar_b).sqrt()).sqrt())
}

/// Distance-correlation independence test with a permutation null built by
/// permuting the rows of `y`.
pub fn dcorr_perm_test(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n_permutations: usize,
    rng: &mut impl Rng,
    keep_null_sample: bool,
) -> Result<TestResult> {
    if n_permutations == 0 {
        return Err(Error::InvalidArgument(
            "permutation test needs B >= 1".to_string(),
        ));
    }
    let pair = centered_pair(x, y)?;
    let n = x.nrows();
    let n2 = (n * n) as f64;
    let norm = (pair.dvar_a * pair.dvar_b).sqrt();

    let dcorr_for = |perm: &[usize], pair: &CenteredPair| -> f64 {
        // permuting rows of y permutes its centered distance matrix
        // simultaneously in rows and columns
        let mut dcov = 0.0;
        for i in 0..n {
            for j in 0..n {
                dcov += pair.a[(i, j)] * pair.b[(perm[i], perm[j])];
            }
        }
        ((dcov / n2).max(0.0) / norm).sqrt()
    };

    let identity: Vec<usize> = (0..n).collect();
    let observed = dcorr_for(&identity, &pair);

    let mut perm = identity;
    let mut nulls = Vec::with_capacity(n_permutations);
    for _ in 0..n_permutations {
        perm.shuffle(rng);
        nulls.push(dcorr_for(&perm, &pair));
    }
    let p_value = perm_pvalue(observed, &nulls, Tail::OneSided)?;
    Ok(TestResult {
        statistic: observed,
        p_value,
        n_permutations,
        null_sample: keep_null_sample.then_some(nulls),
        method_name: "dcorr_perm".to_string(),
    })
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Sample covariance with the `n - 1` denominator.
fn sample_covariance(x: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let k = x.ncols();
    let mut cov = DMatrix::zeros(k, k);
    for row in x.row_iter() {
        let d = row.transpose() - means;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov / (n as f64 - 1.0)
}

fn f_survival(stat: f64, d1: f64, d2: f64) -> Result<f64> {
    let f = FisherSnedecor::new(d1, d2).map_err(|e| {
        Error::InvalidArgument(format!("invalid F distribution parameters: {e}"))
    })?;
    Ok(f.sf(stat))
}

/// Two-sample Hotelling T-squared test with pooled covariance and the exact
/// F reference distribution.
pub fn hotelling_two_sample(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<TestResult> {
    let (n1, n2, k) = (a.nrows(), b.nrows(), a.ncols());
    if b.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "samples have {} and {} columns",
            k,
            b.ncols()
        )));
    }
    if n1 + n2 <= k + 2 {
        return Err(Error::InvalidArgument(format!(
            "need n1 + n2 - 2 > k, got n1 = {n1}, n2 = {n2}, k = {k}"
        )));
    }
    let mean_a = column_means(a);
    let mean_b = column_means(b);
    let diff = &mean_a - &mean_b;

    // identical-means short circuit: T^2 is 0 regardless of the covariance,
    // which otherwise may be singular (e.g. noiseless data)
    if diff.iter().all(|&v| v == 0.0) {
        return Ok(TestResult::analytic(0.0, 1.0, "hotelling_two_sample"));
    }

    let pooled = (sample_covariance(a, &mean_a) * (n1 as f64 - 1.0)
        + sample_covariance(b, &mean_b) * (n2 as f64 - 1.0))
        / (n1 + n2 - 2) as f64;

    let chol = Cholesky::new(pooled).ok_or_else(|| {
        Error::Singular("pooled covariance is not positive definite".to_string())
    })?;
    let solved = chol.solve(&diff);
    let t2 = (n1 * n2) as f64 / (n1 + n2) as f64 * diff.dot(&solved);

    let d1 = k as f64;
    let d2 = (n1 + n2 - k - 1) as f64;
    let f_stat = d2 / ((n1 + n2 - 2) as f64 * d1) * t2;
    let p_value = f_survival(f_stat, d1, d2)?;
    Ok(TestResult::analytic(t2, p_value, "hotelling_two_sample"))
}

/// Paired Hotelling T-squared test on a matrix of within-pair differences.
pub fn hotelling_paired(diffs: &DMatrix<f64>) -> Result<TestResult> {
    let (n, k) = (diffs.nrows(), diffs.ncols());
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need n > k, got n = {n}, k = {k}"
        )));
    }
    let mean = column_means(diffs);
    if mean.iter().all(|&v| v == 0.0) {
        return Ok(TestResult::analytic(0.0, 1.0, "hotelling_paired"));
    }
    let cov = sample_covariance(diffs, &mean);
    let chol = Cholesky::new(cov).ok_or_else(|| {
        Error::Singular("difference covariance is not positive definite".to_string())
    })?;
    let solved = chol.solve(&mean);
    let t2 = n as f64 * mean.dot(&solved);

    let d1 = k as f64;
    let d2 = (n - k) as f64;
    let f_stat = d2 / ((n as f64 - 1.0) * d1) * t2;
    let p_value = f_survival(f_stat, d1, d2)?;
    Ok(TestResult::analytic(t2, p_value, "hotelling_paired"))
}

/// Fisher's method: combine p-values via `-2 sum(log p) ~ chi^2_{2M}`.
pub fn fisher_combine(pvals: &[f64]) -> Result<f64> {
    if pvals.is_empty() {
        return Err(Error::InvalidArgument(
            "fisher combination needs at least one p-value".to_string(),
        ));
    }
    if pvals.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidArgument(
            "p-values must lie in (0, 1]".to_string(),
        ));
    }
    let statistic = -2.0 * pvals.iter().map(|p| p.ln()).sum::<f64>();
    let chi2 = ChiSquared::new(2.0 * pvals.len() as f64)
        .map_err(|e| Error::InvalidArgument(format!("invalid chi-squared dof: {e}")))?;
    Ok(chi2.sf(statistic))
}

/// Kendall's tau-b with tie correction; two-sided p-value from the normal
/// approximation with continuity correction.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::InvalidArgument(format!(
            "kendall tau needs equal lengths, got {} and {}",
            n,
            y.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "kendall tau needs at least two observations".to_string(),
        ));
    }

    let mut s = 0i64; // concordant minus discordant
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).ok_or_else(|| {
                Error::InvalidArgument("non-finite value in kendall tau".to_string())
            })?;
            let dy = (y[i] - y[j]).partial_cmp(&0.0).ok_or_else(|| {
                Error::InvalidArgument("non-finite value in kendall tau".to_string())
            })?;
            use std::cmp::Ordering::Equal;
            if dx == Equal || dy == Equal {
                continue;
            }
            if dx == dy {
                s += 1;
            } else {
                s -= 1;
            }
        }
    }

    let tie_groups = |v: &[f64]| -> Vec<u64> {
        let mut sorted: Vec<f64> = v.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut groups = Vec::new();
        let mut run = 1u64;
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                if run > 1 {
                    groups.push(run);
                }
                run = 1;
            }
        }
        if run > 1 {
            groups.push(run);
        }
        groups
    };
    let tx = tie_groups(x);
    let ty = tie_groups(y);
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let n1: f64 = tx.iter().map(|&t| t as f64 * (t as f64 - 1.0) / 2.0).sum();
    let n2: f64 = ty.iter().map(|&t| t as f64 * (t as f64 - 1.0) / 2.0).sum();
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroVariance(
            "all values tied in one of the inputs".to_string(),
        ));
    }
    let tau = s as f64 / denom;

    // tie-corrected variance of S (normal approximation)
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt: f64 = tx
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * (t - 1.0) * (2.0 * t + 5.0)
        })
        .sum();
    let vu: f64 = ty
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * (t - 1.0) * (2.0 * t + 5.0)
        })
        .sum();
    let t1: f64 = tx.iter().map(|&t| (t * (t - 1) * (t.max(2) - 2)) as f64).sum();
    let u1: f64 = ty.iter().map(|&t| (t * (t - 1) * (t.max(2) - 2)) as f64).sum();
    let t2: f64 = tx.iter().map(|&t| (t * (t - 1)) as f64).sum();
    let u2: f64 = ty.iter().map(|&t| (t * (t - 1)) as f64).sum();
    let mut var_s = (v0 - vt - vu) / 18.0 + t2 * u2 / (2.0 * nf * (nf - 1.0));
    if n > 2 {
        var_s += t1 * u1 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    }
    if var_s <= 0.0 {
        return Err(Error::ZeroVariance(
            "degenerate variance in kendall tau".to_string(),
        ));
    }
    let z = (s.unsigned_abs() as f64 - 1.0).max(0.0) / var_s.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.sf(z)).min(1.0);
    Ok((tau, p))
}
