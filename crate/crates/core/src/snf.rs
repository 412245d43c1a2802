//! Similarity network fusion.
//!
//! Each feature channel contributes a kernel `W` over the same `n` objects.
//! From it come a full transition matrix `P` (off-diagonal mass 1/2, self
//! loop 1/2) and a kNN-truncated one `S`. Cross-diffusion then repeatedly
//! replaces each channel's `P` by `S (mean of the other P) Sᵀ`.
//!
//! Two uses: early fusion on a song pair's parent matrix (both songs'
//! self-similarities plus their cross-similarity), and late fusion on the
//! corpus-level alignment score networks.

use ndarray::{s, Array2, ArrayView2};

use crate::csm::{binarize_mutual_knn, neighbor_count, BinaryCsm, Direction};
use crate::error::{Error, Result};

const SIGMA_FLOOR: f64 = 1e-12;

/// Additive guard in the late-fusion reciprocal distance `1 / (score + ε)`.
pub const LATE_EPSILON: f64 = 1e-9;

/// Gaussian affinities with per-pair autotuned scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub w: Array2<f64>,
    pub sigma: Array2<f64>,
    pub knn_k: usize,
}

impl Kernel {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }
}

fn check_square(d: &ArrayView2<f64>) -> Result<()> {
    let (r, c) = d.dim();
    if r != c {
        return Err(Error::NonSquare(r, c));
    }
    Ok(())
}

fn check_distances(d: &ArrayView2<f64>) -> Result<()> {
    for ((row, col), &value) in d.indexed_iter() {
        if !value.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite distance at ({row}, {col})"
            )));
        }
        if value < 0.0 {
            return Err(Error::NegativeDistance { row, col, value });
        }
    }
    Ok(())
}

/// Mean of the `k` smallest values.
fn mean_smallest(mut values: Vec<f64>, k: usize) -> f64 {
    if values.is_empty() || k == 0 {
        return 0.0;
    }
    let k = k.min(values.len());
    values.sort_by(f64::total_cmp);
    values[..k].iter().sum::<f64>() / k as f64
}

fn gaussian(rho: f64, mean_i: f64, mean_j: f64) -> (f64, f64) {
    let sigma = ((mean_i + mean_j + rho) / 3.0).max(SIGMA_FLOOR);
    ((-(rho * rho) / (2.0 * sigma * sigma)).exp(), sigma)
}

/// `W(i,j) = exp(−ρ² / 2σ²)` with `σ_ij` the mean of `ρ(i,j)` and the mean
/// distances from `i` and from `j` to their `knn_k` nearest other points.
pub fn autotuned_kernel(dist: ArrayView2<f64>, knn_k: usize) -> Result<Kernel> {
    check_square(&dist)?;
    check_distances(&dist)?;
    let n = dist.nrows();
    let knn_mean: Vec<f64> = (0..n)
        .map(|i| {
            let others = (0..n).filter(|&j| j != i).map(|j| dist[[i, j]]).collect();
            mean_smallest(others, knn_k)
        })
        .collect();
    let mut w = Array2::zeros((n, n));
    let mut sigma = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (wij, sij) = gaussian(dist[[i, j]], knn_mean[i], knn_mean[j]);
            w[[i, j]] = wij;
            sigma[[i, j]] = sij;
        }
    }
    Ok(Kernel { w, sigma, knn_k })
}

/// A row-stochastic matrix plus the rows that had no off-diagonal mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub matrix: Array2<f64>,
    /// Rows reduced to a pure self loop.
    pub isolated: Vec<usize>,
}

/// Full transition matrix: off-diagonal `W(i,j) / (2 Σ_{k≠i} W(i,k))`, diagonal 1/2.
pub fn full_transition(kernel: &Kernel) -> Transition {
    let mut matrix = kernel.w.clone();
    let isolated = regularize(&mut matrix);
    Transition { matrix, isolated }
}

/// Rescales every row to off-diagonal mass 1/2 and sets the diagonal to
/// 1/2. Rows without off-diagonal mass become self loops; their indices
/// are returned.
fn regularize(p: &mut Array2<f64>) -> Vec<usize> {
    let mut isolated = Vec::new();
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let off: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
        if off > 0.0 && off.is_finite() {
            let scale = 0.5 / off;
            row.mapv_inplace(|v| v * scale);
            row[i] = 0.5;
        } else {
            row.fill(0.0);
            row[i] = 1.0;
            isolated.push(i);
        }
    }
    isolated
}

/// Row-sparse transition matrix restricted to each row's nearest neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTransition {
    n: usize,
    /// `(column, probability)` pairs sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
    pub isolated: Vec<usize>,
}

impl SparseTransition {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// `self · x · selfᵀ`. Both products accumulate whole rows, using `L Sᵀ = (S Lᵀ)ᵀ`.
    fn sandwich(&self, x: &Array2<f64>) -> Array2<f64> {
        let left = self.apply(x);
        let right_t = self.apply(&left.t().as_standard_layout().to_owned());
        right_t.t().as_standard_layout().to_owned()
    }

    /// `self · x`, accumulating whole rows of `x`.
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let cols = x.ncols();
        let src = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n * cols];
        for (row, dst) in self.rows.iter().zip(out.chunks_exact_mut(cols.max(1))) {
            for &(j, v) in row {
                for (d, s) in dst.iter_mut().zip(&src[j * cols..(j + 1) * cols]) {
                    *d += v * s;
                }
            }
        }
        Array2::from_shape_vec((self.n, cols), out).expect("shape matches")
    }
}

/// kNN-truncated transition matrix. Each row keeps the `knn_k` largest
/// affinities (itself included, ties kept) renormalized to sum to 1.
pub fn knn_transition(kernel: &Kernel, knn_k: usize) -> SparseTransition {
    let n = kernel.n();
    let k = knn_k.clamp(1, n.max(1));
    let mut isolated = Vec::new();
    let rows = (0..n)
        .map(|i| {
            let row = kernel.w.row(i);
            let off: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            if !(off > 0.0) {
                isolated.push(i);
                return vec![(i, 1.0)];
            }
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let cutoff = sorted[k - 1];
            let support: Vec<(usize, f64)> = row.iter().copied().enumerate().filter(|&(_, v)| v >= cutoff).collect();
            let total: f64 = support.iter().map(|&(_, v)| v).sum();
            if !(total > 0.0) {
                isolated.push(i);
                return vec![(i, 1.0)];
            }
            support.into_iter().map(|(j, v)| (j, v / total)).collect()
        })
        .collect();
    SparseTransition { n, rows, isolated }
}

/// Result of cross-diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedProbability {
    /// Mean of the per-network transition matrices after the last iteration.
    pub p_hat: Array2<f64>,
    pub iterations: usize,
    /// Per-network matrices after the last iteration.
    pub per_network: Vec<Array2<f64>>,
}

/// Elementwise mean of `mats`, summed in sorted order per entry so the
/// result does not depend on the order of `mats`.
fn order_free_mean(mats: &[&Array2<f64>]) -> Array2<f64> {
    let dim = mats[0].dim();
    let denom = mats.len() as f64;
    let flat: Vec<&[f64]> = mats.iter().map(|m| m.as_slice().expect("standard layout")).collect();
    let mut buf = vec![0.0; mats.len()];
    let values = (0..dim.0 * dim.1)
        .map(|k| {
            for (b, m) in buf.iter_mut().zip(&flat) {
                *b = m[k];
            }
            // two-term sums are already order free
            if buf.len() > 2 {
                buf.sort_by(f64::total_cmp);
            }
            buf.iter().sum::<f64>() / denom
        })
        .collect();
    Array2::from_shape_vec(dim, values).expect("shape matches")
}

/// Runs `iterations` steps of `P_f ← S_f (mean_{v≠f} P_v) S_fᵀ` followed by
/// the same diagonal regularization as [`full_transition`], and returns the
/// mean of the final `P_f`.
pub fn cross_diffuse(kernels: &[Kernel], knn_k: usize, iterations: usize) -> Result<FusedProbability> {
    let m = kernels.len();
    if m < 2 {
        return Err(Error::TooFewNetworks(m));
    }
    let n = kernels[0].n();
    if let Some(bad) = kernels.iter().find(|k| k.n() != n || k.w.ncols() != n) {
        return Err(Error::DimensionMismatch(format!(
            "kernel of size {}x{} among {n}x{n} kernels",
            bad.w.nrows(),
            bad.w.ncols()
        )));
    }
    let sparse: Vec<SparseTransition> = kernels.iter().map(|k| knn_transition(k, knn_k)).collect();
    let mut p: Vec<Array2<f64>> = kernels.iter().map(|k| full_transition(k).matrix).collect();
    for _ in 0..iterations {
        p = (0..m)
            .map(|f| {
                let others: Vec<&Array2<f64>> = (0..m).filter(|&v| v != f).map(|v| &p[v]).collect();
                let mut next = sparse[f].sandwich(&order_free_mean(&others));
                regularize(&mut next);
                next
            })
            .collect();
    }
    let all: Vec<&Array2<f64>> = p.iter().collect();
    let p_hat = order_free_mean(&all);
    Ok(FusedProbability {
        p_hat,
        iterations,
        per_network: p,
    })
}

/// Kernel over the concatenation of songs A and B for one channel, laid out as
/// `[[W_A, W_AB], [W_ABᵀ, W_B]]` with scales tuned separately per quadrant.
#[derive(Debug, Clone, PartialEq)]
pub struct ParentKernel {
    pub kernel: Kernel,
    pub m: usize,
    pub n: usize,
}

impl ParentKernel {
    pub fn cross_block(&self) -> ArrayView2<'_, f64> {
        self.kernel.w.slice(s![..self.m, self.m..])
    }
}

/// Builds the parent kernel of one channel. The self-similarity quadrants are
/// tuned with `knn_k` neighbors; the cross quadrant with `⌈κN⌉` neighbors
/// along its rows and `⌈κM⌉` along its columns.
pub fn build_parent_kernel(
    ssm_a: ArrayView2<f64>,
    ssm_b: ArrayView2<f64>,
    csm: ArrayView2<f64>,
    kappa: f64,
    knn_k: usize,
) -> Result<ParentKernel> {
    check_square(&ssm_a)?;
    check_square(&ssm_b)?;
    let (m, n) = (ssm_a.nrows(), ssm_b.nrows());
    if csm.dim() != (m, n) {
        return Err(Error::DimensionMismatch(format!(
            "cross-similarity is {:?}, songs have {m} and {n} blocks",
            csm.dim()
        )));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa must lie in (0, 1), got {kappa}"
        )));
    }
    check_distances(&csm)?;
    let ka = autotuned_kernel(ssm_a, knn_k)?;
    let kb = autotuned_kernel(ssm_b, knn_k)?;
    let (k_row, k_col) = (neighbor_count(kappa, n), neighbor_count(kappa, m));
    let row_mean: Vec<f64> = csm
        .rows()
        .into_iter()
        .map(|r| mean_smallest(r.to_vec(), k_row))
        .collect();
    let col_mean: Vec<f64> = csm
        .columns()
        .into_iter()
        .map(|c| mean_smallest(c.to_vec(), k_col))
        .collect();

    let size = m + n;
    let mut w = Array2::zeros((size, size));
    let mut sigma = Array2::zeros((size, size));
    w.slice_mut(s![..m, ..m]).assign(&ka.w);
    sigma.slice_mut(s![..m, ..m]).assign(&ka.sigma);
    w.slice_mut(s![m.., m..]).assign(&kb.w);
    sigma.slice_mut(s![m.., m..]).assign(&kb.sigma);
    for i in 0..m {
        for j in 0..n {
            let (wij, sij) = gaussian(csm[[i, j]], row_mean[i], col_mean[j]);
            w[[i, m + j]] = wij;
            w[[m + j, i]] = wij;
            sigma[[i, m + j]] = sij;
            sigma[[m + j, i]] = sij;
        }
    }
    Ok(ParentKernel {
        kernel: Kernel { w, sigma, knn_k },
        m,
        n,
    })
}

/// One channel's distances for a song pair.
#[derive(Debug, Clone, Copy)]
pub struct PairDistances<'a> {
    pub ssm_a: ArrayView2<'a, f64>,
    pub ssm_b: ArrayView2<'a, f64>,
    pub csm: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyFusion {
    /// The `M x N` cross block of the fused transition matrix.
    pub cross_probability: Array2<f64>,
    pub binary: BinaryCsm,
    pub fused: FusedProbability,
}

/// Early fusion of a song pair: parent kernels per channel, cross-diffusion,
/// then mutual highest-probability binarization of the cross block.
pub fn early_fuse_pair(
    channels: &[PairDistances<'_>],
    kappa: f64,
    knn_k: usize,
    iterations: usize,
) -> Result<EarlyFusion> {
    let Some(first) = channels.first() else {
        return Err(Error::TooFewNetworks(0));
    };
    let (m, n) = first.csm.dim();
    let parents = channels
        .iter()
        .map(|c| {
            if c.csm.dim() != (m, n) {
                return Err(Error::DimensionMismatch(format!(
                    "channel cross-similarity {:?} differs from {:?}",
                    c.csm.dim(),
                    (m, n)
                )));
            }
            build_parent_kernel(c.ssm_a, c.ssm_b, c.csm, kappa, knn_k).map(|p| p.kernel)
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = cross_diffuse(&parents, knn_k, iterations)?;
    let cross_probability = fused.p_hat.slice(s![..m, m..]).to_owned();
    let binary = binarize_mutual_knn(cross_probability.view(), kappa, Direction::Largest)?;
    Ok(EarlyFusion {
        cross_probability,
        binary,
        fused,
    })
}

/// Distance analog of a score network: `1 / (score + ε)` off the diagonal, 0 on it.
pub fn score_distance(scores: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_square(&scores)?;
    if let Some(((row, col), &value)) = scores.indexed_iter().find(|&((i, j), v)| i != j && !(*v >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "score {value} at ({row}, {col}) is not a nonnegative number"
        )));
    }
    Ok(Array2::from_shape_fn(scores.dim(), |(i, j)| {
        if i == j {
            0.0
        } else {
            1.0 / (scores[[i, j]] + LATE_EPSILON)
        }
    }))
}

/// Late fusion over corpus score networks (higher score = more similar).
/// Returns the fused transition matrix; higher = more similar.
pub fn late_fuse_scores(scores: &[ArrayView2<f64>], knn_k: usize, iterations: usize) -> Result<Array2<f64>> {
    if scores.len() < 2 {
        return Err(Error::TooFewNetworks(scores.len()));
    }
    let n = scores[0].nrows();
    let kernels = scores
        .iter()
        .map(|s| {
            if s.dim() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "score matrix {:?}, expected {n}x{n}",
                    s.dim()
                )));
            }
            autotuned_kernel(score_distance(*s)?.view(), knn_k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cross_diffuse(&kernels, knn_k, iterations)?.p_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0))
    }

    fn cross_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }

    fn random_dist(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let p = points(n, 3, rng);
        cross_dist(&p, &p)
    }

    fn permute(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], perm[j]]])
    }

    #[test]
    fn zero_distances_give_all_ones() {
        let k = autotuned_kernel(Array2::zeros((4, 4)).view(), 2).unwrap();
        assert!(k.w.iter().all(|&v| v == 1.0));
        assert!(k.sigma.iter().all(|&v| v == SIGMA_FLOOR));
    }

    #[test]
    fn three_points_on_a_line() {
        // points at 0, 1, 3
        let d = array![[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]];
        let k = autotuned_kernel(d.view(), 1).unwrap();
        // nearest-other distances: 1, 1, 2
        let expect_sigma = array![
            [2.0 / 3.0, 1.0, 2.0],
            [1.0, 2.0 / 3.0, 5.0 / 3.0],
            [2.0, 5.0 / 3.0, 4.0 / 3.0]
        ];
        let expect_w = array![
            [1.0, (-0.5f64).exp(), (-9.0f64 / 8.0).exp()],
            [(-0.5f64).exp(), 1.0, (-18.0f64 / 25.0).exp()],
            [(-9.0f64 / 8.0).exp(), (-18.0f64 / 25.0).exp(), 1.0]
        ];
        for (a, b) in k.sigma.iter().zip(&expect_sigma) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in k.w.iter().zip(&expect_w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dist(25, &mut rng);
        let k = autotuned_kernel(d.view(), 5).unwrap();
        for i in 0..25 {
            assert_eq!(k.w[[i, i]], 1.0);
            for j in 0..25 {
                assert!((k.w[[i, j]] - k.w[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_input_validation() {
        assert!(matches!(
            autotuned_kernel(Array2::zeros((2, 3)).view(), 1),
            Err(Error::NonSquare(2, 3))
        ));
        let d = array![[0.0, -1.0], [-1.0, 0.0]];
        assert!(matches!(
            autotuned_kernel(d.view(), 1),
            Err(Error::NegativeDistance { .. })
        ));
    }

    #[test]
    fn two_node_transition() {
        let k = Kernel {
            w: array![[1.0, 0.3], [0.3, 1.0]],
            sigma: Array2::ones((2, 2)),
            knn_k: 1,
        };
        assert_eq!(full_transition(&k).matrix, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn isolated_rows_become_self_loops() {
        let k = Kernel {
            w: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.4], [0.0, 0.4, 1.0]],
            sigma: Array2::ones((3, 3)),
            knn_k: 2,
        };
        let p = full_transition(&k);
        assert_eq!(p.isolated, vec![0]);
        assert_eq!(p.matrix.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        let s = knn_transition(&k, 2);
        assert_eq!(s.isolated, vec![0]);
        assert_eq!(s.row(0), &[(0, 1.0)]);
    }

    #[test]
    fn knn_support_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let w = {
                let x = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.01..1.0));
                let mut w = &x + &x.t();
                w.diag_mut().fill(2.0);
                w
            };
            let k = Kernel {
                w: w.clone(),
                sigma: Array2::ones((5, 5)),
                knn_k: 2,
            };
            let s = knn_transition(&k, 2);
            for i in 0..5 {
                // the 2 nearest by affinity: itself plus its strongest neighbor
                let best_other = (0..5)
                    .filter(|&j| j != i)
                    .max_by(|&a, &b| w[[i, a]].total_cmp(&w[[i, b]]))
                    .unwrap();
                let mut expect = vec![i, best_other];
                expect.sort();
                let support: Vec<usize> = s.row(i).iter().map(|&(j, _)| j).collect();
                assert_eq!(support, expect);
                let total: f64 = s.row(i).iter().map(|&(_, v)| v).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_iterations_returns_the_common_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = autotuned_kernel(random_dist(8, &mut rng).view(), 3).unwrap();
        let fused = cross_diffuse(&[k.clone(), k.clone()], 3, 0).unwrap();
        assert_eq!(fused.p_hat, full_transition(&k).matrix);
    }

    #[test]
    fn identity_truncation_swaps_networks() {
        // k = 1 keeps only the self affinity, so S = I and each P takes the other's value
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k1 = autotuned_kernel(random_dist(6, &mut rng).view(), 2).unwrap();
        let k2 = autotuned_kernel(random_dist(6, &mut rng).view(), 2).unwrap();
        let (p1, p2) = (full_transition(&k1).matrix, full_transition(&k2).matrix);
        let mut prev_hat = None;
        for t in 0..5 {
            let fused = cross_diffuse(&[k1.clone(), k2.clone()], 1, t).unwrap();
            let (a, b) = if t % 2 == 0 { (&p1, &p2) } else { (&p2, &p1) };
            for (x, y) in fused.per_network[0].iter().zip(a) {
                assert!((x - y).abs() < 1e-15);
            }
            for (x, y) in fused.per_network[1].iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
            if let Some(prev) = prev_hat.replace(fused.p_hat.clone()) {
                for (x, y) in prev.iter().zip(&fused.p_hat) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn diffusion_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let d1 = random_dist(n, &mut rng);
        let d2 = random_dist(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = cross_diffuse(
            &[
                autotuned_kernel(d1.view(), 4).unwrap(),
                autotuned_kernel(d2.view(), 4).unwrap(),
            ],
            4,
            5,
        )
        .unwrap();
        let permuted = cross_diffuse(
            &[
                autotuned_kernel(permute(&d1, &perm).view(), 4).unwrap(),
                autotuned_kernel(permute(&d2, &perm).view(), 4).unwrap(),
            ],
            4,
            5,
        )
        .unwrap();
        let expect = permute(&base.p_hat, &perm);
        for (a, b) in permuted.p_hat.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diffusion_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = autotuned_kernel(random_dist(5, &mut rng).view(), 2).unwrap();
        assert!(matches!(
            cross_diffuse(std::slice::from_ref(&k), 2, 1),
            Err(Error::TooFewNetworks(1))
        ));
        let other = autotuned_kernel(random_dist(6, &mut rng).view(), 2).unwrap();
        assert!(matches!(
            cross_diffuse(&[k, other], 2, 1),
            Err(Error::DimensionMismatch(_))
        ));
    }

    fn clustered_dist(clusters: usize, size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let centers = points(clusters, 3, rng);
        let p = Array2::from_shape_fn((clusters * size, 3), |(i, d)| {
            centers[[i / size, d]] + 0.05 * rng.random_range(-1.0..1.0)
        });
        cross_dist(&p, &p)
    }

    #[test]
    fn redundant_evidence_keeps_row_argmax_stable() {
        // tight pairs: every point has one unambiguous partner
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let k = autotuned_kernel(clustered_dist(8, 2, &mut rng).view(), 2).unwrap();
            let argmax = |p: &Array2<f64>| -> Vec<usize> {
                p.rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| {
                        (0..r.len())
                            .filter(|&j| j != i)
                            .max_by(|&a, &b| r[a].total_cmp(&r[b]))
                            .unwrap()
                    })
                    .collect()
            };
            let first = argmax(&cross_diffuse(&[k.clone(), k.clone()], 2, 1).unwrap().p_hat);
            for t in 2..=20 {
                let p = cross_diffuse(&[k.clone(), k.clone()], 2, t).unwrap().p_hat;
                assert_eq!(argmax(&p), first, "seed {seed} t {t}");
            }
        }
    }

    #[test]
    fn parent_kernel_quadrants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = points(6, 2, &mut rng);
        let ssm = cross_dist(&a, &a);
        let parent = build_parent_kernel(ssm.view(), ssm.view(), ssm.view(), 0.3, 2).unwrap();
        let w = &parent.kernel.w;
        let q = |r: usize, c: usize| w.slice(s![r * 6..r * 6 + 6, c * 6..c * 6 + 6]).to_owned();
        assert_eq!(q(0, 0), q(1, 1));
        assert_eq!(q(0, 1), q(1, 0));
        assert_eq!(q(0, 1), q(0, 1).t());
        for i in 0..12 {
            for j in 0..12 {
                assert!((w[[i, j]] - w[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parent_kernel_hand_computed_scales() {
        // song A: points 0, 1, 3; song B: points 0.5, 4, 4.5 (on a line)
        let a = [0.0, 1.0, 3.0];
        let b = [0.5, 4.0, 4.5];
        let d = |x: &[f64], y: &[f64]| Array2::from_shape_fn((x.len(), y.len()), |(i, j)| (x[i] - y[j]).abs());
        let parent = build_parent_kernel(d(&a, &a).view(), d(&b, &b).view(), d(&a, &b).view(), 0.34, 1).unwrap();
        let sig = &parent.kernel.sigma;
        // A: nearest-other distances 1, 1, 2
        assert!((sig[[0, 2]] - (1.0 + 2.0 + 3.0) / 3.0).abs() < 1e-15);
        // B: nearest-other distances 3.5, 0.5, 0.5
        assert!((sig[[3, 4]] - (3.5 + 0.5 + 3.5) / 3.0).abs() < 1e-15);
        // cross, ceil(0.34 * 3) = 2 neighbors: row means of CSM rows, column means of CSM columns
        // CSM = [[0.5, 4, 4.5], [0.5, 3, 3.5], [2.5, 1, 1.5]]
        let row = [(0.5 + 4.0) / 2.0, (0.5 + 3.0) / 2.0, (1.0 + 1.5) / 2.0];
        let col = [(0.5 + 0.5) / 2.0, (1.0 + 3.0) / 2.0, (1.5 + 3.5) / 2.0];
        let csm = d(&a, &b);
        for i in 0..3 {
            for j in 0..3 {
                let expect = (row[i] + col[j] + csm[[i, j]]) / 3.0;
                assert!((sig[[i, 3 + j]] - expect).abs() < 1e-15);
                assert_eq!(sig[[3 + j, i]], sig[[i, 3 + j]]);
            }
        }
    }

    #[test]
    fn parent_kernel_swap_conjugates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pa, pb) = (points(5, 3, &mut rng), points(7, 3, &mut rng));
        let (da, db, c) = (cross_dist(&pa, &pa), cross_dist(&pb, &pb), cross_dist(&pa, &pb));
        let ab = build_parent_kernel(da.view(), db.view(), c.view(), 0.3, 2).unwrap();
        let ba = build_parent_kernel(db.view(), da.view(), c.t(), 0.3, 2).unwrap();
        // block swap: B's indices first
        let perm: Vec<usize> = (5..12).chain(0..5).collect();
        assert_eq!(permute(&ab.kernel.w, &perm), ba.kernel.w);
    }

    #[test]
    fn parent_kernel_dimension_check() {
        let z = Array2::zeros((3, 3));
        let bad = Array2::zeros((3, 4));
        assert!(matches!(
            build_parent_kernel(z.view(), z.view(), bad.view(), 0.1, 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    fn spearman(x: &[f64], y: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                for &k in &idx[i..=j] {
                    r[k] = (i + j) as f64 / 2.0;
                }
                i = j + 1;
            }
            r
        }
        let (rx, ry) = (ranks(x), ranks(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn early_fusion_of_identical_channels_tracks_the_kernel() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (pa, pb) = (points(20, 2, &mut rng), points(20, 2, &mut rng));
            let (da, db, c) = (cross_dist(&pa, &pa), cross_dist(&pb, &pb), cross_dist(&pa, &pb));
            let ch = PairDistances {
                ssm_a: da.view(),
                ssm_b: db.view(),
                csm: c.view(),
            };
            // local neighborhoods; a neighborhood spanning a whole song smooths ranks away
            let fused = early_fuse_pair(&[ch, ch], 0.1, 2, 1).unwrap();
            let single = build_parent_kernel(da.view(), db.view(), c.view(), 0.1, 2).unwrap();
            let x: Vec<f64> = fused.cross_probability.iter().copied().collect();
            let y: Vec<f64> = single.cross_block().iter().copied().collect();
            let rho = spearman(&x, &y);
            assert!(rho > 0.9, "seed {seed}: spearman {rho}");
        }
    }

    #[test]
    fn early_fusion_ignores_channel_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mats: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)> = (0..3)
            .map(|_| {
                let (pa, pb) = (points(9, 3, &mut rng), points(11, 3, &mut rng));
                (cross_dist(&pa, &pa), cross_dist(&pb, &pb), cross_dist(&pa, &pb))
            })
            .collect();
        let ch: Vec<PairDistances> = mats
            .iter()
            .map(|(a, b, c)| PairDistances {
                ssm_a: a.view(),
                ssm_b: b.view(),
                csm: c.view(),
            })
            .collect();
        let one = early_fuse_pair(&[ch[0], ch[1], ch[2]], 0.2, 5, 3).unwrap();
        let two = early_fuse_pair(&[ch[2], ch[0], ch[1]], 0.2, 5, 3).unwrap();
        assert_eq!(one.cross_probability, two.cross_probability);
        assert_eq!(one.binary, two.binary);
    }

    fn random_scores(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let x = Array2::from_shape_fn((n, n), |_| rng.random_range(0.5..10.0));
        let mut s = &x + &x.t();
        s.diag_mut().fill(0.0);
        s
    }

    #[test]
    fn late_fusion_keeps_a_dominant_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = random_scores(15, &mut rng);
        s[[3, 9]] = 500.0;
        s[[9, 3]] = 500.0;
        let fused = late_fuse_scores(&[s.view(), s.view()], 5, 20).unwrap();
        let row = fused.row(3);
        let best = (0..15)
            .filter(|&j| j != 3)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        assert_eq!(best, 9);
    }

    #[test]
    fn late_fusion_ignores_global_scale() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (a, b) = (random_scores(12, &mut rng), random_scores(12, &mut rng));
            let argmax = |p: &Array2<f64>| -> Vec<usize> {
                (0..12)
                    .map(|i| {
                        (0..12)
                            .filter(|&j| j != i)
                            .max_by(|&x, &y| p[[i, x]].total_cmp(&p[[i, y]]))
                            .unwrap()
                    })
                    .collect()
            };
            let base = late_fuse_scores(&[a.view(), b.view()], 4, 20).unwrap();
            let scaled = late_fuse_scores(&[(&a * 7.5).view(), (&b * 7.5).view()], 4, 20).unwrap();
            assert_eq!(argmax(&base), argmax(&scaled), "seed {seed}");
        }
    }

    #[test]
    fn late_fusion_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (random_scores(10, &mut rng), random_scores(10, &mut rng));
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng);
        let base = late_fuse_scores(&[a.view(), b.view()], 3, 20).unwrap();
        let permuted = late_fuse_scores(&[permute(&a, &perm).view(), permute(&b, &perm).view()], 3, 20).unwrap();
        for (x, y) in permute(&base, &perm).iter().zip(&permuted) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn late_fusion_needs_two_networks() {
        let s = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            late_fuse_scores(&[s.view()], 2, 1),
            Err(Error::TooFewNetworks(1))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn transitions_are_row_stochastic(seed in any::<u64>(), n in 2usize..20, k in 1usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = k.min(n);
                let kernel = autotuned_kernel(random_dist(n, &mut rng).view(), k).unwrap();
                for i in 0..n {
                    prop_assert_eq!(kernel.w[[i, i]], 1.0);
                    for j in 0..n {
                        prop_assert!((kernel.w[[i, j]] - kernel.w[[j, i]]).abs() <= 1e-12);
                    }
                }
                let p = full_transition(&kernel).matrix;
                let s = knn_transition(&kernel, k);
                for i in 0..n {
                    prop_assert!((p.row(i).sum() - 1.0).abs() <= 1e-12);
                    prop_assert_eq!(p[[i, i]], 0.5);
                    let row = s.row(i);
                    prop_assert!((row.iter().map(|&(_, v)| v).sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(row.len() >= k.min(n));
                }
            }

            #[test]
            fn diffusion_stays_row_stochastic(seed in any::<u64>(), n in 2usize..16, k in 1usize..8, t in 0usize..30) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = k.min(n);
                let kernels: Vec<Kernel> = (0..3).map(|_| autotuned_kernel(random_dist(n, &mut rng).view(), k).unwrap()).collect();
                let fused = cross_diffuse(&kernels, k, t).unwrap();
                for row in fused.p_hat.rows() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
