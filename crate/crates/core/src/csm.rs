//! Cross-similarity between two songs' block sets.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSet, Metric};
use crate::error::{Error, Result};
use crate::features::PITCH_CLASSES;

/// `‖a − b‖₂` with a fixed, vectorizable summation order.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    let sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
    sum.sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Cosine distance `1 − cos(a, b)`; 1 when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let norm = (dot(a, a) * dot(b, b)).sqrt();
    if norm == 0.0 {
        return 1.0;
    }
    (1.0 - dot(a, b) / norm).clamp(0.0, 2.0)
}

/// Relative squared distance below which the Gram-matrix form is recomputed exactly.
const REFINE_BELOW: f64 = 1e-6;

fn squared_norms(x: &Array2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| {
            let r = r.as_slice().expect("contiguous");
            dot(r, r)
        })
        .collect()
}

/// Circular shift with the `numpy.roll` convention: `out[i] = v[(i − shift) mod n]`.
pub fn roll(v: &[f64], shift: usize) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| v[(i + n - shift % n) % n]).collect()
}

/// Optimal transposition index between two mean profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Oti {
    /// Roll applied to song B's pitch classes to line them up with song A.
    pub shift: usize,
    /// Either profile was all zero; `shift` is 0 and meaningless.
    pub degenerate: bool,
}

/// The roll `s` of `mean_b` maximizing its dot product with `mean_a`;
/// ties go to the smallest `s`.
pub fn estimate_oti(mean_a: &[f64; PITCH_CLASSES], mean_b: &[f64; PITCH_CLASSES]) -> Oti {
    let zero = |v: &[f64; PITCH_CLASSES]| v.iter().all(|&x| x == 0.0);
    if zero(mean_a) || zero(mean_b) {
        log::warn!("zero pitch profile, using transposition 0");
        return Oti {
            shift: 0,
            degenerate: true,
        };
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for s in 0..PITCH_CLASSES {
        let rolled = roll(mean_b, s);
        let corr: f64 = mean_a.iter().zip(&rolled).map(|(a, b)| a * b).sum();
        if corr > best.0 {
            best = (corr, s);
        }
    }
    Oti {
        shift: best.1,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossSimilarityMatrix {
    /// Distances, rows index song A's blocks.
    pub values: Array2<f64>,
    pub metric: Metric,
    pub oti: Option<Oti>,
}

/// Rolls every 12-bin chunk of every block by `shift`.
fn roll_chunks(blocks: &Array2<f64>, shift: usize) -> Array2<f64> {
    let mut out = blocks.clone();
    for (src, mut dst) in blocks.rows().into_iter().zip(out.rows_mut()) {
        let src = src.as_slice().expect("contiguous");
        let dst = dst.as_slice_mut().expect("contiguous");
        for (s, d) in src.chunks(PITCH_CLASSES).zip(dst.chunks_mut(PITCH_CLASSES)) {
            d.copy_from_slice(&roll(s, shift));
        }
    }
    out
}

/// Pairwise block distances between two songs for one channel.
pub fn compute_csm(a: &BlockSet, b: &BlockSet) -> Result<CrossSimilarityMatrix> {
    if a.channel != b.channel || a.metric != b.metric {
        return Err(Error::ChannelMismatch(
            format!("{:?}/{:?}", a.channel, a.metric),
            format!("{:?}/{:?}", b.channel, b.metric),
        ));
    }
    if a.block_len() != b.block_len() {
        return Err(Error::LengthMismatch(a.block_len(), b.block_len()));
    }
    let (m, n) = (a.len(), b.len());
    match a.metric {
        Metric::Euclidean => {
            // ‖a‖² + ‖b‖² − 2a·b through one matrix product; near-coincident
            // pairs lose too much to cancellation and are recomputed directly
            let gram = a.blocks.dot(&b.blocks.t());
            let (na, nb) = (squared_norms(&a.blocks), squared_norms(&b.blocks));
            let values = Array2::from_shape_fn((m, n), |(i, j)| {
                let scale = na[i] + nb[j];
                let d2 = scale - 2.0 * gram[[i, j]];
                if d2 > REFINE_BELOW * scale {
                    d2.sqrt()
                } else {
                    euclidean(
                        a.blocks.row(i).as_slice().expect("contiguous"),
                        b.blocks.row(j).as_slice().expect("contiguous"),
                    )
                }
            });
            Ok(CrossSimilarityMatrix {
                values,
                metric: Metric::Euclidean,
                oti: None,
            })
        }
        Metric::CosineOti => {
            if !a.block_len().is_multiple_of(PITCH_CLASSES) {
                return Err(Error::DimensionMismatch(format!(
                    "HPCP block length {} is not a multiple of 12",
                    a.block_len()
                )));
            }
            let (Some(mean_a), Some(mean_b)) = (a.mean_hpcp, b.mean_hpcp) else {
                return Err(Error::DimensionMismatch("HPCP block set without a mean profile".into()));
            };
            let oti = estimate_oti(&mean_a, &mean_b);
            let rolled = roll_chunks(&b.blocks, oti.shift);
            let gram = a.blocks.dot(&rolled.t());
            let (na, nb) = (squared_norms(&a.blocks), squared_norms(&rolled));
            let values = Array2::from_shape_fn((m, n), |(i, j)| {
                let norm = (na[i] * nb[j]).sqrt();
                if norm == 0.0 {
                    1.0
                } else {
                    (1.0 - gram[[i, j]] / norm).clamp(0.0, 2.0)
                }
            });
            Ok(CrossSimilarityMatrix {
                values,
                metric: Metric::CosineOti,
                oti: Some(oti),
            })
        }
    }
}

/// Which end of each row/column counts as "nearest".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Distances: nearest = smallest.
    Smallest,
    /// Similarities or probabilities: nearest = largest.
    Largest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCsm {
    pub mask: Array2<bool>,
    pub kappa: f64,
}

impl BinaryCsm {
    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// `⌈κ·n⌉` clamped to `1..=n`, tolerant of `κ·n` landing a hair above an integer.
pub fn neighbor_count(kappa: f64, n: usize) -> usize {
    let raw = (kappa * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Value of the `k`-th nearest entry (1-based) of `values` under `dir`.
fn kth_threshold(values: &mut [f64], k: usize, dir: Direction) -> f64 {
    values.sort_by(|a, b| match dir {
        Direction::Smallest => a.total_cmp(b),
        Direction::Largest => b.total_cmp(a),
    });
    values[k - 1]
}

fn within(v: f64, threshold: f64, dir: Direction) -> bool {
    match dir {
        Direction::Smallest => v <= threshold,
        Direction::Largest => v >= threshold,
    }
}

/// Mutual nearest-neighbor binarization: an entry survives when it is among
/// the `⌈κN⌉` nearest of its row and the `⌈κM⌉` nearest of its column.
/// Entries tied with the cutoff value are kept.
pub fn binarize_mutual_knn(values: ArrayView2<f64>, kappa: f64, dir: Direction) -> Result<BinaryCsm> {
    let (m, n) = values.dim();
    if m == 0 || n == 0 {
        return Err(Error::EmptyCsm);
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa must lie in (0, 1), got {kappa}"
        )));
    }
    let (k_row, k_col) = (neighbor_count(kappa, n), neighbor_count(kappa, m));
    let row_thr: Vec<f64> = values
        .rows()
        .into_iter()
        .map(|r| kth_threshold(&mut r.to_vec(), k_row, dir))
        .collect();
    let col_thr: Vec<f64> = values
        .columns()
        .into_iter()
        .map(|c| kth_threshold(&mut c.to_vec(), k_col, dir))
        .collect();
    let mask = Array2::from_shape_fn((m, n), |(i, j)| {
        let v = values[[i, j]];
        within(v, row_thr[i], dir) && within(v, col_thr[j], dir)
    });
    Ok(BinaryCsm { mask, kappa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Channel;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn euclid_set(blocks: Array2<f64>) -> BlockSet {
        let n = blocks.nrows();
        BlockSet {
            blocks,
            channel: Channel::Mfcc,
            metric: Metric::Euclidean,
            beat_index_of_block: (0..n).collect(),
            mean_hpcp: None,
        }
    }

    fn hpcp_set(blocks: Array2<f64>) -> BlockSet {
        let n = blocks.nrows();
        let mut mean = [0.0; 12];
        for row in blocks.rows() {
            for (k, v) in row.iter().enumerate() {
                mean[k % 12] += v;
            }
        }
        BlockSet {
            blocks,
            channel: Channel::Hpcp,
            metric: Metric::CosineOti,
            beat_index_of_block: (0..n).collect(),
            mean_hpcp: Some(mean),
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn one_hot_roll_is_undone() {
        let mut a = [0.0; 12];
        a[2] = 1.0;
        for k in 0..12 {
            let b: [f64; 12] = roll(&a, k).try_into().unwrap();
            let oti = estimate_oti(&a, &b);
            assert_eq!(oti.shift, (12 - k) % 12);
            assert_eq!(roll(&roll(&a, k), oti.shift), a.to_vec());
        }
        assert_eq!(estimate_oti(&a, &a).shift, 0);
    }

    #[test]
    fn oti_matches_exhaustive_search() {
        let mut a = [0.0; 12];
        a[0] = 1.0;
        let mut b = [0.0; 12];
        b[1] = 0.5;
        b[11] = 0.9;
        // shift s puts b[(i - s) mod 12] at i; only i = 0 counts
        let corr: Vec<f64> = (0..12).map(|s| b[(12 - s) % 12]).collect();
        let expected = (0..12)
            .max_by(|&x, &y| corr[x].total_cmp(&corr[y]).then(y.cmp(&x)))
            .unwrap();
        assert_eq!(expected, 1);
        assert_eq!(estimate_oti(&a, &b).shift, expected);
    }

    #[test]
    fn zero_profile_is_flagged() {
        let oti = estimate_oti(&[0.0; 12], &[1.0; 12]);
        assert_eq!(
            oti,
            Oti {
                shift: 0,
                degenerate: true
            }
        );
    }

    #[test]
    fn self_csm_has_zero_diagonal_and_is_a_metric() {
        let a = euclid_set(random(15, 40, 1));
        let csm = compute_csm(&a, &a).unwrap();
        let d = &csm.values;
        for i in 0..15 {
            assert_eq!(d[[i, i]], 0.0);
            for j in 0..15 {
                assert_eq!(d[[i, j]], d[[j, i]]);
                for k in 0..15 {
                    assert!(d[[i, k]] <= d[[i, j]] + d[[j, k]] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn euclidean_csm_transposes() {
        let a = euclid_set(random(7, 33, 2));
        let b = euclid_set(random(9, 33, 3));
        let ab = compute_csm(&a, &b).unwrap().values;
        let ba = compute_csm(&b, &a).unwrap().values;
        assert_eq!(ab, ba.t());
    }

    #[test]
    fn transposed_hpcp_song_matches_self_comparison() {
        let a = hpcp_set(random(6, 48, 4));
        let reference = compute_csm(&a, &a).unwrap();
        for k in 0..12 {
            let b = hpcp_set(roll_chunks(&a.blocks, k));
            let csm = compute_csm(&a, &b).unwrap();
            assert_eq!(csm.oti.unwrap().shift, (12 - k) % 12);
            assert!(csm
                .values
                .iter()
                .zip(&reference.values)
                .all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn cosine_orthogonal_and_zero_norm() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[2.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn hpcp_csm_is_bounded() {
        let a = hpcp_set(random(5, 24, 5));
        let b = hpcp_set(random(8, 24, 6));
        let csm = compute_csm(&a, &b).unwrap();
        assert!(csm.values.iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = euclid_set(random(3, 24, 7));
        let b = hpcp_set(random(3, 24, 8));
        assert!(matches!(compute_csm(&a, &b), Err(Error::ChannelMismatch(..))));
        let c = euclid_set(random(3, 25, 9));
        assert!(matches!(compute_csm(&a, &c), Err(Error::LengthMismatch(24, 25))));
    }

    #[test]
    fn identity_like_csm_binarizes_to_identity() {
        let csm = Array2::from_shape_fn((10, 10), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let b = binarize_mutual_knn(csm.view(), 0.1, Direction::Smallest).unwrap();
        assert_eq!(b.mask, Array2::from_shape_fn((10, 10), |(i, j)| i == j));
    }

    #[test]
    fn ties_are_included() {
        let csm = Array2::from_elem((10, 10), 0.3);
        let b = binarize_mutual_knn(csm.view(), 0.1, Direction::Smallest).unwrap();
        assert!(b.mask.iter().all(|&x| x));
    }

    #[test]
    fn largest_direction_mirrors_smallest() {
        let csm = random(12, 9, 10);
        let small = binarize_mutual_knn(csm.view(), 0.2, Direction::Smallest).unwrap();
        let large = binarize_mutual_knn(csm.mapv(|v| -v).view(), 0.2, Direction::Largest).unwrap();
        assert_eq!(small.mask, large.mask);
    }

    #[test]
    fn neighbor_counts_round_up() {
        assert_eq!(neighbor_count(0.1, 10), 1);
        assert_eq!(neighbor_count(0.1, 30), 3);
        assert_eq!(neighbor_count(0.1, 31), 4);
        assert_eq!(neighbor_count(0.1, 3), 1);
        assert_eq!(neighbor_count(0.5, 1), 1);
    }

    #[test]
    fn empty_and_bad_kappa() {
        assert!(matches!(
            binarize_mutual_knn(Array2::<f64>::zeros((0, 3)).view(), 0.1, Direction::Smallest),
            Err(Error::EmptyCsm)
        ));
        assert!(binarize_mutual_knn(array![[1.0]].view(), 1.0, Direction::Smallest).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(max: usize) -> impl Strategy<Value = Array2<f64>> {
            (1..max, 1..max).prop_flat_map(|(m, n)| {
                proptest::collection::vec(0u8..12, m * n)
                    .prop_map(move |v| Array2::from_shape_vec((m, n), v.into_iter().map(f64::from).collect()).unwrap())
            })
        }

        proptest! {
            #[test]
            fn mutual_mask_lies_in_row_and_column_knn(csm in matrix(24), kappa in 0.02f64..0.6) {
                let (m, n) = csm.dim();
                let mask = binarize_mutual_knn(csm.view(), kappa, Direction::Smallest).unwrap().mask;
                let (kr, kc) = (neighbor_count(kappa, n), neighbor_count(kappa, m));
                for ((i, j), &on) in mask.indexed_iter() {
                    if on {
                        let v = csm[[i, j]];
                        prop_assert!(csm.row(i).iter().filter(|&&x| x < v).count() < kr);
                        prop_assert!(csm.column(j).iter().filter(|&&x| x < v).count() < kc);
                    }
                }
            }

            #[test]
            fn euclidean_csm_transposes_within_tolerance(seed in any::<u64>(), m in 1usize..12, n in 1usize..12, dim in 1usize..50) {
                let a = euclid_set(random(m, dim, seed));
                let b = euclid_set(random(n, dim, seed ^ 0x5eed));
                let ab = compute_csm(&a, &b).unwrap().values;
                let ba = compute_csm(&b, &a).unwrap().values;
                for (x, y) in ab.iter().zip(ba.t().iter()) {
                    prop_assert!((x - y).abs() <= 1e-9);
                    prop_assert!(*x >= 0.0 && x.is_finite());
                }
            }
        }
    }
}
