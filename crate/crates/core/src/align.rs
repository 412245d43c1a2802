//! Diagonally constrained Smith-Waterman local alignment over a binary
//! cross-similarity matrix.
//!
//! A path may only advance by `(1,1)`, `(2,1)` or `(1,2)`. With `D` the
//! score table and predecessors outside the matrix reading 0:
//!
//! ```text
//! mask[i][j]:  D(i,j) = max(D(i-1,j-1), D(i-2,j-1), D(i-1,j-2)) + match
//! otherwise:   D(i,j) = max(0, D(i-1,j-1) - mismatch, D(i-2,j-1) - gap, D(i-1,j-2) - gap)
//! ```

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwParams {
    #[serde(rename = "match")]
    pub match_score: f64,
    pub mismatch_penalty: f64,
    pub gap_penalty: f64,
}

impl Default for SwParams {
    fn default() -> Self {
        Self {
            match_score: 1.0,
            mismatch_penalty: 1.0,
            gap_penalty: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub score: f64,
    pub argmax_cell: (usize, usize),
    /// Full DP table, kept only by [`smith_waterman_full`].
    pub table: Option<Array2<f64>>,
    /// Matched path from start to `argmax_cell`, kept only by [`smith_waterman_full`].
    pub path: Option<Vec<(usize, usize)>>,
}

/// Predecessor offsets in tie-break order.
const STEPS: [(usize, usize); 3] = [(1, 1), (2, 1), (1, 2)];

#[inline]
fn cell_value(mask: bool, preds: [Option<f64>; 3], params: &SwParams) -> f64 {
    let d = |k: usize| preds[k].unwrap_or(0.0);
    if mask {
        d(0).max(d(1)).max(d(2)) + params.match_score
    } else {
        0f64.max(d(0) - params.mismatch_penalty)
            .max(d(1) - params.gap_penalty)
            .max(d(2) - params.gap_penalty)
    }
}

fn check(mask: &ArrayView2<bool>) -> Result<()> {
    if mask.nrows() == 0 || mask.ncols() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Best local alignment score, using three rolling rows of the table.
pub fn smith_waterman(mask: ArrayView2<bool>, params: &SwParams) -> Result<AlignmentResult> {
    check(&mask)?;
    let n = mask.ncols();
    // rows[i % 3] holds row i
    let mut rows = vec![vec![0.0f64; n]; 3];
    let mut best = (0.0, (0, 0));
    for i in 0..mask.nrows() {
        for j in 0..n {
            let pred =
                |di: usize, dj: usize| -> Option<f64> { (i >= di && j >= dj).then(|| rows[(i - di) % 3][j - dj]) };
            let preds = [pred(1, 1), pred(2, 1), pred(1, 2)];
            let v = cell_value(mask[[i, j]], preds, params);
            rows[i % 3][j] = v;
            if v > best.0 {
                best = (v, (i, j));
            }
        }
    }
    Ok(AlignmentResult {
        score: best.0,
        argmax_cell: best.1,
        table: None,
        path: None,
    })
}

/// Same scores as [`smith_waterman`] plus the full table and a traceback.
pub fn smith_waterman_full(mask: ArrayView2<bool>, params: &SwParams) -> Result<AlignmentResult> {
    check(&mask)?;
    let (m, n) = mask.dim();
    let mut table = Array2::<f64>::zeros((m, n));
    let mut best = (0.0, (0, 0));
    for i in 0..m {
        for j in 0..n {
            let preds = STEPS.map(|(di, dj)| (i >= di && j >= dj).then(|| table[[i - di, j - dj]]));
            let v = cell_value(mask[[i, j]], preds, params);
            table[[i, j]] = v;
            if v > best.0 {
                best = (v, (i, j));
            }
        }
    }
    let path = if best.0 > 0.0 {
        traceback(&table, &mask, best.1, params)
    } else {
        Vec::new()
    };
    Ok(AlignmentResult {
        score: best.0,
        argmax_cell: best.1,
        table: Some(table),
        path: Some(path),
    })
}

fn traceback(
    table: &Array2<f64>,
    mask: &ArrayView2<bool>,
    end: (usize, usize),
    params: &SwParams,
) -> Vec<(usize, usize)> {
    let mut path = vec![end];
    let (mut i, mut j) = end;
    loop {
        let here = table[[i, j]];
        let next = STEPS.iter().find_map(|&(di, dj)| {
            if i < di || j < dj {
                return None;
            }
            let p = table[[i - di, j - dj]];
            let penalty = if mask[[i, j]] {
                -params.match_score
            } else if (di, dj) == (1, 1) {
                params.mismatch_penalty
            } else {
                params.gap_penalty
            };
            (p > 0.0 && p - penalty == here).then_some((i - di, j - dj))
        });
        match next {
            Some(cell) => {
                path.push(cell);
                (i, j) = cell;
            }
            None => break,
        }
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_scores_zero() {
        let mask = Array2::from_elem((6, 4), false);
        let r = smith_waterman(mask.view(), &SwParams::default()).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(matches!(
            smith_waterman(Array2::from_elem((0, 3), false).view(), &SwParams::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn main_diagonal_scores_its_length() {
        let mask = Array2::from_shape_fn((10, 10), |(i, j)| i == j);
        let r = smith_waterman_full(mask.view(), &SwParams::default()).unwrap();
        assert_eq!(r.score, 10.0);
        assert_eq!(r.argmax_cell, (9, 9));
        assert_eq!(r.path.unwrap(), (0..10).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn gaps_bridge_with_penalty() {
        // diagonal 0..4, a one-cell hole at 4, then continuing
        let mask = Array2::from_shape_fn((9, 9), |(i, j)| i == j && i != 4);
        let r = smith_waterman_full(mask.view(), &SwParams::default()).unwrap();
        // 4 matches, mismatch through the hole (-1), 4 more matches
        assert_eq!(r.score, 7.0);
        let path = r.path.unwrap();
        for w in path.windows(2) {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(STEPS.contains(&step));
        }
    }

    #[test]
    fn rolling_and_full_tables_agree() {
        let mask = Array2::from_shape_fn((13, 17), |(i, j)| (i * 7 + j * 3) % 5 == 0 || i == j);
        let a = smith_waterman(mask.view(), &SwParams::default()).unwrap();
        let b = smith_waterman_full(mask.view(), &SwParams::default()).unwrap();
        assert_eq!(a.score, b.score);
        assert_eq!(a.argmax_cell, b.argmax_cell);
        let table = b.table.unwrap();
        assert_eq!(table.iter().copied().fold(0.0, f64::max), b.score);
    }

    /// Best sum over every forward path that starts on a matched cell, where
    /// each later cell adds `match` or subtracts its step's penalty. Paths are
    /// cut once their running sum stops being positive, since a later start
    /// dominates them.
    fn path_oracle(mask: &Array2<bool>, params: &SwParams) -> f64 {
        fn walk(mask: &Array2<bool>, p: &SwParams, (i, j): (usize, usize), sum: f64, best: &mut f64) {
            *best = best.max(sum);
            for (di, dj) in STEPS {
                let (ni, nj) = (i + di, j + dj);
                if ni >= mask.nrows() || nj >= mask.ncols() {
                    continue;
                }
                let next = if mask[[ni, nj]] {
                    sum + p.match_score
                } else if (di, dj) == (1, 1) {
                    sum - p.mismatch_penalty
                } else {
                    sum - p.gap_penalty
                };
                if next > 0.0 {
                    walk(mask, p, (ni, nj), next, best);
                }
            }
        }
        let mut best = 0.0;
        for ((i, j), &on) in mask.indexed_iter() {
            if on {
                walk(mask, params, (i, j), params.match_score, &mut best);
            }
        }
        best
    }

    fn random_mask(rng: &mut rand_chacha::ChaCha8Rng, m: usize, n: usize, density: f64) -> Array2<bool> {
        use rand::Rng;
        Array2::from_shape_fn((m, n), |_| rng.random_bool(density))
    }

    #[test]
    fn matches_path_enumeration_oracle() {
        use rand::SeedableRng;
        let params = [
            SwParams::default(),
            SwParams {
                match_score: 1.0,
                mismatch_penalty: 0.3,
                gap_penalty: 0.2,
            },
        ];
        for seed in 0..240u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let density = [0.1, 0.25, 0.4][seed as usize % 3];
            let mask = random_mask(&mut rng, 12, 12, density);
            let p = &params[(seed / 3) as usize % 2];
            let dp = smith_waterman(mask.view(), p).unwrap().score;
            assert!((dp - path_oracle(&mask, p)).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn traceback_reproduces_the_score() {
        use rand::SeedableRng;
        let p = SwParams::default();
        for seed in 0..50u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + seed);
            let mask = random_mask(&mut rng, 15, 11, 0.3);
            let r = smith_waterman_full(mask.view(), &p).unwrap();
            let path = r.path.unwrap();
            if r.score == 0.0 {
                assert!(path.is_empty());
                continue;
            }
            assert!(mask[path[0]]);
            assert_eq!(*path.last().unwrap(), r.argmax_cell);
            let mut sum = p.match_score;
            for w in path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                assert!(STEPS.contains(&step));
                sum += if mask[w[1]] {
                    p.match_score
                } else if step == (1, 1) {
                    -p.mismatch_penalty
                } else {
                    -p.gap_penalty
                };
            }
            assert!((sum - r.score).abs() < 1e-12, "seed {seed}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask_strategy() -> impl Strategy<Value = Array2<bool>> {
            (1usize..14, 1usize..14).prop_flat_map(|(m, n)| {
                proptest::collection::vec(proptest::bool::weighted(0.3), m * n)
                    .prop_map(move |v| Array2::from_shape_vec((m, n), v).unwrap())
            })
        }

        proptest! {
            #[test]
            fn adding_a_match_never_lowers_the_score(mask in mask_strategy(), pick in any::<prop::sample::Index>()) {
                let p = SwParams::default();
                let base = smith_waterman(mask.view(), &p).unwrap().score;
                let mut more = mask.clone();
                let k = pick.index(mask.len());
                let cell = (k / mask.ncols(), k % mask.ncols());
                more[cell] = true;
                prop_assert!(smith_waterman(more.view(), &p).unwrap().score >= base);
            }

            #[test]
            fn transpose_and_padding_keep_the_score(mask in mask_strategy(), pad in 0usize..3) {
                let p = SwParams::default();
                let (m, n) = mask.dim();
                let score = smith_waterman(mask.view(), &p).unwrap().score;
                prop_assert_eq!(smith_waterman(mask.t(), &p).unwrap().score, score);
                let mut padded = Array2::from_elem((m + 2 * pad, n + pad), false);
                padded.slice_mut(ndarray::s![pad..pad + m, ..n]).assign(&mask);
                prop_assert_eq!(smith_waterman(padded.view(), &p).unwrap().score, score);
                prop_assert!(score >= 0.0 && score <= p.match_score * (m.min(n) * 2) as f64);
            }
        }
    }
}
