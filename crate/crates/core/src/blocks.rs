//! Beat-synchronous block features.
//!
//! A block covers `beats_per_block` consecutive beat intervals. Three
//! channels are built on the same beat grid, so block `i` of every channel
//! starts at the same beat:
//!
//! * MFCC: frames inside the block resampled to a fixed row count, Z-normalized, flattened.
//! * MFCC SSM: the Euclidean self-similarity of that normalized block, resized to `d x d`.
//! * HPCP: two averaged HPCP vectors per beat, stacked (a delay embedding).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BeatTrack, FeatureMatrix, PITCH_CLASSES};

const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Mfcc,
    MfccSsm,
    Hpcp,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Mfcc, Channel::MfccSsm, Channel::Hpcp];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Mfcc => "mfcc",
            Channel::MfccSsm => "ssm",
            Channel::Hpcp => "hpcp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// Cosine distance after rolling by the optimal transposition index.
    CosineOti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub beats_per_block: usize,
    /// Rows each MFCC block is resampled to.
    pub frames_per_block: usize,
    /// Side length of the resized SSM image.
    pub ssm_dim: usize,
    pub hpcp_windows_per_beat: usize,
    /// Beats between the starts of consecutive blocks.
    pub stride: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            beats_per_block: 20,
            frames_per_block: 400,
            ssm_dim: 32,
            hpcp_windows_per_beat: 2,
            stride: 1,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beats_per_block < 2 || self.frames_per_block < 2 || self.ssm_dim < 4 || self.stride == 0 {
            return Err(Error::InvalidParameter(format!("bad block config {self:?}")));
        }
        if self.hpcp_windows_per_beat != 2 {
            return Err(Error::InvalidParameter(
                "HPCP blocks use exactly two windows per beat".into(),
            ));
        }
        Ok(())
    }

    /// Number of blocks for a track with `n_onsets` beat onsets.
    pub fn block_count(&self, n_onsets: usize) -> usize {
        let intervals = n_onsets.saturating_sub(1);
        if intervals < self.beats_per_block {
            0
        } else {
            (intervals - self.beats_per_block) / self.stride + 1
        }
    }

    fn check_beats(&self, beats: &BeatTrack) -> Result<()> {
        if beats.onsets.len() < self.beats_per_block + 1 {
            return Err(Error::TooFewBeats {
                onsets: beats.onsets.len(),
                needed: self.beats_per_block + 1,
            });
        }
        Ok(())
    }
}

/// One song's blocks for one channel; row `i` is block `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    pub blocks: Array2<f64>,
    pub channel: Channel,
    pub metric: Metric,
    /// First beat of each block.
    pub beat_index_of_block: Vec<usize>,
    /// Mean HPCP over the whole song (HPCP channel only).
    pub mean_hpcp: Option<[f64; PITCH_CLASSES]>,
}

impl BlockSet {
    pub fn len(&self) -> usize {
        self.blocks.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.nrows() == 0
    }

    pub fn block_len(&self) -> usize {
        self.blocks.ncols()
    }
}

/// Column-wise Z-normalization with population standard deviation.
/// Columns whose deviation is below `1e-12` become zero.
pub fn znormalize_block(block: ArrayView2<f64>) -> Result<Array2<f64>> {
    let t = block.nrows();
    if t < 2 {
        return Err(Error::DegenerateBlock(format!("{t} frames, need at least 2")));
    }
    let mut out = block.to_owned();
    for mut col in out.columns_mut() {
        let mean = col.sum() / t as f64;
        col.mapv_inplace(|v| v - mean);
        let std = (col.iter().map(|v| v * v).sum::<f64>() / t as f64).sqrt();
        if std < MIN_STD {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| v / std);
        }
    }
    Ok(out)
}

/// Linear resampling along rows to `rows` rows; endpoints are kept.
fn resample_rows(x: ArrayView2<f64>, rows: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros((rows, x.ncols()));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        if n == 1 {
            row.assign(&x.row(0));
            continue;
        }
        let pos = r as f64 * (n - 1) as f64 / (rows - 1) as f64;
        let i0 = (pos.floor() as usize).min(n - 2);
        let frac = pos - i0 as f64;
        for (o, (a, b)) in row.iter_mut().zip(x.row(i0).iter().zip(x.row(i0 + 1))) {
            *o = a + frac * (b - a);
        }
    }
    out
}

/// Frame range `[start, end)` of frames timed inside `[t0, t1)`, never empty.
fn frame_span(features: &FeatureMatrix, t0: f64, t1: f64) -> (usize, usize) {
    let last = features.n_frames() - 1;
    let start = features.first_frame_at_or_after(t0).min(last);
    let end = features.first_frame_at_or_after(t1).min(features.n_frames());
    if end > start {
        (start, end)
    } else {
        (start, start + 1)
    }
}

/// Normalized per-block MFCC matrices (`frames_per_block x n_coeffs`), one per block.
pub fn mfcc_block_matrices(mfcc: &FeatureMatrix, beats: &BeatTrack, cfg: &BlockConfig) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    cfg.check_beats(beats)?;
    if mfcc.n_frames() == 0 {
        return Err(Error::DegenerateBlock("empty MFCC matrix".into()));
    }
    let b = cfg.beats_per_block;
    (0..cfg.block_count(beats.onsets.len()))
        .map(|k| {
            let i = k * cfg.stride;
            let (start, end) = frame_span(mfcc, beats.onsets[i], beats.onsets[i + b]);
            let resampled = resample_rows(mfcc.frames.slice(ndarray::s![start..end, ..]), cfg.frames_per_block);
            znormalize_block(resampled.view())
        })
        .collect()
}

fn stack_rows(rows: Vec<Vec<f64>>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, width), flat).expect("rows share a width")
}

fn block_starts(cfg: &BlockConfig, n_onsets: usize) -> Vec<usize> {
    (0..cfg.block_count(n_onsets)).map(|k| k * cfg.stride).collect()
}

/// MFCC channel: every normalized block flattened row-major.
pub fn build_mfcc_blocks(mfcc: &FeatureMatrix, beats: &BeatTrack, cfg: &BlockConfig) -> Result<BlockSet> {
    let mats = mfcc_block_matrices(mfcc, beats, cfg)?;
    Ok(mfcc_blockset(&mats, cfg, beats.onsets.len(), mfcc.n_features()))
}

fn mfcc_blockset(mats: &[Array2<f64>], cfg: &BlockConfig, n_onsets: usize, n_coeffs: usize) -> BlockSet {
    let width = cfg.frames_per_block * n_coeffs;
    let rows = mats.iter().map(|m| m.iter().copied().collect()).collect();
    BlockSet {
        blocks: stack_rows(rows, width),
        channel: Channel::Mfcc,
        metric: Metric::Euclidean,
        beat_index_of_block: block_starts(cfg, n_onsets),
        mean_hpcp: None,
    }
}

/// Euclidean distances between all rows of `x`.
pub fn self_distance(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = crate::csm::euclidean(
                x.row(i).as_slice().expect("contiguous rows"),
                x.row(j).as_slice().expect("contiguous rows"),
            );
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Bilinear resize of a square image to `dim x dim` (corner-aligned).
pub fn resize_bilinear(img: ArrayView2<f64>, dim: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let coord = |k: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let pos = k as f64 * (n - 1) as f64 / (dim - 1) as f64;
        let i0 = (pos.floor() as usize).min(n - 2);
        (i0, i0 + 1, pos - i0 as f64)
    };
    Array2::from_shape_fn((dim, dim), |(r, c)| {
        let (r0, r1, fr) = coord(r, h);
        let (c0, c1, fc) = coord(c, w);
        let top = img[[r0, c0]] + fc * (img[[r0, c1]] - img[[r0, c0]]);
        let bottom = img[[r1, c0]] + fc * (img[[r1, c1]] - img[[r1, c0]]);
        top + fr * (bottom - top)
    })
}

/// MFCC-SSM channel from per-block MFCC matrices. Blocks are (re)normalized
/// first, so any per-column affine change of the input leaves the result
/// unchanged.
pub fn build_ssm_blocks(blocks: &[Array2<f64>], cfg: &BlockConfig) -> Result<BlockSet> {
    cfg.validate()?;
    let d = cfg.ssm_dim;
    let rows = blocks
        .iter()
        .map(|b| {
            let z = znormalize_block(b.view())?;
            let ssm = self_distance(z.view());
            Ok(resize_bilinear(ssm.view(), d).into_iter().collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(BlockSet {
        blocks: stack_rows(rows, d * d),
        channel: Channel::MfccSsm,
        metric: Metric::Euclidean,
        beat_index_of_block: (0..blocks.len()).map(|k| k * cfg.stride).collect(),
        mean_hpcp: None,
    })
}

/// Both MFCC channels for one beat track, sharing the normalized blocks.
pub fn build_mfcc_and_ssm_blocks(
    mfcc: &FeatureMatrix,
    beats: &BeatTrack,
    cfg: &BlockConfig,
) -> Result<(BlockSet, BlockSet)> {
    let mats = mfcc_block_matrices(mfcc, beats, cfg)?;
    let mfcc_set = mfcc_blockset(&mats, cfg, beats.onsets.len(), mfcc.n_features());
    let ssm_set = build_ssm_blocks(&mats, cfg)?;
    Ok((mfcc_set, ssm_set))
}

/// HPCP channel: each beat split at its midpoint, HPCP frames averaged per
/// half, and `2 * beats_per_block` half-beat vectors stacked per block.
pub fn build_hpcp_blocks(hpcp: &FeatureMatrix, beats: &BeatTrack, cfg: &BlockConfig) -> Result<BlockSet> {
    cfg.validate()?;
    cfg.check_beats(beats)?;
    if hpcp.n_features() != PITCH_CLASSES {
        return Err(Error::DimensionMismatch(format!(
            "HPCP frames have {} bins",
            hpcp.n_features()
        )));
    }
    if hpcp.n_frames() == 0 {
        return Err(Error::DegenerateBlock("empty HPCP matrix".into()));
    }
    let halves: Vec<[f64; PITCH_CLASSES]> = beats
        .onsets
        .windows(2)
        .flat_map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            [(w[0], mid), (mid, w[1])]
        })
        .map(|(t0, t1)| average_frames(hpcp, t0, t1))
        .collect();
    let b = cfg.beats_per_block;
    let width = 2 * b * PITCH_CLASSES;
    let starts = block_starts(cfg, beats.onsets.len());
    let rows = starts
        .iter()
        .map(|&i| halves[2 * i..2 * (i + b)].iter().flatten().copied().collect())
        .collect();
    let mut mean = [0.0; PITCH_CLASSES];
    for row in hpcp.frames.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= hpcp.n_frames() as f64);
    Ok(BlockSet {
        blocks: stack_rows(rows, width),
        channel: Channel::Hpcp,
        metric: Metric::CosineOti,
        beat_index_of_block: starts,
        mean_hpcp: Some(mean),
    })
}

/// Mean of frames timed in `[t0, t1)`; the frame nearest the window
/// center when none fall inside.
fn average_frames(hpcp: &FeatureMatrix, t0: f64, t1: f64) -> [f64; PITCH_CLASSES] {
    let start = hpcp.first_frame_at_or_after(t0);
    let end = hpcp.first_frame_at_or_after(t1).min(hpcp.n_frames());
    let mut out = [0.0; PITCH_CLASSES];
    if end > start {
        for row in hpcp.frames.slice(ndarray::s![start..end, ..]).rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= (end - start) as f64);
    } else {
        let center = 0.5 * (t0 + t1) * hpcp.sample_rate as f64 / hpcp.hop as f64;
        let nearest = (center.round().max(0.0) as usize).min(hpcp.n_frames() - 1);
        for (o, v) in out.iter_mut().zip(hpcp.frames.row(nearest)) {
            *o = *v;
        }
    }
    out
}
