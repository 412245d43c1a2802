//! Frame-level audio features: MFCC, HPCP and beat onsets.
//!
//! All analyses use centered frames: frame `i` is centered on sample
//! `i * hop`, with zero padding past either end of the clip, so its time
//! stamp is simply `i * hop / sample_rate`.

mod beats;
mod hpcp;
mod mfcc;
pub(crate) mod spectral;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use beats::{onset_envelope, track_beats, track_beats_at_biases, BeatParams, BeatTrack, TEMPO_BIASES};
pub use hpcp::{compute_hpcp, pitch_class_name, HpcpParams, PITCH_CLASSES};
pub use mfcc::{compute_mfcc, mel_band_energies, MfccParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Hpcp,
    Onset,
}

/// A time-by-feature matrix with the framing it was computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Rows are frames.
    pub frames: Array2<f64>,
    pub hop: usize,
    pub window: usize,
    pub sample_rate: u32,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.frames.ncols()
    }

    /// Center time of frame `i`, in seconds.
    pub fn frame_time(&self, i: usize) -> f64 {
        (i * self.hop) as f64 / self.sample_rate as f64
    }

    /// Index of the first frame whose time is `>= t`.
    pub fn first_frame_at_or_after(&self, t: f64) -> usize {
        let x = t * self.sample_rate as f64 / self.hop as f64;
        let mut i = x.ceil().max(0.0) as usize;
        // guard against x landing just above an integer through rounding
        while i > 0 && self.frame_time(i - 1) >= t {
            i -= 1;
        }
        while self.frame_time(i) < t {
            i += 1;
        }
        i
    }
}
