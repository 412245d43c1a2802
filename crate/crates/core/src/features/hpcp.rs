use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::spectral::{n_frames, Stft};
use super::{FeatureKind, FeatureMatrix};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const PITCH_CLASSES: usize = 12;

const NAMES: [&str; PITCH_CLASSES] = ["A", "A#", "B", "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#"];

/// Name of HPCP bin `bin`. Bin 0 is the pitch class of the reference
/// frequency (A for the default 440 Hz).
pub fn pitch_class_name(bin: usize) -> &'static str {
    NAMES[bin % PITCH_CLASSES]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpcpParams {
    pub window: usize,
    pub hop: usize,
    pub reference_hz: f64,
    pub n_harmonics: usize,
    /// Weight ratio between successive harmonic interpretations.
    pub harmonic_decay: f64,
    pub min_freq: f64,
    pub max_freq: f64,
    /// Peaks weaker than this (dB relative to the frame's strongest bin) are noise.
    pub noise_floor_db: f64,
    pub max_peaks: usize,
    /// Width of the cos^2 weighting kernel in semitones.
    pub weight_window: f64,
}

impl Default for HpcpParams {
    fn default() -> Self {
        Self {
            window: 4096,
            hop: 2048,
            reference_hz: 440.0,
            n_harmonics: 8,
            harmonic_decay: 0.8,
            min_freq: 40.0,
            max_freq: 5000.0,
            noise_floor_db: -60.0,
            max_peaks: 100,
            weight_window: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    freq: f64,
    magnitude: f64,
}

/// Harmonic pitch class profiles, one unit-max 12-vector per frame.
pub fn compute_hpcp(clip: &AudioClip, params: &HpcpParams) -> Result<FeatureMatrix> {
    if params.window < 4 || params.hop == 0 || params.n_harmonics == 0 || params.reference_hz <= 0.0 {
        return Err(Error::InvalidParameter(format!("bad HPCP parameters {params:?}")));
    }
    if clip.len() < params.window {
        return Err(Error::ClipTooShort {
            len: clip.len(),
            needed: params.window,
        });
    }
    let sr = clip.sample_rate() as f64;
    let mut stft = Stft::new(params.window, params.hop);
    let t = n_frames(clip.len(), params.hop);
    let mut frames = Array2::zeros((t, PITCH_CLASSES));
    let mut mag = vec![0.0; stft.n_bins()];
    let mut peaks = Vec::new();
    for (i, mut row) in frames.rows_mut().into_iter().enumerate() {
        stft.magnitude(clip.samples(), i, &mut mag);
        find_peaks(&mag, sr, params.window, params, &mut peaks);
        let profile = row.as_slice_mut().expect("standard layout");
        for p in &peaks {
            accumulate(p, params, profile);
        }
        let max = profile.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            profile.iter_mut().for_each(|v| *v /= max);
        }
    }
    Ok(FeatureMatrix {
        frames,
        hop: params.hop,
        window: params.window,
        sample_rate: clip.sample_rate(),
        kind: FeatureKind::Hpcp,
    })
}

fn find_peaks(mag: &[f64], sr: f64, fft_len: usize, params: &HpcpParams, out: &mut Vec<Peak>) {
    out.clear();
    let bin_hz = sr / fft_len as f64;
    let lo = ((params.min_freq / bin_hz).floor() as usize).max(1);
    let hi = ((params.max_freq / bin_hz).ceil() as usize).min(mag.len() - 2);
    if lo > hi {
        return;
    }
    let frame_max = mag[lo..=hi].iter().copied().fold(0.0, f64::max);
    if frame_max <= 0.0 {
        return;
    }
    let threshold = frame_max * 10f64.powf(params.noise_floor_db / 20.0);
    for k in lo..=hi {
        let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
        if b > a && b >= c && b >= threshold {
            // parabolic interpolation on the dB magnitudes
            let (da, db, dc) = (to_db(a), to_db(b), to_db(c));
            let denom = da - 2.0 * db + dc;
            let offset = if denom.abs() > 1e-12 {
                0.5 * (da - dc) / denom
            } else {
                0.0
            };
            let peak_db = db - 0.25 * (da - dc) * offset;
            let freq = (k as f64 + offset) * bin_hz;
            if freq >= params.min_freq && freq <= params.max_freq {
                out.push(Peak {
                    freq,
                    magnitude: 10f64.powf(peak_db / 20.0),
                });
            }
        }
    }
    if out.len() > params.max_peaks {
        out.sort_by(|x, y| y.magnitude.total_cmp(&x.magnitude).then(x.freq.total_cmp(&y.freq)));
        out.truncate(params.max_peaks);
    }
}

fn to_db(m: f64) -> f64 {
    20.0 * m.max(1e-12).log10()
}

/// Adds a peak's energy to its own pitch class and to those of its
/// subharmonic interpretations `freq / h`.
fn accumulate(peak: &Peak, params: &HpcpParams, profile: &mut [f64]) {
    let energy = peak.magnitude * peak.magnitude;
    let half_width = params.weight_window / 2.0;
    let mut harmonic_weight = 1.0;
    for h in 1..=params.n_harmonics {
        let f0 = peak.freq / h as f64;
        let semis = 12.0 * (f0 / params.reference_hz).log2();
        let pc = semis.rem_euclid(12.0);
        let nearest = pc.round();
        let d = pc - nearest;
        if d.abs() <= half_width {
            let w = (PI / 2.0 * d / half_width).cos().powi(2);
            profile[nearest as usize % PITCH_CLASSES] += w * harmonic_weight * energy;
        }
        harmonic_weight *= params.harmonic_decay;
    }
}
