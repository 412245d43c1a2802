//! Dynamic-programming beat tracker with a tempo bias.
//!
//! The onset envelope is half-wave rectified log-mel spectral flux. A global
//! beat period is picked from the envelope's autocorrelation weighted by a
//! log-Gaussian prior around the bias tempo; beats then maximize
//! `C(t) = O(t) + max_p [C(p) - tightness * ln((t - p) / period)^2]`.

use serde::{Deserialize, Serialize};

use super::spectral::{n_frames, MelFilterbank, Stft};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// The tempo levels every song is tracked at.
pub const TEMPO_BIASES: [u32; 3] = [60, 120, 180];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatParams {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_max: f64,
    /// Dynamic range of the log-mel spectrogram, in dB.
    pub top_db: f64,
    pub tightness: f64,
    /// Width of the tempo prior in octaves.
    pub tempo_sigma: f64,
    /// Longest beat period considered, in seconds.
    pub max_period: f64,
}

impl Default for BeatParams {
    fn default() -> Self {
        Self {
            window: 2048,
            hop: 512,
            n_mels: 40,
            f_max: 11025.0,
            top_db: 80.0,
            tightness: 100.0,
            tempo_sigma: 0.9,
            max_period: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTrack {
    /// Beat times in seconds, strictly increasing.
    pub onsets: Vec<f64>,
    pub tempo_bias: u32,
    /// Global beat period in seconds.
    pub period: f64,
    /// Set when the onset envelope was flat and a uniform grid was used.
    pub fallback: bool,
}

impl BeatTrack {
    pub fn n_intervals(&self) -> usize {
        self.onsets.len().saturating_sub(1)
    }
}

/// Onset strength per frame (frame `i` at `i * hop / sample_rate` seconds),
/// normalized to unit standard deviation. `None` if the envelope is flat.
pub fn onset_envelope(clip: &AudioClip, params: &BeatParams) -> Option<Vec<f64>> {
    let bank = MelFilterbank::new(params.n_mels, 0.0, params.f_max, params.window, clip.sample_rate());
    let mut stft = Stft::new(params.window, params.hop);
    let t = n_frames(clip.len(), params.hop);
    let mut power = vec![0.0; stft.n_bins()];
    let mut logmel = vec![vec![0.0; params.n_mels]; t];
    let mut global_max = f64::NEG_INFINITY;
    for (i, row) in logmel.iter_mut().enumerate() {
        stft.power(clip.samples(), i, &mut power);
        bank.apply(&power, row);
        for v in row.iter_mut() {
            *v = 10.0 * v.max(1e-10).log10();
            global_max = global_max.max(*v);
        }
    }
    let floor = global_max - params.top_db;
    for row in &mut logmel {
        row.iter_mut().for_each(|v| *v = v.max(floor));
    }
    let mut flux = vec![0.0; t];
    for i in 1..t {
        flux[i] = logmel[i]
            .iter()
            .zip(&logmel[i - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    // DC-blocking high-pass
    let mut env = vec![0.0; t];
    let mut prev_in = 0.0;
    let mut prev_out = 0.0;
    for (e, &x) in env.iter_mut().zip(&flux) {
        prev_out = x - prev_in + 0.99 * prev_out;
        prev_in = x;
        *e = prev_out;
    }
    let mean = env.iter().sum::<f64>() / t as f64;
    let std = (env.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
    if !(std > 1e-9) || flux.iter().all(|&f| f == 0.0) {
        return None;
    }
    env.iter_mut().for_each(|e| *e /= std);
    Some(env)
}

/// Tracks beats with the tracker biased toward `tempo_bias` bpm.
pub fn track_beats(clip: &AudioClip, tempo_bias: u32, params: &BeatParams) -> Result<BeatTrack> {
    track_beats_at_biases(clip, &[tempo_bias], params).remove(0)
}

/// Tracks beats once per tempo bias, sharing one onset envelope.
pub fn track_beats_at_biases(clip: &AudioClip, tempo_biases: &[u32], params: &BeatParams) -> Vec<Result<BeatTrack>> {
    let needed = 2 * clip.sample_rate() as usize;
    let env = if clip.len() < needed {
        None
    } else {
        onset_envelope(clip, params)
    };
    tempo_biases
        .iter()
        .map(|&tempo_bias| {
            if tempo_bias == 0 {
                return Err(Error::InvalidParameter("tempo bias must be positive".into()));
            }
            if clip.len() < needed {
                return Err(Error::ClipTooShort {
                    len: clip.len(),
                    needed,
                });
            }
            let Some(env) = &env else {
                return Ok(uniform_grid(clip.duration(), tempo_bias));
            };
            let frame_rate = clip.sample_rate() as f64 / params.hop as f64;
            let period = estimate_period(env, frame_rate, tempo_bias, params);
            let beats = dp_beats(env, period, params.tightness);
            if beats.len() < 2 {
                return Ok(uniform_grid(clip.duration(), tempo_bias));
            }
            Ok(BeatTrack {
                onsets: beats.into_iter().map(|b| b as f64 / frame_rate).collect(),
                tempo_bias,
                period: period / frame_rate,
                fallback: false,
            })
        })
        .collect()
}

fn uniform_grid(duration: f64, tempo_bias: u32) -> BeatTrack {
    let period = 60.0 / tempo_bias as f64;
    let onsets = (0..)
        .map(|k| k as f64 * period)
        .take_while(|&t| t <= duration)
        .collect();
    BeatTrack {
        onsets,
        tempo_bias,
        period,
        fallback: true,
    }
}

/// Beat period in frames: autocorrelation peak under a log-Gaussian tempo prior.
fn estimate_period(env: &[f64], frame_rate: f64, tempo_bias: u32, params: &BeatParams) -> f64 {
    let max_lag = ((params.max_period * frame_rate) as usize).min(env.len() - 1).max(2);
    let center = 60.0 / tempo_bias as f64 * frame_rate;
    let weighted: Vec<f64> = (0..=max_lag)
        .map(|lag| {
            if lag == 0 {
                return f64::NEG_INFINITY;
            }
            let r: f64 = env[..env.len() - lag].iter().zip(&env[lag..]).map(|(a, b)| a * b).sum();
            let octaves = (lag as f64 / center).log2() / params.tempo_sigma;
            r * (-0.5 * octaves * octaves).exp()
        })
        .collect();
    let best = (1..=max_lag)
        .max_by(|&a, &b| weighted[a].total_cmp(&weighted[b]).then(b.cmp(&a)))
        .expect("max_lag >= 2");
    // refine between neighbouring lags
    if best > 1 && best < max_lag {
        let (a, b, c) = (weighted[best - 1], weighted[best], weighted[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            let offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
            return best as f64 + offset;
        }
    }
    best as f64
}

fn dp_beats(env: &[f64], period: f64, tightness: f64) -> Vec<usize> {
    let n = env.len();
    let local = smooth(env, period / 32.0);
    let far = (2.0 * period).round() as usize;
    let near = ((period / 2.0).round() as usize).max(1);
    let mut score = vec![0.0; n];
    let mut back: Vec<Option<usize>> = vec![None; n];
    for t in 0..n {
        let mut best: Option<(f64, usize)> = None;
        if t >= near {
            let lo = t.saturating_sub(far);
            for (p, &prev) in score.iter().enumerate().take(t - near + 1).skip(lo) {
                let gap = ((t - p) as f64 / period).ln();
                let s = prev - tightness * gap * gap;
                if best.is_none_or(|(bs, _)| s > bs) {
                    best = Some((s, p));
                }
            }
        }
        match best {
            Some((s, p)) => {
                score[t] = local[t] + s;
                back[t] = Some(p);
            }
            None => score[t] = local[t],
        }
    }
    // best path end within the final beat period
    let tail = (period.round() as usize).clamp(1, n);
    let last = (n - tail..n)
        .max_by(|&a, &b| score[a].total_cmp(&score[b]).then(b.cmp(&a)))
        .expect("non-empty tail");
    let mut beats = vec![last];
    let mut cur = last;
    while let Some(p) = back[cur] {
        beats.push(p);
        cur = p;
    }
    beats.reverse();
    beats
}

fn smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    if sigma < 0.5 {
        return x.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .zip(-radius..)
                .filter(|(_, d)| (0..n).contains(&(i + d)))
                .map(|(k, d)| k * x[(i + d) as usize])
                .sum()
        })
        .collect()
}
