use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{RealFftPlanner, RealToComplex};

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of centered frames for a signal of `len` samples.
pub fn n_frames(len: usize, hop: usize) -> usize {
    if len == 0 {
        0
    } else {
        1 + (len - 1) / hop
    }
}

/// Short-time Fourier analysis over centered, zero-padded frames.
pub struct Stft {
    fft: Arc<dyn RealToComplex<f64>>,
    window: Vec<f64>,
    hop: usize,
    frame: Vec<f64>,
    spectrum: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Stft {
    pub fn new(window_len: usize, hop: usize) -> Self {
        let fft = RealFftPlanner::new().plan_fft_forward(window_len);
        Self {
            frame: fft.make_input_vec(),
            spectrum: fft.make_output_vec(),
            scratch: fft.make_scratch_vec(),
            fft,
            window: hann(window_len),
            hop,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    /// Writes `|X_k|^2` for frame `frame` into `out` (length `n_bins`).
    pub fn power(&mut self, signal: &[f64], frame: usize, out: &mut [f64]) {
        self.transform(signal, frame);
        for (o, c) in out.iter_mut().zip(&self.spectrum) {
            *o = c.norm_sqr();
        }
    }

    /// Writes `|X_k|` for frame `frame` into `out` (length `n_bins`).
    pub fn magnitude(&mut self, signal: &[f64], frame: usize, out: &mut [f64]) {
        self.transform(signal, frame);
        for (o, c) in out.iter_mut().zip(&self.spectrum) {
            *o = c.norm();
        }
    }

    fn transform(&mut self, signal: &[f64], frame: usize) {
        let n = self.window.len();
        let start = (frame * self.hop) as i64 - (n / 2) as i64;
        for (k, (b, w)) in self.frame.iter_mut().zip(&self.window).enumerate() {
            let idx = start + k as i64;
            let s = if idx >= 0 && (idx as usize) < signal.len() {
                signal[idx as usize]
            } else {
                0.0
            };
            *b = s * w;
        }
        self.fft
            .process_with_scratch(&mut self.frame, &mut self.spectrum, &mut self.scratch)
            .expect("buffers sized by the planner");
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank stored sparsely: one run of weights per band.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    bands: Vec<(usize, Vec<f64>)>,
    #[cfg_attr(not(test), allow(dead_code))]
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_bands: usize, f_min: f64, f_max: f64, fft_len: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = f_max.min(nyquist);
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..n_bands + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_bands + 1) as f64))
            .collect();
        let n_bins = fft_len / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_len as f64;
        let bands = (0..n_bands)
            .map(|b| {
                let (lo, mid, hi) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
                let first = ((lo / bin_hz).floor() as usize).min(n_bins);
                let last = ((hi / bin_hz).ceil() as usize).min(n_bins - 1);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        Self { bands, edges_hz }
    }

    /// Lower, center and upper edge of band `b` in Hz.
    #[cfg(test)]
    pub fn band_edges(&self, b: usize) -> (f64, f64, f64) {
        (self.edges_hz[b], self.edges_hz[b + 1], self.edges_hz[b + 2])
    }

    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (o, (first, weights)) in out.iter_mut().zip(&self.bands) {
            *o = weights.iter().zip(&spectrum[*first..]).map(|(w, s)| w * s).sum();
        }
    }
}
