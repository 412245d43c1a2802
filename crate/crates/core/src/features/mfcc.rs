use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::spectral::{n_frames, MelFilterbank, Stft};
use super::{FeatureKind, FeatureMatrix};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccParams {
    /// Analysis window in samples (0.5 s at 44.1 kHz).
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_coeffs: usize,
    /// Exponential lifter: coefficient `n >= 1` is scaled by `n^lifter`.
    pub lifter: f64,
}

impl Default for MfccParams {
    fn default() -> Self {
        Self {
            window: 22050,
            hop: 512,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            n_coeffs: 20,
            lifter: 0.6,
        }
    }
}

impl MfccParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.hop == 0 || self.n_mels == 0 || self.n_coeffs == 0 {
            return Err(Error::InvalidParameter(format!("bad MFCC parameters {self:?}")));
        }
        if self.n_coeffs > self.n_mels {
            return Err(Error::InvalidParameter(
                "more cepstral coefficients than mel bands".into(),
            ));
        }
        Ok(())
    }
}

/// Mel-band power per frame (rows = frames, columns = bands), before the log.
pub fn mel_band_energies(clip: &AudioClip, params: &MfccParams) -> Result<Array2<f64>> {
    params.validate()?;
    if clip.len() < params.window {
        return Err(Error::ClipTooShort {
            len: clip.len(),
            needed: params.window,
        });
    }
    let bank = MelFilterbank::new(
        params.n_mels,
        params.f_min,
        params.f_max,
        params.window,
        clip.sample_rate(),
    );
    let mut stft = Stft::new(params.window, params.hop);
    let t = n_frames(clip.len(), params.hop);
    let mut power = vec![0.0; stft.n_bins()];
    let mut out = Array2::zeros((t, params.n_mels));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        stft.power(clip.samples(), i, &mut power);
        bank.apply(&power, row.as_slice_mut().expect("standard layout"));
    }
    Ok(out)
}

/// Liftered MFCCs over the whole clip: power spectrogram, mel filterbank,
/// natural log, orthonormal DCT-II, then `c_n *= n^lifter` for `n >= 1`.
pub fn compute_mfcc(clip: &AudioClip, params: &MfccParams) -> Result<FeatureMatrix> {
    let mel = mel_band_energies(clip, params)?;
    let dct = dct_matrix(params.n_coeffs, params.n_mels);
    let lifter: Vec<f64> = (0..params.n_coeffs)
        .map(|n| if n == 0 { 1.0 } else { (n as f64).powf(params.lifter) })
        .collect();
    let mut frames = Array2::zeros((mel.nrows(), params.n_coeffs));
    let mut logmel = vec![0.0; params.n_mels];
    for (energies, mut out) in mel.rows().into_iter().zip(frames.rows_mut()) {
        for (l, e) in logmel.iter_mut().zip(energies) {
            *l = e.max(LOG_FLOOR).ln();
        }
        for (n, o) in out.iter_mut().enumerate() {
            let c: f64 = dct[n].iter().zip(&logmel).map(|(d, l)| d * l).sum();
            *o = c * lifter[n];
        }
    }
    Ok(FeatureMatrix {
        frames,
        hop: params.hop,
        window: params.window,
        sample_rate: clip.sample_rate(),
        kind: FeatureKind::Mfcc,
    })
}

fn dct_matrix(n_coeffs: usize, n_inputs: usize) -> Vec<Vec<f64>> {
    let m = n_inputs as f64;
    (0..n_coeffs)
        .map(|n| {
            let scale = if n == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            (0..n_inputs)
                .map(|k| scale * (PI * n as f64 * (k as f64 + 0.5) / m).cos())
                .collect()
        })
        .collect()
}
