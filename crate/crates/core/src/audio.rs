//! Audio decoding, downmixing and sample-rate conversion.
//!
//! PCM WAV (16/24/32-bit integer and 32-bit float) is decoded natively.
//! Anything else goes through an optional [`ExternalDecoder`].

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of taps of the windowed-sinc interpolation kernel.
pub const RESAMPLER_TAPS: usize = 64;

/// A mono sample buffer at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns this clip converted to `target_rate`.
    pub fn resampled(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == 0 {
            return Err(Error::InvalidParameter("target rate must be positive".into()));
        }
        AudioClip::new(resample(&self.samples, self.sample_rate, target_rate), target_rate)
    }
}

/// Decoded multichannel audio handed back by an [`ExternalDecoder`].
#[derive(Debug, Clone)]
pub struct DecodedAudio {
    /// One buffer per channel, all the same length.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

/// Hook for formats other than WAV (mp3, flac, ...).
pub trait ExternalDecoder: Send + Sync {
    fn decode(&self, path: &Path) -> Result<DecodedAudio>;
}

/// Loads `path` as a mono clip at `target_rate`, decoding WAV natively.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip> {
    load_audio_with(path, target_rate, None)
}

/// Like [`load_audio`], falling back to `external` for non-WAV input.
pub fn load_audio_with(
    path: impl AsRef<Path>,
    target_rate: u32,
    external: Option<&dyn ExternalDecoder>,
) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let decoded = if is_wav(&bytes) {
        decode_wav(path, &bytes)?
    } else if let Some(decoder) = external {
        decoder.decode(path)?
    } else {
        return Err(Error::UnsupportedFormat(format!(
            "{} is not a RIFF/WAVE file and no external decoder is configured",
            path.display()
        )));
    };
    let mono = downmix(&decoded.channels);
    if mono.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "non-finite sample".into(),
        });
    }
    AudioClip::new(mono, decoded.sample_rate)?.resampled(target_rate)
}

fn is_wav(bytes: &[u8]) -> bool {
    bytes.len() >= 12 && &bytes[0..4] == b"RIFF" && &bytes[8..12] == b"WAVE"
}

fn decode_wav(path: &Path, bytes: &[u8]) -> Result<DecodedAudio> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}: unsupported WAV encoding", path.display())),
        other => corrupt(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(corrupt("zero channels or sample rate".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| corrupt(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| corrupt(e.to_string()))?
        }
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!("{format:?} samples with {bits} bits")));
        }
    };
    let n_channels = spec.channels as usize;
    let frames = interleaved.len() / n_channels;
    let mut channels = vec![Vec::with_capacity(frames); n_channels];
    for frame in interleaved.chunks_exact(n_channels) {
        for (c, &s) in frame.iter().enumerate() {
            channels[c].push(s);
        }
    }
    Ok(DecodedAudio {
        channels,
        sample_rate: spec.sample_rate,
    })
}

/// Average of all channels, sample by sample.
pub fn downmix(channels: &[Vec<f64>]) -> Vec<f64> {
    let Some(len) = channels.iter().map(Vec::len).min() else {
        return Vec::new();
    };
    if channels.len() == 1 {
        return channels[0][..len].to_vec();
    }
    let scale = 1.0 / channels.len() as f64;
    (0..len)
        .map(|i| channels.iter().map(|c| c[i]).sum::<f64>() * scale)
        .collect()
}

/// Band-limited resampling with a Blackman-windowed sinc kernel of
/// [`RESAMPLER_TAPS`] taps. The cutoff follows the lower of the two Nyquist
/// frequencies.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let step = f64::from(from) / f64::from(to);
    let cutoff = (f64::from(to) / f64::from(from)).min(1.0);
    let half = (RESAMPLER_TAPS / 2) as i64;
    let out_len = ((samples.len() as u128 * to as u128 + from as u128 / 2) / from as u128) as usize;
    let n_in = samples.len() as i64;
    (0..out_len)
        .map(|n| {
            let x = n as f64 * step;
            let base = x.floor() as i64;
            let mut acc = 0.0;
            for k in (base - half + 1)..=(base + half) {
                if k < 0 || k >= n_in {
                    continue;
                }
                let t = x - k as f64;
                acc += samples[k as usize] * cutoff * sinc(cutoff * t) * blackman(t / half as f64);
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
    }
}

/// Writes a mono clip as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in clip.samples() {
        writer.write_sample(s as f32).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}
