use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::cache::{read_container, read_meta, write_container, Tensor};
use super::config::PipelineConfig;
use super::manifest::{ManifestEntry, SongMeta};
use crate::audio::{load_audio_with, AudioClip, ExternalDecoder};
use crate::error::{Error, Result};
use crate::features::{compute_hpcp, compute_mfcc, track_beats_at_biases, BeatTrack, FeatureKind, FeatureMatrix};

/// Beat tracking result for one tempo bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTrack {
    pub tempo_bias: u32,
    pub track: Option<BeatTrack>,
    /// Why tracking failed, when it did.
    pub failure: Option<String>,
}

/// Everything extracted from one song. Frame features do not depend on the
/// tempo bias, so they are stored once and shared by every bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SongFeatures {
    pub meta: SongMeta,
    pub mfcc: FeatureMatrix,
    pub hpcp: FeatureMatrix,
    pub beats: Vec<BiasTrack>,
}

impl SongFeatures {
    pub fn song_id(&self) -> &str {
        &self.meta.song_id
    }

    pub fn beat_track(&self, tempo_bias: u32) -> Option<&BeatTrack> {
        self.beats
            .iter()
            .find(|b| b.tempo_bias == tempo_bias)
            .and_then(|b| b.track.as_ref())
    }

    /// `(beats, mfcc, hpcp)` for one bias, if tracking succeeded.
    pub fn for_bias(&self, tempo_bias: u32) -> Option<(&BeatTrack, &FeatureMatrix, &FeatureMatrix)> {
        self.beat_track(tempo_bias).map(|b| (b, &self.mfcc, &self.hpcp))
    }
}

/// Computes features of a decoded clip (resampled to the configured rate).
pub fn extract_song_features(clip: &AudioClip, meta: SongMeta, cfg: &PipelineConfig) -> Result<SongFeatures> {
    cfg.validate()?;
    let clip = if clip.sample_rate() == cfg.sample_rate {
        clip.clone()
    } else {
        clip.resampled(cfg.sample_rate)?
    };
    let mfcc = compute_mfcc(&clip, &cfg.mfcc)?;
    let hpcp = compute_hpcp(&clip, &cfg.hpcp)?;
    let beats = cfg
        .tempo_biases
        .iter()
        .zip(track_beats_at_biases(&clip, &cfg.tempo_biases, &cfg.beats))
        .map(|(&bias, track)| match track {
            Ok(t) => BiasTrack {
                tempo_bias: bias,
                track: Some(t),
                failure: None,
            },
            Err(e) => BiasTrack {
                tempo_bias: bias,
                track: None,
                failure: Some(e.to_string()),
            },
        })
        .collect();
    Ok(SongFeatures {
        meta,
        mfcc,
        hpcp,
        beats,
    })
}

/// Cache file name for a song id (ids are escaped to stay filesystem safe).
pub fn cache_path(dir: &Path, song_id: &str) -> PathBuf {
    let safe: String = song_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    let tag = &hex::encode(Sha256::digest(song_id.as_bytes()))[..8];
    dir.join(format!("{safe}-{tag}.cfse"))
}

fn matrix_meta(m: &FeatureMatrix) -> serde_json::Value {
    json!({"hop": m.hop, "window": m.window, "sample_rate": m.sample_rate, "kind": m.kind})
}

pub fn save_features(path: &Path, f: &SongFeatures, content_hash: &str) -> Result<()> {
    let mut tensors = vec![
        Tensor::matrix("mfcc", &f.mfcc.frames),
        Tensor::matrix("hpcp", &f.hpcp.frames),
    ];
    for b in &f.beats {
        if let Some(t) = &b.track {
            tensors.push(Tensor::vector(format!("beats_{}", b.tempo_bias), &t.onsets));
        }
    }
    let beats: Vec<serde_json::Value> = f
        .beats
        .iter()
        .map(|b| {
            json!({
                "tempo_bias": b.tempo_bias,
                "period": b.track.as_ref().map(|t| t.period),
                "fallback": b.track.as_ref().map(|t| t.fallback),
                "failure": b.failure,
            })
        })
        .collect();
    let meta = json!({
        "song": f.meta,
        "content_hash": content_hash,
        "mfcc": matrix_meta(&f.mfcc),
        "hpcp": matrix_meta(&f.hpcp),
        "beats": beats,
    });
    write_container(path, meta, &tensors)
}

pub fn load_features(path: &Path) -> Result<SongFeatures> {
    let c = read_container(path)?;
    let bad = |reason: String| Error::CacheFormat {
        path: path.to_path_buf(),
        reason,
    };
    let field = |v: &serde_json::Value, name: &str| -> Result<serde_json::Value> {
        v.get(name).cloned().ok_or_else(|| bad(format!("missing field {name}")))
    };
    let meta: SongMeta = serde_json::from_value(field(&c.meta, "song")?).map_err(|e| bad(e.to_string()))?;
    let matrix = |name: &str| -> Result<FeatureMatrix> {
        #[derive(Deserialize)]
        struct M {
            hop: usize,
            window: usize,
            sample_rate: u32,
            kind: FeatureKind,
        }
        let m: M = serde_json::from_value(field(&c.meta, name)?).map_err(|e| bad(e.to_string()))?;
        let frames: Array2<f64> = c.matrix(name, path)?;
        Ok(FeatureMatrix {
            frames,
            hop: m.hop,
            window: m.window,
            sample_rate: m.sample_rate,
            kind: m.kind,
        })
    };
    let (mfcc, hpcp) = (matrix("mfcc")?, matrix("hpcp")?);
    #[derive(Deserialize)]
    struct B {
        tempo_bias: u32,
        period: Option<f64>,
        fallback: Option<bool>,
        failure: Option<String>,
    }
    let entries: Vec<B> = serde_json::from_value(field(&c.meta, "beats")?).map_err(|e| bad(e.to_string()))?;
    let beats = entries
        .into_iter()
        .map(|b| {
            let track = match (b.period, b.fallback) {
                (Some(period), Some(fallback)) => Some(BeatTrack {
                    onsets: c.vector(&format!("beats_{}", b.tempo_bias), path)?,
                    tempo_bias: b.tempo_bias,
                    period,
                    fallback,
                }),
                _ => None,
            };
            Ok(BiasTrack {
                tempo_bias: b.tempo_bias,
                track,
                failure: b.failure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SongFeatures {
        meta,
        mfcc,
        hpcp,
        beats,
    })
}

/// Hash of the audio bytes, the song metadata and the feature configuration.
fn content_hash(audio: &[u8], meta: &SongMeta, cfg: &PipelineConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(audio);
    h.update(serde_json::to_vec(meta)?);
    h.update(cfg.feature_fingerprint().as_bytes());
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractFailure {
    pub song_id: String,
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub extracted: Vec<String>,
    /// Songs whose cache was already up to date.
    pub skipped: Vec<String>,
    pub failures: Vec<ExtractFailure>,
}

/// Extracts every manifest entry into `out_dir`. Up-to-date caches are
/// skipped; per-song failures are collected rather than returned.
pub fn extract_features(
    entries: &[ManifestEntry],
    out_dir: &Path,
    cfg: &PipelineConfig,
    decoder: Option<&dyn ExternalDecoder>,
) -> Result<ExtractReport> {
    cfg.validate()?;
    super::manifest::validate_entries(entries)?;
    fs::create_dir_all(out_dir)?;
    let mut report = ExtractReport::default();
    for e in entries {
        let id = e.meta.song_id.clone();
        let result = (|| -> Result<bool> {
            let bytes = fs::read(&e.path)?;
            let hash = content_hash(&bytes, &e.meta, cfg)?;
            let target = cache_path(out_dir, &id);
            if target.exists() {
                if let Ok(meta) = read_meta(&target) {
                    if meta.get("content_hash").and_then(|v| v.as_str()) == Some(hash.as_str()) {
                        return Ok(false);
                    }
                }
            }
            let clip = load_audio_with(&e.path, cfg.sample_rate, decoder)?;
            let features = extract_song_features(&clip, e.meta.clone(), cfg)?;
            save_features(&target, &features, &hash)?;
            Ok(true)
        })();
        match result {
            Ok(true) => {
                info!("extracted {id}");
                report.extracted.push(id);
            }
            Ok(false) => report.skipped.push(id),
            Err(err) => {
                warn!("{id}: {err}");
                report.failures.push(ExtractFailure {
                    song_id: id,
                    path: e.path.clone(),
                    error: err.to_string(),
                });
            }
        }
    }
    Ok(report)
}

/// Loads the caches of `song_ids` (in that order) from `dir`.
pub fn load_corpus(dir: &Path, song_ids: &[String]) -> Result<Vec<SongFeatures>> {
    song_ids
        .iter()
        .map(|id| {
            let p = cache_path(dir, id);
            if !p.exists() {
                return Err(Error::MissingFeatures(id.clone()));
            }
            load_features(&p)
        })
        .collect()
}

/// Song ids of every cache file in `dir`, sorted.
pub fn cached_song_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("cfse") {
            let meta = read_meta(&p)?;
            let song: SongMeta = serde_json::from_value(meta["song"].clone()).map_err(|e| Error::CacheFormat {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            ids.push(song.song_id);
        }
    }
    ids.sort();
    Ok(ids)
}
