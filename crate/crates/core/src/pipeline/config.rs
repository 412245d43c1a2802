use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::SwParams;
use crate::blocks::BlockConfig;
use crate::error::{Error, Result};
use crate::features::{BeatParams, HpcpParams, MfccParams, TEMPO_BIASES};

/// Every tunable of extraction, scoring and fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Audio is resampled to this rate before analysis.
    pub sample_rate: u32,
    pub mfcc: MfccParams,
    pub hpcp: HpcpParams,
    pub beats: BeatParams,
    pub tempo_biases: Vec<u32>,
    pub blocks: BlockConfig,
    /// Fraction of neighbors kept by mutual kNN binarization.
    pub kappa: f64,
    /// Neighbors used by kernel autotuning and kNN truncation.
    pub knn: usize,
    /// Neighbors used by late fusion when set; `knn` otherwise. Small corpora
    /// want fewer, so a neighborhood stays a similar fraction of the corpus.
    #[serde(default)]
    pub late_knn: Option<usize>,
    pub early_iters: usize,
    pub late_iters: usize,
    pub sw: SwParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44100,
            mfcc: MfccParams::default(),
            hpcp: HpcpParams::default(),
            beats: BeatParams::default(),
            tempo_biases: TEMPO_BIASES.to_vec(),
            blocks: BlockConfig::default(),
            kappa: 0.1,
            knn: 20,
            late_knn: None,
            early_iters: 3,
            late_iters: 20,
            sw: SwParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.blocks.validate()?;
        self.mfcc.validate()?;
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        if self.knn == 0 || self.late_knn == Some(0) {
            return Err(Error::InvalidParameter("knn must be positive".into()));
        }
        if self.tempo_biases.is_empty() || self.tempo_biases.contains(&0) {
            return Err(Error::InvalidParameter(
                "tempo biases must be positive and nonempty".into(),
            ));
        }
        let mut sorted = self.tempo_biases.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.tempo_biases.len() {
            return Err(Error::InvalidParameter("tempo biases must be distinct".into()));
        }
        Ok(())
    }

    pub fn late_knn(&self) -> usize {
        self.late_knn.unwrap_or(self.knn)
    }

    /// Hash of everything that shapes the cached features.
    pub fn feature_fingerprint(&self) -> String {
        let parts = serde_json::json!({
            "sample_rate": self.sample_rate,
            "mfcc": self.mfcc,
            "hpcp": self.hpcp,
            "beats": self.beats,
            "tempo_biases": self.tempo_biases,
        });
        hex::encode(Sha256::digest(parts.to_string().as_bytes()))
    }

    /// Hash of everything that shapes pair scores.
    pub fn scoring_fingerprint(&self) -> String {
        let parts = serde_json::json!({
            "features": self.feature_fingerprint(),
            "blocks": self.blocks,
            "kappa": self.kappa,
            "knn": self.knn,
            "early_iters": self.early_iters,
            "sw": self.sw,
        });
        hex::encode(Sha256::digest(parts.to_string().as_bytes()))
    }
}
