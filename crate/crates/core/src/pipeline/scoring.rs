use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use log::{debug, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cache::{read_container, write_container, Tensor};
use super::config::PipelineConfig;
use super::features::SongFeatures;
use super::manifest::SongMeta;
use crate::align::{smith_waterman, smith_waterman_full};
use crate::blocks::{build_hpcp_blocks, build_mfcc_and_ssm_blocks, BlockSet, Channel};
use crate::csm::{binarize_mutual_knn, compute_csm, BinaryCsm, CrossSimilarityMatrix, Direction};
use crate::error::{Error, Result};
use crate::snf::{early_fuse_pair, PairDistances};

/// A network of pair scores: one per block channel plus early fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreChannel {
    Mfcc,
    Ssm,
    Hpcp,
    Early,
}

impl ScoreChannel {
    pub const ALL: [ScoreChannel; 4] = [
        ScoreChannel::Mfcc,
        ScoreChannel::Ssm,
        ScoreChannel::Hpcp,
        ScoreChannel::Early,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreChannel::Mfcc => "mfcc",
            ScoreChannel::Ssm => "ssm",
            ScoreChannel::Hpcp => "hpcp",
            ScoreChannel::Early => "early",
        }
    }

    fn block_index(self) -> Option<usize> {
        match self {
            ScoreChannel::Mfcc => Some(0),
            ScoreChannel::Ssm => Some(1),
            ScoreChannel::Hpcp => Some(2),
            ScoreChannel::Early => None,
        }
    }
}

impl fmt::Display for ScoreChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreChannel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown channel {s:?}")))
    }
}

/// Blocks and block self-distances of one song at one tempo bias, indexed
/// like [`Channel::ALL`].
#[derive(Debug, Clone)]
pub struct PreparedBias {
    pub tempo_bias: u32,
    /// Later biases whose beat track came out identical; they are scored once, under `tempo_bias`.
    pub same_track: Vec<u32>,
    pub sets: Vec<BlockSet>,
    pub self_distances: Vec<Array2<f64>>,
}

/// A song ready for pairwise scoring.
#[derive(Debug, Clone)]
pub struct PreparedSong {
    pub meta: SongMeta,
    pub biases: Vec<PreparedBias>,
    /// Biases left out, with the reason.
    pub skipped: Vec<(u32, String)>,
}

impl PreparedSong {
    pub fn song_id(&self) -> &str {
        &self.meta.song_id
    }
}

fn prepare_bias(f: &SongFeatures, bias: u32, cfg: &PipelineConfig) -> Result<PreparedBias> {
    let (beats, mfcc, hpcp) = f
        .for_bias(bias)
        .ok_or_else(|| Error::MissingFeatures(format!("{} at tempo bias {bias}", f.song_id())))?;
    let (mfcc_set, ssm_set) = build_mfcc_and_ssm_blocks(mfcc, beats, &cfg.blocks)?;
    let hpcp_set = build_hpcp_blocks(hpcp, beats, &cfg.blocks)?;
    let sets = vec![mfcc_set, ssm_set, hpcp_set];
    let self_distances = sets
        .iter()
        .map(|s| compute_csm(s, s).map(|c| c.values))
        .collect::<Result<_>>()?;
    Ok(PreparedBias {
        tempo_bias: bias,
        same_track: Vec::new(),
        sets,
        self_distances,
    })
}

/// Builds blocks for every distinct beat track among the configured tempo
/// biases. Biases whose beat track failed or is too short are skipped and
/// recorded.
pub fn prepare_song(f: &SongFeatures, cfg: &PipelineConfig) -> PreparedSong {
    let mut biases: Vec<PreparedBias> = Vec::new();
    let mut skipped = Vec::new();
    for &bias in &cfg.tempo_biases {
        let track = f.beat_track(bias).map(|t| &t.onsets);
        let earlier = biases
            .iter_mut()
            .find(|p| track.is_some() && f.beat_track(p.tempo_bias).map(|t| &t.onsets) == track);
        if let Some(earlier) = earlier {
            earlier.same_track.push(bias);
            continue;
        }
        match prepare_bias(f, bias, cfg) {
            Ok(p) => biases.push(p),
            Err(e) => {
                debug!("{}: skipping tempo bias {bias}: {e}", f.song_id());
                skipped.push((bias, e.to_string()));
            }
        }
    }
    PreparedSong {
        meta: f.meta.clone(),
        biases,
        skipped,
    }
}

/// Best score of one channel over the tempo-bias combinations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub score: f64,
    /// Winning `(bias of a, bias of b)`; `None` when no combination was scorable.
    pub biases: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub channels: BTreeMap<ScoreChannel, ChannelScore>,
}

impl PairScore {
    pub fn score(&self, c: ScoreChannel) -> Option<f64> {
        self.channels.get(&c).map(|s| s.score)
    }
}

/// Scores and intermediate matrices of one bias combination.
struct ComboResult {
    csms: Vec<Option<CrossSimilarityMatrix>>,
    masks: Vec<Option<BinaryCsm>>,
    early: Option<crate::snf::EarlyFusion>,
    scores: BTreeMap<ScoreChannel, f64>,
}

fn score_combo(
    pa: &PreparedBias,
    pb: &PreparedBias,
    cfg: &PipelineConfig,
    channels: &[ScoreChannel],
) -> Result<ComboResult> {
    let want_early = channels.contains(&ScoreChannel::Early);
    let mut csms = vec![None, None, None];
    let mut masks = vec![None, None, None];
    let mut scores = BTreeMap::new();
    for (k, csm_slot) in csms.iter_mut().enumerate() {
        let single = channels.iter().copied().find(|c| c.block_index() == Some(k));
        if single.is_none() && !want_early {
            continue;
        }
        let csm = compute_csm(&pa.sets[k], &pb.sets[k])?;
        if let Some(c) = single {
            let mask = binarize_mutual_knn(csm.values.view(), cfg.kappa, Direction::Smallest)?;
            scores.insert(c, smith_waterman(mask.mask.view(), &cfg.sw)?.score);
            masks[k] = Some(mask);
        }
        *csm_slot = Some(csm);
    }
    let early = if want_early {
        let dists: Vec<PairDistances> = (0..3)
            .map(|k| PairDistances {
                ssm_a: pa.self_distances[k].view(),
                ssm_b: pb.self_distances[k].view(),
                csm: csms[k].as_ref().expect("computed for early fusion").values.view(),
            })
            .collect();
        let fused = early_fuse_pair(&dists, cfg.kappa, cfg.knn, cfg.early_iters)?;
        scores.insert(
            ScoreChannel::Early,
            smith_waterman(fused.binary.mask.view(), &cfg.sw)?.score,
        );
        Some(fused)
    } else {
        None
    };
    Ok(ComboResult {
        csms,
        masks,
        early,
        scores,
    })
}

/// Scores a pair on `channels`, taking each channel's maximum over every
/// combination of the two songs' distinct beat tracks. A channel with no
/// usable combination scores 0.
pub fn score_pair(
    a: &PreparedSong,
    b: &PreparedSong,
    cfg: &PipelineConfig,
    channels: &[ScoreChannel],
) -> Result<PairScore> {
    let mut best: BTreeMap<ScoreChannel, ChannelScore> = channels
        .iter()
        .map(|&c| {
            (
                c,
                ChannelScore {
                    score: 0.0,
                    biases: None,
                },
            )
        })
        .collect();
    for pa in &a.biases {
        for pb in &b.biases {
            let combo = score_combo(pa, pb, cfg, channels)?;
            for (c, s) in combo.scores {
                let slot = best.get_mut(&c).expect("requested channel");
                if slot.biases.is_none() || s > slot.score {
                    *slot = ChannelScore {
                        score: s,
                        biases: Some((pa.tempo_bias, pb.tempo_bias)),
                    };
                }
            }
        }
    }
    Ok(PairScore { channels: best })
}

/// Intermediate matrices of one pair at one bias combination.
#[derive(Debug, Clone)]
pub struct PairDump {
    pub biases: (u32, u32),
    pub scores: BTreeMap<ScoreChannel, f64>,
    pub tensors: Vec<Tensor>,
}

pub struct DumpSelection {
    pub csm: bool,
    pub fusion: bool,
    pub sw: bool,
}

/// Recomputes one bias combination and collects the requested matrices.
pub fn dump_pair(
    a: &PreparedSong,
    b: &PreparedSong,
    biases: (u32, u32),
    cfg: &PipelineConfig,
    what: &DumpSelection,
) -> Result<PairDump> {
    let find = |s: &'_ PreparedSong, bias: u32| -> Result<PreparedBias> {
        s.biases
            .iter()
            .find(|p| p.tempo_bias == bias || p.same_track.contains(&bias))
            .cloned()
            .ok_or_else(|| Error::MissingFeatures(format!("{} at tempo bias {bias}", s.song_id())))
    };
    let (pa, pb) = (find(a, biases.0)?, find(b, biases.1)?);
    let combo = score_combo(&pa, &pb, cfg, &ScoreChannel::ALL)?;
    let mut tensors = Vec::new();
    let as_f64 = |m: &BinaryCsm| m.mask.mapv(|v| if v { 1.0 } else { 0.0 });
    for (k, c) in Channel::ALL.iter().enumerate() {
        if what.csm {
            if let Some(csm) = &combo.csms[k] {
                tensors.push(Tensor::matrix(format!("csm_{}", c.name()), &csm.values));
            }
            if let Some(mask) = &combo.masks[k] {
                tensors.push(Tensor::matrix(format!("binary_{}", c.name()), &as_f64(mask)));
            }
        }
        if what.sw {
            if let Some(mask) = &combo.masks[k] {
                let full = smith_waterman_full(mask.mask.view(), &cfg.sw)?;
                tensors.push(Tensor::matrix(
                    format!("sw_{}", c.name()),
                    full.table.as_ref().expect("full table"),
                ));
            }
        }
    }
    if let Some(early) = &combo.early {
        if what.fusion {
            tensors.push(Tensor::matrix("fusion_p_hat", &early.fused.p_hat));
            tensors.push(Tensor::matrix("fusion_cross", &early.cross_probability));
            tensors.push(Tensor::matrix("binary_early", &as_f64(&early.binary)));
        }
        if what.sw {
            let full = smith_waterman_full(early.binary.mask.view(), &cfg.sw)?;
            tensors.push(Tensor::matrix("sw_early", full.table.as_ref().expect("full table")));
            let path: Vec<f64> = full
                .path
                .unwrap_or_default()
                .into_iter()
                .flat_map(|(i, j)| [i as f64, j as f64])
                .collect();
            tensors.push(Tensor::vector("sw_early_path", &path));
        }
    }
    Ok(PairDump {
        biases,
        scores: combo.scores,
        tensors,
    })
}

/// Pair scores for a whole corpus. Matrices are symmetric; the diagonal
/// holds 0 and carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrices {
    pub song_ids: Vec<String>,
    pub matrices: BTreeMap<ScoreChannel, Array2<f64>>,
}

impl ScoreMatrices {
    pub fn get(&self, c: ScoreChannel) -> Result<&Array2<f64>> {
        self.matrices
            .get(&c)
            .ok_or_else(|| Error::MissingFeatures(format!("no {c} score matrix")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "song_i,song_j,channel,score")?;
        for (c, m) in &self.matrices {
            for i in 0..self.song_ids.len() {
                for j in i + 1..self.song_ids.len() {
                    writeln!(w, "{},{},{},{}", self.song_ids[i], self.song_ids[j], c, m[[i, j]])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let channels: Vec<ScoreChannel> = self.matrices.keys().copied().collect();
        let tensors: Vec<Tensor> = self.matrices.iter().map(|(c, m)| Tensor::matrix(c.name(), m)).collect();
        write_container(path, json!({"song_ids": self.song_ids, "channels": channels}), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        let bad = |e: serde_json::Error| Error::CacheFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let song_ids: Vec<String> = serde_json::from_value(c.meta["song_ids"].clone()).map_err(bad)?;
        let channels: Vec<ScoreChannel> = serde_json::from_value(c.meta["channels"].clone()).map_err(bad)?;
        let matrices = channels
            .into_iter()
            .map(|ch| Ok((ch, c.matrix(ch.name(), path)?)))
            .collect::<Result<_>>()?;
        Ok(Self { song_ids, matrices })
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub workers: usize,
    /// JSON-lines file of finished pairs; an existing file is resumed.
    pub checkpoint: Option<PathBuf>,
    /// Stop after scoring this many new pairs.
    pub pair_limit: Option<usize>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            checkpoint: None,
            pair_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusRun {
    Complete(ScoreMatrices),
    /// The pair limit was hit; the checkpoint holds `scored` of `total` pairs.
    Interrupted {
        scored: usize,
        total: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
    song_ids: Vec<String>,
    channels: Vec<ScoreChannel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    i: usize,
    j: usize,
    scores: PairScore,
}

fn read_checkpoint(path: &Path, header: &CheckpointHeader) -> Result<HashMap<(usize, usize), PairScore>> {
    let bad = |reason: String| Error::CacheFormat {
        path: path.to_path_buf(),
        reason,
    };
    let mut done = HashMap::new();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let Some(first) = lines.next().transpose()? else {
        return Ok(done);
    };
    let found: CheckpointHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if found.fingerprint != header.fingerprint || found.song_ids != header.song_ids || found.channels != header.channels
    {
        return Err(bad(
            "checkpoint was written for a different corpus or configuration".into()
        ));
    }
    for line in lines {
        let line = line?;
        // a torn final line from an interrupted write is dropped
        match serde_json::from_str::<CheckpointRecord>(&line) {
            Ok(r) => {
                done.insert((r.i, r.j), r.scores);
            }
            Err(_) => warn!("{}: ignoring unreadable checkpoint line", path.display()),
        }
    }
    Ok(done)
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

/// Prepares songs on a pool of `workers` threads, keeping input order.
pub fn prepare_corpus(features: &[SongFeatures], cfg: &PipelineConfig, workers: usize) -> Result<Vec<PreparedSong>> {
    cfg.validate()?;
    let pool = build_pool(workers)?;
    Ok(pool.install(|| features.par_iter().map(|f| prepare_song(f, cfg)).collect()))
}

/// Scores all pairs of `songs` on `channels`. Pairs run on `workers`
/// threads; finished pairs are appended to the checkpoint by one writer.
pub fn score_corpus(
    songs: &[PreparedSong],
    cfg: &PipelineConfig,
    channels: &[ScoreChannel],
    opts: &ScoreOptions,
) -> Result<CorpusRun> {
    cfg.validate()?;
    if channels.is_empty() {
        return Err(Error::InvalidParameter("no channels requested".into()));
    }
    let mut channels = channels.to_vec();
    channels.sort();
    channels.dedup();
    let n = songs.len();
    let header = CheckpointHeader {
        fingerprint: cfg.scoring_fingerprint(),
        song_ids: songs.iter().map(|s| s.song_id().to_string()).collect(),
        channels: channels.clone(),
    };
    let mut done = match &opts.checkpoint {
        Some(p) if p.exists() => read_checkpoint(p, &header)?,
        _ => HashMap::new(),
    };
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let total = all.len();
    let mut pending: Vec<(usize, usize)> = all.iter().copied().filter(|p| !done.contains_key(p)).collect();
    let interrupted = opts.pair_limit.is_some_and(|l| l < pending.len());
    if let Some(limit) = opts.pair_limit {
        pending.truncate(limit);
    }

    let mut writer = match &opts.checkpoint {
        Some(p) => {
            let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
            let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?);
            if fresh {
                writeln!(w, "{}", serde_json::to_string(&header)?)?;
                w.flush()?;
            }
            Some(w)
        }
        None => None,
    };
    let pool = build_pool(opts.workers)?;
    let (tx, rx) = mpsc::channel::<((usize, usize), PairScore)>();
    let fresh: Vec<((usize, usize), PairScore)> = std::thread::scope(|scope| -> Result<_> {
        let collector = scope.spawn(move || -> Result<Vec<_>> {
            let mut got = Vec::new();
            for (pair, score) in rx {
                if let Some(w) = writer.as_mut() {
                    let rec = CheckpointRecord {
                        i: pair.0,
                        j: pair.1,
                        scores: score.clone(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                    w.flush()?;
                }
                got.push((pair, score));
            }
            Ok(got)
        });
        let work = pool.install(|| {
            pending.par_iter().try_for_each_with(tx, |tx, &(i, j)| -> Result<()> {
                let score = score_pair(&songs[i], &songs[j], cfg, &channels)?;
                debug!("scored {} vs {}", songs[i].song_id(), songs[j].song_id());
                // the collector only stops once every sender is gone
                tx.send(((i, j), score)).expect("collector alive");
                Ok(())
            })
        });
        let got = collector.join().expect("collector thread panicked")?;
        work?;
        Ok(got)
    })?;
    done.extend(fresh);

    if interrupted {
        return Ok(CorpusRun::Interrupted {
            scored: done.len(),
            total,
        });
    }
    let mut matrices: BTreeMap<ScoreChannel, Array2<f64>> =
        channels.iter().map(|&c| (c, Array2::zeros((n, n)))).collect();
    for (&(i, j), score) in &done {
        for (c, m) in matrices.iter_mut() {
            let s = score
                .score(*c)
                .ok_or_else(|| Error::MissingFeatures(format!("pair ({i}, {j}) lacks channel {c}")))?;
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    Ok(CorpusRun::Complete(ScoreMatrices {
        song_ids: header.song_ids,
        matrices,
    }))
}
