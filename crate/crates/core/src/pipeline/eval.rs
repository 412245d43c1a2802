use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::manifest::{SetLabel, SongMeta};
use super::scoring::{ScoreChannel, ScoreMatrices};
use crate::error::{Error, Result};
use crate::snf::late_fuse_scores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub song_id: String,
    pub clique_id: String,
    /// 1-based rank of the first song from the same clique.
    pub rank: usize,
    /// The first clique-mate shares its score with another candidate, so the
    /// rank depends on the song-id tie break.
    pub tie_broken: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetProtocol {
    /// Songs of set A whose top-ranked set-B song is a clique-mate.
    pub correct: usize,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_rank: f64,
    pub mean_reciprocal_rank: f64,
    pub top1: usize,
    pub top10: usize,
    pub queries: Vec<QueryResult>,
    /// Songs without a clique-mate; not used as queries.
    pub singletons: Vec<String>,
    /// Mean average precision of each designated clique.
    pub map: BTreeMap<String, f64>,
    pub set_protocol: Option<SetProtocol>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Cliques to report mean average precision for.
    pub map_cliques: Vec<String>,
}

/// Candidates for query `q`, best first; ties go to the smaller song id.
fn ranking(sim: &ArrayView2<f64>, songs: &[SongMeta], q: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..songs.len()).filter(|&j| j != q).collect();
    others.sort_by(|&a, &b| {
        sim[[q, b]]
            .total_cmp(&sim[[q, a]])
            .then_with(|| songs[a].song_id.cmp(&songs[b].song_id))
    });
    others
}

fn average_precision(order: &[usize], songs: &[SongMeta], clique: &str) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &j) in order.iter().enumerate() {
        if songs[j].clique_id == clique {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// Ranks every song against all others by `sim` (higher = more similar).
pub fn evaluate(sim: ArrayView2<f64>, songs: &[SongMeta], opts: &EvalOptions) -> Result<EvalReport> {
    let n = songs.len();
    if sim.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "similarity {:?} for {n} songs",
            sim.dim()
        )));
    }
    if let Some(((i, j), v)) = sim.indexed_iter().find(|&((i, j), v)| i != j && v.is_nan()) {
        return Err(Error::InvalidParameter(format!("similarity {v} at ({i}, {j})")));
    }
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for s in songs {
        *sizes.entry(s.clique_id.as_str()).or_default() += 1;
    }
    for c in &opts.map_cliques {
        if !sizes.contains_key(c.as_str()) {
            return Err(Error::InvalidParameter(format!("unknown clique {c:?}")));
        }
    }
    let mut queries = Vec::new();
    let mut singletons = Vec::new();
    let mut ap_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for q in 0..n {
        let clique = songs[q].clique_id.as_str();
        if sizes[clique] < 2 {
            singletons.push(songs[q].song_id.clone());
            continue;
        }
        let order = ranking(&sim, songs, q);
        let pos = order
            .iter()
            .position(|&j| songs[j].clique_id == clique)
            .expect("clique has a mate");
        let first = order[pos];
        let tie_broken = order
            .iter()
            .any(|&j| j != first && sim[[q, j]] == sim[[q, first]] && songs[j].clique_id != clique);
        queries.push(QueryResult {
            song_id: songs[q].song_id.clone(),
            clique_id: clique.to_string(),
            rank: pos + 1,
            tie_broken,
        });
        if opts.map_cliques.iter().any(|c| c == clique) {
            let e = ap_sums.entry(clique.to_string()).or_default();
            e.0 += average_precision(&order, songs, clique);
            e.1 += 1;
        }
    }
    if queries.is_empty() {
        return Err(Error::InvalidParameter("no clique has two or more songs".into()));
    }
    let count = queries.len() as f64;
    let mean_rank = queries.iter().map(|q| q.rank as f64).sum::<f64>() / count;
    let mean_reciprocal_rank = queries.iter().map(|q| 1.0 / q.rank as f64).sum::<f64>() / count;
    let top1 = queries.iter().filter(|q| q.rank == 1).count();
    let top10 = queries.iter().filter(|q| q.rank <= 10).count();
    assert!(mean_reciprocal_rank > 0.0 && mean_reciprocal_rank <= 1.0);
    assert!(mean_rank >= 1.0 && top1 <= top10);

    let set_protocol = songs.iter().any(|s| s.set.is_some()).then(|| {
        let in_b: Vec<usize> = (0..n).filter(|&j| songs[j].set == Some(SetLabel::B)).collect();
        let mut protocol = SetProtocol { correct: 0, queries: 0 };
        for q in (0..n).filter(|&q| songs[q].set == Some(SetLabel::A)) {
            protocol.queries += 1;
            let best = in_b.iter().copied().filter(|&j| j != q).max_by(|&a, &b| {
                sim[[q, a]]
                    .total_cmp(&sim[[q, b]])
                    .then_with(|| songs[b].song_id.cmp(&songs[a].song_id))
            });
            if best.is_some_and(|b| songs[b].clique_id == songs[q].clique_id) {
                protocol.correct += 1;
            }
        }
        protocol
    });

    Ok(EvalReport {
        mean_rank,
        mean_reciprocal_rank,
        top1,
        top10,
        queries,
        singletons,
        map: ap_sums.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect(),
        set_protocol,
    })
}

/// Which similarity network to rank by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    Channel(ScoreChannel),
    /// Late fusion of the three block channels.
    LateAll,
    /// Late fusion of the three block channels and the early-fusion network.
    EarlyPlusLate,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Channel(c) => write!(f, "{c}"),
            EvalMode::LateAll => f.write_str("late"),
            EvalMode::EarlyPlusLate => f.write_str("early+late"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" | "late-all" => Ok(EvalMode::LateAll),
            "early+late" => Ok(EvalMode::EarlyPlusLate),
            other => other.parse().map(EvalMode::Channel),
        }
    }
}

impl EvalMode {
    pub fn channels(self) -> Vec<ScoreChannel> {
        match self {
            EvalMode::Channel(c) => vec![c],
            EvalMode::LateAll => vec![ScoreChannel::Mfcc, ScoreChannel::Ssm, ScoreChannel::Hpcp],
            EvalMode::EarlyPlusLate => ScoreChannel::ALL.to_vec(),
        }
    }
}

/// Late fusion of several score networks into one similarity matrix.
pub fn late_fuse(networks: &[&Array2<f64>], cfg: &PipelineConfig) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = networks.iter().map(|m| m.view()).collect();
    late_fuse_scores(&views, cfg.late_knn(), cfg.late_iters)
}

/// The similarity matrix `mode` ranks by.
pub fn similarity_for(scores: &ScoreMatrices, mode: EvalMode, cfg: &PipelineConfig) -> Result<Array2<f64>> {
    match mode {
        EvalMode::Channel(c) => Ok(scores.get(c)?.clone()),
        _ => {
            let nets = mode
                .channels()
                .into_iter()
                .map(|c| scores.get(c))
                .collect::<Result<Vec<_>>>()?;
            late_fuse(&nets, cfg)
        }
    }
}

/// Fuses (when `mode` asks for it) and evaluates.
pub fn fuse_and_rank(
    scores: &ScoreMatrices,
    songs: &[SongMeta],
    mode: EvalMode,
    cfg: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if songs.iter().map(|s| &s.song_id).ne(scores.song_ids.iter()) {
        return Err(Error::DimensionMismatch(
            "song metadata and score matrices list different songs".into(),
        ));
    }
    let sim = similarity_for(scores, mode, cfg)?;
    evaluate(sim.view(), songs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn metas(cliques: &[&str]) -> Vec<SongMeta> {
        cliques
            .iter()
            .enumerate()
            .map(|(i, c)| SongMeta::new(format!("s{i}"), *c))
            .collect()
    }

    #[test]
    fn perfect_ranking() {
        let songs = metas(&["a", "a", "b", "b"]);
        let sim = array![
            [0.0, 9.0, 1.0, 2.0],
            [9.0, 0.0, 3.0, 1.0],
            [1.0, 3.0, 0.0, 8.0],
            [2.0, 1.0, 8.0, 0.0]
        ];
        let r = evaluate(sim.view(), &songs, &EvalOptions::default()).unwrap();
        assert_eq!((r.mean_rank, r.mean_reciprocal_rank, r.top1, r.top10), (1.0, 1.0, 4, 4));
    }

    #[test]
    fn ranks_one_and_four() {
        // queries s0 (mate s1 at rank 1) and s1 (mate s0 behind s2, s3, s4)
        let songs = metas(&["a", "a", "x", "y", "z"]);
        let mut sim = Array2::zeros((5, 5));
        let set = |m: &mut Array2<f64>, i: usize, j: usize, v: f64| {
            m[[i, j]] = v;
            m[[j, i]] = v;
        };
        set(&mut sim, 0, 1, 5.0);
        for (k, v) in [(2, 8.0), (3, 7.0), (4, 6.0)] {
            set(&mut sim, 1, k, v);
            set(&mut sim, 0, k, 1.0);
        }
        let r = evaluate(sim.view(), &songs, &EvalOptions::default()).unwrap();
        assert_eq!(r.singletons, vec!["s2", "s3", "s4"]);
        assert_eq!(r.queries.iter().map(|q| q.rank).collect::<Vec<_>>(), vec![1, 4]);
        assert_eq!(r.mean_reciprocal_rank, 0.625);
        assert_eq!(r.mean_rank, 2.5);
    }

    #[test]
    fn first_correct_counts_only() {
        let songs = metas(&["a", "a", "a", "b"]);
        // for s0: s3 first, then s1, then s2
        let sim = array![
            [0.0, 5.0, 1.0, 9.0],
            [5.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [9.0, 0.0, 0.0, 0.0]
        ];
        let r = evaluate(sim.view(), &songs, &EvalOptions::default()).unwrap();
        assert_eq!(r.queries[0].rank, 2);
    }

    #[test]
    fn ties_break_by_song_id_and_are_flagged() {
        let songs = vec![
            SongMeta::new("q", "a"),
            SongMeta::new("z", "a"),
            SongMeta::new("b", "x"),
        ];
        let sim = array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let r = evaluate(sim.view(), &songs, &EvalOptions::default()).unwrap();
        // "b" sorts before "z"
        assert_eq!(r.queries[0].rank, 2);
        assert!(r.queries[0].tie_broken);
    }

    #[test]
    fn average_precision_by_hand() {
        let songs = metas(&["a", "a", "a", "b", "b"]);
        // s0 ranks: s1 (hit), s3, s2 (hit) -> AP = (1 + 2/3) / 2
        let sim = array![
            [0.0, 9.0, 5.0, 7.0, 1.0],
            [9.0, 0.0, 8.0, 1.0, 1.0],
            [5.0, 8.0, 0.0, 1.0, 1.0],
            [7.0, 1.0, 1.0, 0.0, 9.0],
            [1.0, 1.0, 1.0, 9.0, 0.0]
        ];
        let opts = EvalOptions {
            map_cliques: vec!["a".into()],
        };
        let r = evaluate(sim.view(), &songs, &opts).unwrap();
        // s1: s0, s2 -> 1; s2: s1, s0 -> 1
        let expect = ((1.0 + 2.0 / 3.0) / 2.0 + 1.0 + 1.0) / 3.0;
        assert!((r.map["a"] - expect).abs() < 1e-15);
    }

    #[test]
    fn two_set_protocol() {
        let mut songs = metas(&["a", "a", "b", "b"]);
        for (s, l) in songs
            .iter_mut()
            .zip([SetLabel::A, SetLabel::B, SetLabel::A, SetLabel::B])
        {
            s.set = Some(l);
        }
        // s2's best B song is s1 (wrong clique)
        let sim = array![
            [0.0, 5.0, 0.0, 1.0],
            [5.0, 0.0, 6.0, 0.0],
            [0.0, 6.0, 0.0, 2.0],
            [1.0, 0.0, 2.0, 0.0]
        ];
        let r = evaluate(sim.view(), &songs, &EvalOptions::default()).unwrap();
        assert_eq!(r.set_protocol, Some(SetProtocol { correct: 1, queries: 2 }));
    }

    #[test]
    fn permuting_songs_keeps_metrics() {
        let songs = metas(&["a", "a", "b", "b", "c", "c"]);
        let sim = Array2::from_shape_fn((6, 6), |(i, j)| {
            if i == j {
                0.0
            } else {
                ((i * 7 + j * 7 + i * j) % 11) as f64
            }
        });
        let perm = [3, 0, 5, 1, 4, 2];
        let psim = Array2::from_shape_fn((6, 6), |(i, j)| sim[[perm[i], perm[j]]]);
        let psongs: Vec<SongMeta> = perm.iter().map(|&p| songs[p].clone()).collect();
        let a = evaluate(sim.view(), &songs, &EvalOptions::default()).unwrap();
        let b = evaluate(psim.view(), &psongs, &EvalOptions::default()).unwrap();
        assert_eq!(a.mean_reciprocal_rank, b.mean_reciprocal_rank);
        for q in &a.queries {
            let other = b.queries.iter().find(|x| x.song_id == q.song_id).unwrap();
            assert_eq!(q.rank, other.rank);
        }
    }

    #[test]
    fn single_network_fusion_is_rejected() {
        let m = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            late_fuse(&[&m], &PipelineConfig::default()),
            Err(Error::TooFewNetworks(1))
        ));
    }

    #[test]
    fn mode_names() {
        assert_eq!("early+late".parse::<EvalMode>().unwrap(), EvalMode::EarlyPlusLate);
        assert_eq!(
            "hpcp".parse::<EvalMode>().unwrap(),
            EvalMode::Channel(ScoreChannel::Hpcp)
        );
        assert!("bogus".parse::<EvalMode>().is_err());
    }
}
