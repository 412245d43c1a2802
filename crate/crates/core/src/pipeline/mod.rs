//! Corpus-level orchestration: extraction with a per-song feature cache,
//! pairwise scoring over tempo-bias combinations, fusion and evaluation.

pub mod cache;
mod config;
mod eval;
mod features;
mod manifest;
mod scoring;

pub use config::PipelineConfig;
pub use eval::{
    evaluate, fuse_and_rank, late_fuse, similarity_for, EvalMode, EvalOptions, EvalReport, QueryResult, SetProtocol,
};
pub use features::{
    cache_path, cached_song_ids, extract_features, extract_song_features, load_corpus, load_features, save_features,
    BiasTrack, ExtractFailure, ExtractReport, SongFeatures,
};
pub use manifest::{load_manifest, validate_entries, write_manifest, ManifestEntry, SetLabel, SongMeta};
pub use scoring::{
    dump_pair, prepare_corpus, prepare_song, score_corpus, score_pair, ChannelScore, CorpusRun, DumpSelection,
    PairDump, PairScore, PreparedBias, PreparedSong, ScoreChannel, ScoreMatrices, ScoreOptions,
};
