//! `coverfuse` command line.
//!
//! Exit codes: 0 on success (warnings allowed), 1 on usage errors, 2 on data errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::warn;

use coverfuse::audio::{load_audio, write_wav};
use coverfuse::pipeline::{
    self, cache::write_container, CorpusRun, DumpSelection, EvalMode, EvalOptions, ManifestEntry, PipelineConfig,
    ScoreChannel, ScoreMatrices, ScoreOptions, SongFeatures, SongMeta,
};
use coverfuse::synth::{corpus_plan, render, SynthConfig};
use coverfuse::Error;

const SCORES_FILE: &str = "scores.cfse";
const SCORES_CSV: &str = "scores.csv";
const SONGS_FILE: &str = "songs.json";

#[derive(Parser)]
#[command(
    name = "coverfuse",
    version,
    about = "Cover song identification by similarity network fusion"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Fraction of mutual nearest neighbors kept when binarizing.
    #[arg(long, global = true, default_value_t = 0.1)]
    kappa: f64,
    /// Beats per block.
    #[arg(long, global = true, default_value_t = 20)]
    block_beats: usize,
    /// Neighbors for kernel autotuning and diffusion.
    #[arg(long, global = true, default_value_t = 20)]
    knn: usize,
    /// Neighbors for late fusion only (defaults to --knn).
    #[arg(long, global = true)]
    late_knn: Option<usize>,
    #[arg(long, global = true, default_value_t = 3)]
    early_iters: usize,
    #[arg(long, global = true, default_value_t = 20)]
    late_iters: usize,
    /// Comma-separated tempo biases in bpm.
    #[arg(long, global = true, value_delimiter = ',', default_value = "60,120,180")]
    tempo_biases: Vec<u32>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Seed of the synthetic corpus generator.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Global {
    fn config(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            kappa: self.kappa,
            knn: self.knn,
            late_knn: self.late_knn,
            early_iters: self.early_iters,
            late_iters: self.late_iters,
            tempo_biases: self.tempo_biases.clone(),
            ..PipelineConfig::default()
        };
        cfg.blocks.beats_per_block = self.block_beats;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract features for every song of a manifest into a cache directory.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one pair. Each song is an audio file, a cache file or a song id in --cache.
    ScorePair {
        a: String,
        b: String,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        dump_csm: bool,
        #[arg(long)]
        dump_fusion: bool,
        #[arg(long)]
        dump_sw: bool,
        /// Container file receiving the dumped matrices.
        #[arg(long, default_value = "pair_dump.cfse")]
        dump_out: PathBuf,
    },
    /// Score every pair of cached songs.
    Rank {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mfcc,ssm,hpcp,early")]
        channels: Vec<String>,
        /// Output directory for score matrices.
        #[arg(long, default_value = "scores")]
        out: PathBuf,
        /// Resumable progress file (defaults to <out>/checkpoint.jsonl).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many new pairs; rerun to resume.
        #[arg(long)]
        pair_limit: Option<usize>,
    },
    /// Evaluate score matrices, optionally after late fusion.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// mfcc, ssm, hpcp, early, late or early+late.
        #[arg(long, default_value = "early+late")]
        mode: String,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Cliques to report mean average precision for.
        #[arg(long, value_delimiter = ',')]
        map_cliques: Vec<String>,
    },
    /// Write a synthetic corpus (WAV files plus manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        cliques: usize,
        #[arg(long, default_value_t = 2)]
        versions: usize,
        #[arg(long, default_value_t = 4)]
        percussive: usize,
        /// Unrelated percussion-only songs.
        #[arg(long, default_value_t = 18)]
        distractors: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(err) if !err.is_data_error() => 1,
        _ => 2,
    }
}

/// An argument problem found after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.global.config();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    match &cli.command {
        Command::Extract { manifest, out } => extract(manifest, out, &cfg),
        Command::ScorePair {
            a,
            b,
            cache,
            dump_csm,
            dump_fusion,
            dump_sw,
            dump_out,
        } => {
            let what = DumpSelection {
                csm: *dump_csm,
                fusion: *dump_fusion,
                sw: *dump_sw,
            };
            score_pair(a, b, cache.as_deref(), &what, dump_out, &cfg)
        }
        Command::Rank {
            cache,
            channels,
            out,
            checkpoint,
            pair_limit,
        } => {
            let channels = channels
                .iter()
                .map(|c| c.parse::<ScoreChannel>().map_err(|e| usage(e.to_string())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let opts = ScoreOptions {
                workers: cli.global.workers,
                checkpoint: Some(checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.jsonl"))),
                pair_limit: *pair_limit,
            };
            rank(cache, &channels, out, &opts, &cfg)
        }
        Command::Eval {
            scores,
            mode,
            report,
            map_cliques,
        } => {
            let mode: EvalMode = mode.parse().map_err(|e: Error| usage(e.to_string()))?;
            eval(scores, mode, report.as_deref(), map_cliques, &cfg)
        }
        Command::Synth {
            out,
            cliques,
            versions,
            percussive,
            distractors,
        } => {
            let scfg = SynthConfig {
                cliques: *cliques,
                versions_per_clique: *versions,
                percussive_versions: *percussive,
                percussive_distractors: *distractors,
                seed: cli.global.seed,
                ..SynthConfig::default()
            };
            synth(out, &scfg)
        }
    }
}

fn extract(manifest: &Path, out: &Path, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let entries = pipeline::load_manifest(manifest)?;
    let report = pipeline::extract_features(&entries, out, cfg, None)?;
    for f in &report.failures {
        warn!("failed to extract {} ({}): {}", f.song_id, f.path.display(), f.error);
    }
    fs::write(out.join("extract_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "extracted {}, up to date {}, failed {}",
        report.extracted.len(),
        report.skipped.len(),
        report.failures.len()
    );
    Ok(())
}

fn load_song(arg: &str, cache: Option<&Path>, cfg: &PipelineConfig) -> anyhow::Result<SongFeatures> {
    let path = Path::new(arg);
    if path.is_file() {
        if path.extension().and_then(|e| e.to_str()) == Some("cfse") {
            return Ok(pipeline::load_features(path)?);
        }
        let clip = load_audio(path, cfg.sample_rate).with_context(|| format!("loading {arg}"))?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or(arg);
        return Ok(pipeline::extract_song_features(&clip, SongMeta::new(id, id), cfg)?);
    }
    let Some(dir) = cache else {
        bail!(usage(format!(
            "{arg} is not a file; pass --cache to look it up by song id"
        )));
    };
    let p = pipeline::cache_path(dir, arg);
    if !p.exists() {
        return Err(Error::MissingFeatures(arg.to_string()).into());
    }
    Ok(pipeline::load_features(&p)?)
}

fn score_pair(
    a: &str,
    b: &str,
    cache: Option<&Path>,
    what: &DumpSelection,
    dump_out: &Path,
    cfg: &PipelineConfig,
) -> anyhow::Result<()> {
    let (fa, fb) = (load_song(a, cache, cfg)?, load_song(b, cache, cfg)?);
    let (pa, pb) = (pipeline::prepare_song(&fa, cfg), pipeline::prepare_song(&fb, cfg));
    let score = pipeline::score_pair(&pa, &pb, cfg, &ScoreChannel::ALL)?;
    println!("{}", serde_json::to_string_pretty(&score)?);
    if what.csm || what.fusion || what.sw {
        let Some(biases) = score.channels[&ScoreChannel::Early].biases else {
            return Err(Error::TooFewBeats {
                onsets: 0,
                needed: cfg.blocks.beats_per_block + 1,
            }
            .into());
        };
        let dump = pipeline::dump_pair(&pa, &pb, biases, cfg, what)?;
        let meta = serde_json::json!({
            "song_a": fa.meta.song_id,
            "song_b": fb.meta.song_id,
            "tempo_biases": [dump.biases.0, dump.biases.1],
            "scores": dump.scores,
        });
        write_container(dump_out, meta, &dump.tensors)?;
        println!("wrote {}", dump_out.display());
    }
    Ok(())
}

fn rank(
    cache: &Path,
    channels: &[ScoreChannel],
    out: &Path,
    opts: &ScoreOptions,
    cfg: &PipelineConfig,
) -> anyhow::Result<()> {
    let ids = pipeline::cached_song_ids(cache)?;
    if ids.len() < 2 {
        return Err(Error::MissingFeatures(format!("fewer than two cached songs in {}", cache.display())).into());
    }
    let features = pipeline::load_corpus(cache, &ids)?;
    let metas: Vec<SongMeta> = features.iter().map(|f| f.meta.clone()).collect();
    let prepared = pipeline::prepare_corpus(&features, cfg, opts.workers)?;
    drop(features);
    for p in &prepared {
        for (bias, why) in &p.skipped {
            warn!("{}: tempo bias {bias} unusable: {why}", p.song_id());
        }
    }
    fs::create_dir_all(out)?;
    match pipeline::score_corpus(&prepared, cfg, channels, opts)? {
        CorpusRun::Complete(m) => {
            m.save(&out.join(SCORES_FILE))?;
            m.write_csv(&out.join(SCORES_CSV))?;
            fs::write(out.join(SONGS_FILE), serde_json::to_string_pretty(&metas)?)?;
            println!("scored {} songs into {}", ids.len(), out.display());
        }
        CorpusRun::Interrupted { scored, total } => {
            println!("stopped after {scored} of {total} pairs; rerun to resume");
        }
    }
    Ok(())
}

fn eval(
    dir: &Path,
    mode: EvalMode,
    report: Option<&Path>,
    map_cliques: &[String],
    cfg: &PipelineConfig,
) -> anyhow::Result<()> {
    let scores = ScoreMatrices::load(&dir.join(SCORES_FILE))?;
    let songs: Vec<SongMeta> = serde_json::from_str(&fs::read_to_string(dir.join(SONGS_FILE))?)?;
    let opts = EvalOptions {
        map_cliques: map_cliques.to_vec(),
    };
    let r = pipeline::fuse_and_rank(&scores, &songs, mode, cfg, &opts)?;
    if !r.singletons.is_empty() {
        warn!(
            "{} songs without a clique-mate were not used as queries",
            r.singletons.len()
        );
    }
    println!(
        "{mode}: MR {:.3} MRR {:.4} top-1 {} top-10 {} ({} queries)",
        r.mean_rank,
        r.mean_reciprocal_rank,
        r.top1,
        r.top10,
        r.queries.len()
    );
    for (clique, map) in &r.map {
        println!("MAP {clique}: {map:.4}");
    }
    if let Some(p) = r.set_protocol {
        println!("set protocol: {} of {} correct", p.correct, p.queries);
    }
    if let Some(path) = report {
        fs::write(path, serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn synth(out: &Path, scfg: &SynthConfig) -> anyhow::Result<()> {
    let plan = corpus_plan(scfg).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for spec in &plan {
        let clip = render(scfg, spec)?;
        let file = format!("{}.wav", spec.song_id);
        write_wav(out.join(&file), &clip)?;
        entries.push(ManifestEntry {
            meta: SongMeta::new(&spec.song_id, &spec.clique_id),
            path: PathBuf::from(file),
        });
    }
    pipeline::write_manifest(out.join("manifest.json"), &entries)?;
    fs::write(out.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
    println!("wrote {} songs to {}", plan.len(), out.display());
    Ok(())
}
