//! Synthetic cover-song corpus.
//!
//! Each clique is a short composition: a sectioned form, a chord
//! progression, a melody, a bass line, drum patterns and a per-section
//! arrangement (which parts play). Versions of a clique render the same
//! score with a transposition, a tempo scale, new instrument timbres, a
//! perturbed drum part and additive white noise.
//!
//! The percussive clique and its distractors hold unpitched noise-burst
//! rhythms only.
//!
//! Versions render independently from `(seed, clique, version)`, so a corpus
//! can be streamed one song at a time.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Clique id of the percussion-only clique; distractors append a number.
pub const PERCUSSIVE_CLIQUE: &str = "perc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub cliques: usize,
    pub versions_per_clique: usize,
    /// Versions of the percussion-only clique; 0 leaves it out.
    pub percussive_versions: usize,
    /// Unrelated percussion-only songs, each its own clique.
    pub percussive_distractors: usize,
    pub sample_rate: u32,
    pub bars_per_section: usize,
    /// Base tempo range in bpm.
    pub tempo_range: (f64, f64),
    /// Semitone range of cover transpositions, applied with a random sign.
    pub transpose_range: (i32, i32),
    /// Multiplicative tempo range of covers.
    pub tempo_scale_range: (f64, f64),
    pub snr_db_range: (f64, f64),
    /// Probability of flipping each drum step in a cover.
    pub drum_variation: f64,
    /// Probability that a cover re-draws which parts play in a section.
    pub rearrange_prob: f64,
    /// Probability that a cover rewrites half of a section's chords and
    /// ornaments its melody.
    pub reharmonize_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cliques: 20,
            versions_per_clique: 2,
            percussive_versions: 4,
            percussive_distractors: 18,
            sample_rate: 44100,
            bars_per_section: 8,
            tempo_range: (90.0, 140.0),
            transpose_range: (1, 5),
            tempo_scale_range: (0.7, 1.3),
            snr_db_range: (20.0, 30.0),
            drum_variation: 0.1,
            rearrange_prob: 0.3,
            reharmonize_prob: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("synth: {what}")));
        if self.versions_per_clique == 0 || self.bars_per_section == 0 {
            return bad("versions and bars per section must be positive");
        }
        if self.sample_rate < 8000 {
            return bad("sample rate below 8 kHz");
        }
        let (t0, t1) = self.tempo_range;
        let (s0, s1) = self.tempo_scale_range;
        if !(t0 > 0.0 && t0 <= t1 && s0 > 0.0 && s0 <= s1) {
            return bad("tempo ranges must be positive and ordered");
        }
        let (k0, k1) = self.transpose_range;
        if k0 < 0 || k0 > k1 || self.snr_db_range.0 > self.snr_db_range.1 {
            return bad("transpose and SNR ranges must be ordered");
        }
        let probs = [self.drum_variation, self.rearrange_prob, self.reharmonize_prob];
        if !probs.iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("variation probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

/// How one version departs from its clique's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSpec {
    pub song_id: String,
    pub clique_id: String,
    pub clique_index: usize,
    /// 0 is the original; covers perturb it.
    pub version: usize,
    pub percussive: bool,
    pub transpose: i32,
    pub tempo_scale: f64,
    pub snr_db: f64,
}

fn sub_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(1_000_003).wrapping_add(b));
    rng
}

/// Every version in the corpus: pitched cliques, the percussive clique, then
/// the percussive distractors.
pub fn corpus_plan(cfg: &SynthConfig) -> Result<Vec<VersionSpec>> {
    cfg.validate()?;
    let mut plan = Vec::new();
    let mut push = |clique_index: usize, clique_id: String, song_id: String, version: usize, percussive: bool| {
        let mut rng = sub_rng(cfg.seed, clique_index as u64, 1 + version as u64);
        let (transpose, tempo_scale) = if version == 0 {
            (0, 1.0)
        } else {
            let k = rng.random_range(cfg.transpose_range.0.max(1)..=cfg.transpose_range.1.max(1));
            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
            let scale = rng.random_range(cfg.tempo_scale_range.0..=cfg.tempo_scale_range.1);
            (if percussive { 0 } else { sign * k }, scale)
        };
        plan.push(VersionSpec {
            song_id,
            clique_id,
            clique_index,
            version,
            percussive,
            transpose,
            tempo_scale,
            snr_db: rng.random_range(cfg.snr_db_range.0..=cfg.snr_db_range.1),
        });
    };
    for c in 0..cfg.cliques {
        for v in 0..cfg.versions_per_clique {
            push(c, format!("c{c:02}"), format!("c{c:02}_v{v}"), v, false);
        }
    }
    for v in 0..cfg.percussive_versions {
        push(
            cfg.cliques,
            PERCUSSIVE_CLIQUE.into(),
            format!("{PERCUSSIVE_CLIQUE}_v{v}"),
            v,
            true,
        );
    }
    for d in 0..cfg.percussive_distractors {
        let id = format!("{PERCUSSIVE_CLIQUE}{d:02}");
        push(cfg.cliques + 1 + d, id.clone(), id, 0, true);
    }
    Ok(plan)
}

/// Harmonic amplitudes and decay time (s) of a pitched instrument.
#[derive(Debug, Clone)]
struct Timbre {
    harmonics: Vec<f64>,
    decay: f64,
}

impl Timbre {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=10);
        let tilt = rng.random_range(0.5..2.0);
        let odd_only = rng.random_bool(0.2);
        let harmonics = (1..=n)
            .map(|h| {
                if odd_only && h % 2 == 0 {
                    0.0
                } else {
                    (h as f64).powf(-tilt) * rng.random_range(0.3..1.0)
                }
            })
            .collect();
        Self {
            harmonics,
            decay: rng.random_range(0.3..2.5),
        }
    }
}

/// Decay times (s) and gains of the three drum voices.
#[derive(Debug, Clone)]
struct DrumKit {
    decays: [f64; 3],
    gains: [f64; 3],
}

impl DrumKit {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            decays: [
                rng.random_range(0.05..0.15),
                rng.random_range(0.03..0.1),
                rng.random_range(0.01..0.03),
            ],
            gains: [
                rng.random_range(0.7..1.0),
                rng.random_range(0.5..1.0),
                rng.random_range(0.2..0.5),
            ],
        }
    }
}

const STEPS_PER_BAR: usize = 16;
const BEATS_PER_BAR: usize = 4;

/// A note in beats from the start of the song.
#[derive(Debug, Clone, Copy)]
struct Note {
    start: f64,
    length: f64,
    midi: i32,
    gain: f64,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    beat: f64,
    voice: usize,
}

/// The pitched and percussive events of one version at its clique's base tempo.
struct Score {
    bpm: f64,
    beats: f64,
    melody: Vec<Note>,
    chords: Vec<Note>,
    bass: Vec<Note>,
    hits: Vec<Hit>,
}

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];
const FORMS: [&[usize]; 5] = [
    &[0, 1, 0, 1],
    &[0, 0, 1, 0],
    &[0, 1, 2, 1],
    &[0, 1, 1, 2],
    &[0, 1, 2, 0],
];
/// Eighth-note durations a melody note may take.
const MELODY_LENGTHS: [usize; 6] = [1, 1, 2, 2, 2, 4];

fn degree_pitch(scale: &[i32; 7], root: i32, degree: i32) -> i32 {
    let octave = degree.div_euclid(7);
    root + 12 * octave + scale[degree.rem_euclid(7) as usize]
}

/// Step grid of the hi-hat-like voice.
#[derive(Debug, Clone, Copy)]
enum HatGrid {
    Quarters,
    Eighths,
    Offbeats,
    Sparse,
    Silent,
}

const HAT_GRIDS: [HatGrid; 5] = [
    HatGrid::Quarters,
    HatGrid::Eighths,
    HatGrid::Offbeats,
    HatGrid::Sparse,
    HatGrid::Silent,
];
const VOICE_SETS: [[bool; 3]; 5] = [
    [true, true, true],
    [true, true, false],
    [false, false, true],
    [true, false, true],
    [false, true, true],
];

fn drum_pattern(rng: &mut ChaCha8Rng, hat: HatGrid, busy: f64) -> Vec<[bool; 3]> {
    (0..STEPS_PER_BAR)
        .map(|s| {
            let kick = s == 0 || (s % 4 == 0 && rng.random_bool((0.4 * busy).min(1.0)));
            let snare = (s % 8 == 4 && rng.random_bool(0.85)) || (!kick && rng.random_bool((0.08 * busy).min(1.0)));
            let hat = match hat {
                HatGrid::Quarters => s % 4 == 0,
                HatGrid::Eighths => s % 2 == 0,
                HatGrid::Offbeats => s % 4 == 2,
                HatGrid::Sparse => rng.random_bool((0.3 * busy).min(1.0)),
                HatGrid::Silent => false,
            };
            [kick, snare, hat]
        })
        .collect()
}

/// Which parts play in a section.
#[derive(Debug, Clone, Copy)]
struct Arrangement {
    melody: bool,
    chords: bool,
    bass: bool,
    drums: bool,
    /// Kick, snare and hat switches.
    drum_voices: [bool; 3],
}

struct Section {
    chords: Vec<i32>,
    /// `(start eighth, length in eighths, scale degree)`.
    melody: Vec<(usize, usize, i32)>,
    drums: Vec<Vec<[bool; 3]>>,
    arrangement: Arrangement,
}

fn compose(cfg: &SynthConfig, spec: &VersionSpec) -> Score {
    let clique = spec.clique_index;
    let percussive = spec.percussive;
    let mut rng = sub_rng(cfg.seed, clique as u64, 1_000);
    let bpm = rng.random_range(cfg.tempo_range.0..=cfg.tempo_range.1);
    let form = FORMS[rng.random_range(0..FORMS.len())];
    let n_sections = form.iter().max().map_or(1, |m| m + 1);
    let bars = cfg.bars_per_section;
    let root = rng.random_range(50..62);
    let scale = if rng.random_bool(0.5) { &MAJOR } else { &MINOR };
    let hat = HAT_GRIDS[rng.random_range(0..HAT_GRIDS.len())];
    let busy = rng.random_range(0.5..1.5);

    let mut sections: Vec<Section> = (0..n_sections)
        .map(|_| {
            let chords = (0..bars).map(|_| rng.random_range(0..6)).collect();
            let mut melody = Vec::new();
            let mut degree = rng.random_range(7..12);
            let mut t = 0;
            while t < bars * 8 {
                let len = MELODY_LENGTHS[rng.random_range(0..MELODY_LENGTHS.len())];
                if !rng.random_bool(0.2) {
                    degree = (degree + rng.random_range(-3..=3)).clamp(4, 16);
                    melody.push((t, len, degree));
                }
                t += len;
            }
            // percussion-only songs get their sectional contrast from the drum part itself
            let (hat, busy, drum_voices) = if percussive {
                let voices = VOICE_SETS[rng.random_range(0..VOICE_SETS.len())];
                (
                    HAT_GRIDS[rng.random_range(0..HAT_GRIDS.len() - 1)],
                    rng.random_range(0.5..2.0),
                    voices,
                )
            } else {
                (hat, busy, [true; 3])
            };
            let drums = (0..2).map(|_| drum_pattern(&mut rng, hat, busy)).collect();
            let arrangement = Arrangement {
                melody: rng.random_bool(0.85),
                chords: rng.random_bool(0.8),
                bass: rng.random_bool(0.8),
                drums: percussive || rng.random_bool(0.75),
                drum_voices,
            };
            Section {
                chords,
                melody,
                drums,
                arrangement,
            }
        })
        .collect();
    if spec.version > 0 {
        let mut vary = sub_rng(cfg.seed, clique as u64, 2_000 + spec.version as u64);
        for bar in sections.iter_mut().flat_map(|s| s.drums.iter_mut()) {
            for (step, voices) in bar.iter_mut().enumerate() {
                for (voice, on) in voices.iter_mut().enumerate() {
                    let anchor = step == 0 && voice == 0;
                    if !anchor && vary.random_bool(cfg.drum_variation) {
                        *on = !*on;
                    }
                }
            }
        }
        // covers depart from the original in some sections only, and not all in the same way
        for section in sections.iter_mut().filter(|_| !percussive) {
            if vary.random_bool(cfg.rearrange_prob) {
                let arr = &mut section.arrangement;
                arr.melody = vary.random_bool(0.85);
                arr.chords = vary.random_bool(0.8);
                arr.bass = vary.random_bool(0.8);
                arr.drums = vary.random_bool(0.75);
            }
            if vary.random_bool(cfg.reharmonize_prob) {
                for chord in section.chords.iter_mut() {
                    if vary.random_bool(0.5) {
                        *chord = vary.random_range(0..6);
                    }
                }
                for note in section.melody.iter_mut() {
                    if vary.random_bool(0.5) {
                        note.2 = (note.2 + vary.random_range(-2..=2)).clamp(4, 16);
                    }
                }
            }
        }
    }

    let mut score = Score {
        bpm,
        beats: (form.len() * bars * BEATS_PER_BAR) as f64,
        melody: Vec::new(),
        chords: Vec::new(),
        bass: Vec::new(),
        hits: Vec::new(),
    };
    for (k, &sec) in form.iter().enumerate() {
        let section = &sections[sec];
        let arr = section.arrangement;
        let offset = (k * bars * BEATS_PER_BAR) as f64;
        for bar in 0..bars {
            let bar_start = offset + (bar * BEATS_PER_BAR) as f64;
            if arr.drums {
                for (s, voices) in section.drums[bar % 2].iter().enumerate() {
                    for (voice, &on) in voices.iter().enumerate() {
                        if on && arr.drum_voices[voice] {
                            score.hits.push(Hit {
                                beat: bar_start + s as f64 / 4.0,
                                voice,
                            });
                        }
                    }
                }
            }
            if percussive {
                continue;
            }
            let chord = section.chords[bar];
            if arr.chords {
                for (i, tone) in [0, 2, 4].into_iter().enumerate() {
                    score.chords.push(Note {
                        start: bar_start,
                        length: BEATS_PER_BAR as f64,
                        midi: degree_pitch(scale, root, chord + tone),
                        gain: 0.5 - 0.1 * i as f64,
                    });
                }
            }
            if arr.bass {
                for half in 0..2 {
                    score.bass.push(Note {
                        start: bar_start + 2.0 * half as f64,
                        length: 2.0,
                        midi: degree_pitch(scale, root - 12, chord),
                        gain: 1.0,
                    });
                }
            }
        }
        if percussive || !arr.melody {
            continue;
        }
        for &(t, len, degree) in &section.melody {
            score.melody.push(Note {
                start: offset + t as f64 / 2.0,
                length: len as f64 / 2.0,
                midi: degree_pitch(scale, root + 12, degree - 7),
                gain: 1.0,
            });
        }
    }
    score
}

fn midi_hz(midi: i32) -> f64 {
    440.0 * 2f64.powf((midi - 69) as f64 / 12.0)
}

/// Adds a harmonic note into `out` using one two-term recurrence oscillator per harmonic.
fn add_note(out: &mut [f64], sr: f64, start_s: f64, length_s: f64, hz: f64, gain: f64, timbre: &Timbre) {
    let start = (start_s * sr).round() as usize;
    if start >= out.len() {
        return;
    }
    let release = 0.03;
    let n = (((length_s + release) * sr) as usize).min(out.len() - start);
    let (attack_n, hold_n) = ((0.01 * sr) as usize, (length_s * sr) as usize);
    let env: Vec<f64> = (0..n)
        .map(|t| {
            let secs = t as f64 / sr;
            let a = if t < attack_n { t as f64 / attack_n as f64 } else { 1.0 };
            let r = if t > hold_n {
                1.0 - (t - hold_n) as f64 / (release * sr)
            } else {
                1.0
            };
            gain * a * r.max(0.0) * (-secs / timbre.decay).exp()
        })
        .collect();
    for (h, &amp) in timbre.harmonics.iter().enumerate() {
        let f = hz * (h + 1) as f64;
        if amp == 0.0 || f >= 0.45 * sr {
            continue;
        }
        let w = 2.0 * PI * f / sr;
        let c = 2.0 * w.cos();
        let (mut prev, mut cur) = (-w.sin(), 0.0);
        for (o, e) in out[start..start + n].iter_mut().zip(&env) {
            *o += amp * e * cur;
            let next = c * cur - prev;
            prev = cur;
            cur = next;
        }
    }
}

/// Spectral color of a noise burst.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Color {
    /// One-pole low-pass.
    Dark,
    White,
    /// First difference.
    Bright,
    /// Narrow band around the given center (Hz): low-passed noise on a cosine carrier.
    Band(f64),
}

/// Cutoff of the four cascaded one-pole filters that shape a `Band` burst.
const BAND_CUTOFF_HZ: f64 = 150.0;

/// Centers of the kick, snare and hat bands in unpitched songs. All sit above
/// the chroma range, so chroma only ever sees the white background noise.
const UNPITCHED_BANDS: [f64; 3] = [6_000.0, 6_800.0, 7_600.0];

fn noise(n: usize, sr: f64, color: Color, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = 1.0 - (-2.0 * PI * BAND_CUTOFF_HZ / sr).exp();
    let (mut lp, mut last, mut stages) = (0.0, 0.0, [0.0; 4]);
    let mut x: Vec<f64> = (0..n)
        .map(|t| {
            let white: f64 = rng.sample(StandardNormal);
            match color {
                Color::Dark => {
                    lp += 0.08 * (white - lp);
                    3.0 * lp
                }
                Color::White => white,
                Color::Bright => {
                    let d = white - last;
                    last = white;
                    0.5 * d
                }
                Color::Band(hz) => {
                    let mut v = white;
                    for s in &mut stages {
                        *s += a * (v - *s);
                        v = *s;
                    }
                    v * (2.0 * PI * hz * t as f64 / sr).cos()
                }
            }
        })
        .collect();
    if let Color::Band(_) = color {
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        if rms > 0.0 {
            x.iter_mut().for_each(|v| *v /= rms);
        }
    }
    x
}

/// Adds an exponentially decaying noise burst, optionally with a sine body.
#[allow(clippy::too_many_arguments)]
fn add_burst(
    out: &mut [f64],
    sr: f64,
    start_s: f64,
    decay_s: f64,
    gain: f64,
    color: Color,
    body_hz: Option<f64>,
    rng: &mut ChaCha8Rng,
) {
    let start = (start_s * sr).round() as usize;
    if start >= out.len() {
        return;
    }
    let n = ((6.0 * decay_s * sr) as usize).min(out.len() - start);
    for (t, x) in noise(n, sr, color, rng).into_iter().enumerate() {
        let secs = t as f64 / sr;
        let body = body_hz.map_or(0.0, |f| (2.0 * PI * f * secs).sin());
        out[start + t] += gain * (-secs / decay_s).exp() * (0.3 * x + body);
    }
}

/// Renders one version to mono audio.
pub fn render(cfg: &SynthConfig, spec: &VersionSpec) -> Result<AudioClip> {
    cfg.validate()?;
    let score = compose(cfg, spec);
    let sr = cfg.sample_rate as f64;
    let beat_s = 60.0 / (score.bpm * spec.tempo_scale);
    let len = ((score.beats * beat_s + 1.0) * sr) as usize;
    let mut out = vec![0.0; len];
    // instruments are drawn per version, so covers never share a timbre with the original
    let mut rng = sub_rng(cfg.seed, spec.clique_index as u64, 10_000 + spec.version as u64);
    let (lead, pad, low) = (
        Timbre::random(&mut rng),
        Timbre::random(&mut rng),
        Timbre::random(&mut rng),
    );
    let kit = DrumKit::random(&mut rng);
    let drum_level = if spec.percussive {
        0.5
    } else {
        rng.random_range(0.08..0.25)
    };

    if !spec.percussive {
        for (notes, timbre, gain) in [
            (&score.melody, &lead, 0.3),
            (&score.chords, &pad, 0.12),
            (&score.bass, &low, 0.25),
        ] {
            for note in notes {
                let hz = midi_hz(note.midi + spec.transpose);
                add_note(
                    &mut out,
                    sr,
                    note.start * beat_s,
                    note.length * beat_s,
                    hz,
                    gain * note.gain,
                    timbre,
                );
            }
        }
    }
    for hit in &score.hits {
        let at = hit.beat * beat_s;
        let g = drum_level * kit.gains[hit.voice];
        let d = kit.decays[hit.voice];
        let (color, body) = match (hit.voice, spec.percussive) {
            (v, true) => (Color::Band(UNPITCHED_BANDS[v]), None),
            (0, false) => (Color::Dark, Some(55.0)),
            (1, false) => (Color::White, None),
            _ => (Color::Bright, None),
        };
        add_burst(&mut out, sr, at, d, g, color, body, &mut rng);
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.7 / peak);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    let noise_std = rms / 10f64.powf(spec.snr_db / 20.0);
    for v in &mut out {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + noise_std * n).clamp(-1.0, 1.0);
    }
    AudioClip::new(out, cfg.sample_rate)
}
