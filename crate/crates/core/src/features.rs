//! Hand-crafted descriptors: track functions, per-bar pitch/onset features and
//! a template chord recognizer.

use serde::{Deserialize, Serialize};

use crate::score::{
    ChordSymbol, ClipGrid, Piece, Quality, BEATS_PER_BAR, CHORD_VOCABULARY, CLIP_STEPS, PITCHES, STEPS_PER_BAR,
    STEPS_PER_BEAT,
};
use crate::{Error, Result};

/// Onset counts per step saturate here in the time function.
pub const TIME_FN_CLIP: usize = 4;
pub const FUNCTION_DIM: usize = PITCHES + CLIP_STEPS;

/// Pitch function (share of the 32 steps each pitch sounds) and time function
/// (onsets per step, clipped at 4 and scaled to `[0, 1]`) of one track clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFunction {
    pub pitch_fn: Vec<f64>,
    pub time_fn: Vec<f64>,
}

impl TrackFunction {
    pub fn zeros() -> Self {
        TrackFunction {
            pitch_fn: vec![0.0; PITCHES],
            time_fn: vec![0.0; CLIP_STEPS],
        }
    }

    /// `pitch_fn ++ time_fn`, the 160-D descriptor used for similarity search.
    pub fn concat(&self) -> Vec<f64> {
        self.pitch_fn.iter().chain(&self.time_fn).copied().collect()
    }
}

pub fn track_function(clip: &ClipGrid, track: usize) -> Result<TrackFunction> {
    if track >= clip.track_count() {
        return Err(Error::IndexOutOfRange {
            what: "track",
            index: track,
            len: clip.track_count(),
        });
    }
    let (onset, sustain) = clip.track_planes(track);
    let mut f = TrackFunction::zeros();
    for s in 0..CLIP_STEPS {
        let mut onsets = 0usize;
        for p in 0..PITCHES {
            let i = s * PITCHES + p;
            if onset[i] {
                onsets += 1;
            }
            if onset[i] || sustain[i] {
                f.pitch_fn[p] += 1.0;
            }
        }
        f.time_fn[s] = onsets.min(TIME_FN_CLIP) as f64 / TIME_FN_CLIP as f64;
    }
    for v in &mut f.pitch_fn {
        *v /= CLIP_STEPS as f64;
    }
    Ok(f)
}

/// Cosine similarity with the zero-vector convention: 1 if both vectors are
/// zero, 0 if exactly one is.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    match (nu == 0.0, nv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (nu.sqrt() * nv.sqrt()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarFeatures {
    /// Sounding steps per pitch class.
    pub pitch_hist: [f64; 12],
    /// Onsets per grid position.
    pub voice_intensity: [u32; STEPS_PER_BAR],
    pub groove: [bool; STEPS_PER_BAR],
}

impl BarFeatures {
    fn empty() -> Self {
        BarFeatures {
            pitch_hist: [0.0; 12],
            voice_intensity: [0; STEPS_PER_BAR],
            groove: [false; STEPS_PER_BAR],
        }
    }

    pub fn voice_vector(&self) -> [f64; STEPS_PER_BAR] {
        self.voice_intensity.map(f64::from)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Track-wise downmix of every track.
    Mixture,
    Track(usize),
}

/// Cell-level occupancy of one bar: which (step, pitch) cells sound and which start a note.
struct BarRoll {
    active: Vec<bool>,
    onset: Vec<bool>,
}

fn bar_rolls(piece: &Piece, scope: Scope) -> Result<Vec<BarRoll>> {
    let piece = piece.to_four_four();
    let tracks: Vec<_> = match scope {
        Scope::Mixture => piece.tracks.iter().collect(),
        Scope::Track(n) => vec![piece.tracks.get(n).ok_or(Error::IndexOutOfRange {
            what: "track",
            index: n,
            len: piece.tracks.len(),
        })?],
    };
    let size = STEPS_PER_BAR * PITCHES;
    let mut rolls: Vec<BarRoll> = (0..piece.bar_count)
        .map(|_| BarRoll {
            active: vec![false; size],
            onset: vec![false; size],
        })
        .collect();
    let total = piece.bar_count * STEPS_PER_BAR;
    for track in tracks {
        for note in &track.notes {
            let p = usize::from(note.pitch);
            let start = note.onset as usize;
            for t in start..(note.end() as usize).min(total) {
                let roll = &mut rolls[t / STEPS_PER_BAR];
                let i = (t % STEPS_PER_BAR) * PITCHES + p;
                roll.active[i] = true;
                if t == start {
                    roll.onset[i] = true;
                }
            }
        }
    }
    Ok(rolls)
}

fn features_of(roll: &BarRoll) -> BarFeatures {
    let mut f = BarFeatures::empty();
    for q in 0..STEPS_PER_BAR {
        for p in 0..PITCHES {
            let i = q * PITCHES + p;
            if roll.active[i] {
                f.pitch_hist[p % 12] += 1.0;
            }
            if roll.onset[i] {
                f.voice_intensity[q] += 1;
            }
        }
        f.groove[q] = f.voice_intensity[q] >= 1;
    }
    f
}

/// Features of every bar of the piece for the given scope.
pub fn piece_bar_features(piece: &Piece, scope: Scope) -> Result<Vec<BarFeatures>> {
    Ok(bar_rolls(piece, scope)?.iter().map(features_of).collect())
}

pub fn bar_features(piece: &Piece, bar: usize, scope: Scope) -> Result<BarFeatures> {
    let mut all = piece_bar_features(piece, scope)?;
    if bar >= all.len() {
        return Err(Error::IndexOutOfRange {
            what: "bar",
            index: bar,
            len: all.len(),
        });
    }
    Ok(all.swap_remove(bar))
}

/// Pitch-class profile per beat: number of steps on which each pitch class
/// sounds in any voice or octave.
pub fn beat_profiles(piece: &Piece) -> Vec<[u32; 12]> {
    let piece = piece.to_four_four();
    let beats = piece.bar_count * BEATS_PER_BAR;
    let total = beats * STEPS_PER_BEAT;
    let mut step_masks = vec![0u16; total];
    for track in &piece.tracks {
        for note in &track.notes {
            let bit = 1u16 << (note.pitch % 12);
            for t in note.onset as usize..(note.end() as usize).min(total) {
                step_masks[t] |= bit;
            }
        }
    }
    step_masks
        .chunks(STEPS_PER_BEAT)
        .map(|steps| {
            let mut profile = [0u32; 12];
            for &mask in steps {
                for (pc, slot) in profile.iter_mut().enumerate() {
                    if mask & (1 << pc) != 0 {
                        *slot += 1;
                    }
                }
            }
            profile
        })
        .collect()
}

/// Scores one chord template against a profile.
///
/// Returns `(2·inside − outside, missing)` where `inside`/`outside` is the
/// profile mass on chord tones / non-chord tones and `missing` counts chord
/// tones absent from the profile. The first component is twice the unnormalized
/// `inside − 0.5·outside`, which ranks identically to the mass-normalized score.
pub fn template_score(profile: &[u32; 12], chord: ChordSymbol) -> (i64, u32) {
    let mask = chord.tone_mask();
    let mut inside = 0i64;
    let mut outside = 0i64;
    let mut missing = 0;
    for (pc, &w) in profile.iter().enumerate() {
        let tone = mask & (1 << pc) != 0;
        if tone {
            inside += i64::from(w);
            if w == 0 {
                missing += 1;
            }
        } else {
            outside += i64::from(w);
        }
    }
    (2 * inside - outside, missing)
}

/// Best of the 96 templates for a non-silent profile: highest score, then fewest
/// missing chord tones, then lowest root, then quality order.
pub fn best_chord(profile: &[u32; 12]) -> ChordSymbol {
    let mut best = ChordSymbol::new(0, Quality::Major);
    let mut best_key = (i64::MIN, 0u32);
    for index in 0..CHORD_VOCABULARY {
        let chord = ChordSymbol::from_index(index).expect("index in vocabulary");
        let (score, missing) = template_score(profile, chord);
        if score > best_key.0 || (score == best_key.0 && missing < best_key.1) {
            best = chord;
            best_key = (score, missing);
        }
    }
    best
}

/// One chord per beat of the piece's mixture. Silent beats repeat the previous
/// chord; leading silence is `C:M`.
pub fn recognize_chords(piece: &Piece) -> Vec<ChordSymbol> {
    let mut prev = ChordSymbol::new(0, Quality::Major);
    beat_profiles(piece)
        .iter()
        .map(|profile| {
            if profile.iter().any(|&w| w > 0) {
                prev = best_chord(profile);
            }
            prev
        })
        .collect()
}
