//! Seeded synthetic music: chord progressions, piano textures, lead sheets and
//! small band arrangements. Used to build toy corpora, databases and fixtures.
//!
//! Every accompaniment texture sounds all chord tones inside every beat and no
//! note crosses a chord change, so template chord recognition on the output
//! recovers the generating chords.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig, CodecTrainConfig};
use crate::pipeline::prior_segment;
use crate::planner::PhraseDb;
use crate::prior::{Prior, PriorConfig, PriorTrainConfig};
use crate::Result;

use crate::score::{
    ChordSymbol, LeadSheet, Meter, NoteEvent, Phrase, Piece, Quality, Track, BEATS_PER_BAR, STEPS_PER_BAR,
    STEPS_PER_BEAT,
};

const HALF_BAR: u32 = (STEPS_PER_BAR / 2) as u32;

/// Diatonic triads of a major key as (degree offset, quality).
const DIATONIC: [(u8, Quality); 6] = [
    (0, Quality::Major),
    (2, Quality::Minor),
    (4, Quality::Minor),
    (5, Quality::Major),
    (7, Quality::Major),
    (9, Quality::Minor),
];

/// Piano accompaniment figurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Block,
    Alberti,
    Arpeggio,
    Offbeat,
    Sustained,
    Syncopated,
}

impl Texture {
    pub const ALL: [Texture; 6] = [
        Texture::Block,
        Texture::Alberti,
        Texture::Arpeggio,
        Texture::Offbeat,
        Texture::Sustained,
        Texture::Syncopated,
    ];
}

/// Lowest pitch `>= floor` with pitch class `pc`.
fn lift(pc: u8, floor: u8) -> u8 {
    let base = floor - floor % 12 + pc;
    if base < floor {
        base + 12
    } else {
        base
    }
}

/// Close-position voicing of the chord tones starting at `floor`.
pub fn voicing(chord: ChordSymbol, floor: u8) -> Vec<u8> {
    let mut v: Vec<u8> = chord.tones().into_iter().map(|pc| lift(pc, floor)).collect();
    v.sort_unstable();
    v
}

/// One chord per beat; chords change on half-bar boundaries. Starts on the
/// tonic and ends on the dominant or tonic.
pub fn progression(rng: &mut impl Rng, key: u8, bars: usize) -> Vec<ChordSymbol> {
    let halves = bars * 2;
    let mut out = Vec::with_capacity(bars * BEATS_PER_BAR);
    let mut current = DIATONIC[0];
    for h in 0..halves {
        if h == 0 {
            current = DIATONIC[0];
        } else if h == halves - 1 {
            current = if rng.random_bool(0.5) { DIATONIC[4] } else { DIATONIC[0] };
        } else if h % 2 == 0 || rng.random_bool(0.3) {
            current = *DIATONIC.choose(rng).expect("nonempty");
        }
        let chord = ChordSymbol::new((key + current.0) % 12, current.1);
        out.extend([chord; BEATS_PER_BAR / 2]);
    }
    out
}

fn half_bar_chords(chords: &[ChordSymbol]) -> impl Iterator<Item = (u32, ChordSymbol)> + '_ {
    chords
        .chunks(BEATS_PER_BAR / 2)
        .enumerate()
        .map(|(h, c)| (h as u32 * HALF_BAR, c[0]))
}

/// Piano accompaniment for the given per-beat chords.
pub fn piano_texture(chords: &[ChordSymbol], texture: Texture) -> Track {
    let mut notes = Vec::new();
    let beat = STEPS_PER_BEAT as u32;
    for (start, chord) in half_bar_chords(chords) {
        let triad = voicing(chord, 55);
        let bass = lift(chord.root, 40);
        match texture {
            Texture::Block => {
                for b in 0..2 {
                    for &p in &triad {
                        notes.push(NoteEvent::new(start + b * beat, 3, p));
                    }
                }
                notes.push(NoteEvent::new(start, HALF_BAR, bass));
            }
            Texture::Alberti => {
                let order = [triad[0], triad[2], triad[1], triad[2]];
                for s in 0..HALF_BAR {
                    notes.push(NoteEvent::new(start + s, 1, order[(s % 4) as usize]));
                }
                notes.push(NoteEvent::new(start, HALF_BAR, bass));
            }
            Texture::Arpeggio => {
                for s in (0..HALF_BAR).step_by(2) {
                    let p = if (s / 2) % 2 == 0 { triad[1] } else { triad[2] };
                    notes.push(NoteEvent::new(start + s, 2, p));
                }
                notes.push(NoteEvent::new(start, HALF_BAR, triad[0]));
                notes.push(NoteEvent::new(start, HALF_BAR, bass));
            }
            Texture::Offbeat => {
                for b in 0..2 {
                    notes.push(NoteEvent::new(start + b * beat, 2, bass));
                    for &p in &triad {
                        notes.push(NoteEvent::new(start + b * beat + 2, 2, p));
                    }
                }
            }
            Texture::Sustained => {
                for &p in &triad {
                    notes.push(NoteEvent::new(start, HALF_BAR, p));
                }
                notes.push(NoteEvent::new(start, HALF_BAR, bass));
            }
            Texture::Syncopated => {
                for (on, dur) in [(0, 3), (3, 3), (6, 2)] {
                    for &p in &triad {
                        notes.push(NoteEvent::new(start + on, dur, p));
                    }
                }
                notes.push(NoteEvent::new(start, HALF_BAR, bass));
            }
        }
    }
    Track::new(crate::score::instrument::PIANO).with_notes(notes)
}

/// Monophonic melody of chord tones in the upper register.
pub fn melody(rng: &mut impl Rng, chords: &[ChordSymbol]) -> Track {
    let patterns: [&[(u32, u32)]; 5] = [
        &[(0, 8)],
        &[(0, 4), (4, 4)],
        &[(0, 2), (2, 2), (4, 4)],
        &[(0, 6), (6, 2)],
        &[(0, 3), (3, 3), (6, 2)],
    ];
    let mut notes = Vec::new();
    for (start, chord) in half_bar_chords(chords) {
        let tones = voicing(chord, 67);
        let pattern = patterns.choose(rng).expect("nonempty");
        for &(on, dur) in pattern.iter() {
            notes.push(NoteEvent::new(start + on, dur, *tones.choose(rng).expect("nonempty")));
        }
    }
    Track::new(crate::score::instrument::PIANO).with_notes(notes)
}

/// A song with phrase structure: lead sheet, piano accompaniment and the
/// texture chosen per phrase. Phrases with the same label repeat material.
#[derive(Clone, Debug)]
pub struct ToySong {
    pub lead: LeadSheet,
    pub accompaniment: Track,
    pub textures: Vec<Texture>,
}

impl ToySong {
    /// Melody, accompaniment and phrase annotation as one piece.
    pub fn piece(&self) -> Piece {
        let mut p = Piece::new(Meter::FourFour, self.lead.bar_count())
            .with_tracks(vec![self.lead.melody.clone(), self.accompaniment.clone()]);
        p.phrases = self.lead.phrases.clone();
        p
    }
}

pub fn song(rng: &mut impl Rng, phrases: &[Phrase]) -> ToySong {
    let key = rng.random_range(0..12u8);
    let mut labels: Vec<(char, usize, Vec<ChordSymbol>, Track, Texture)> = Vec::new();
    let mut chords = Vec::new();
    let mut mel = Vec::new();
    let mut acc = Vec::new();
    let mut textures = Vec::new();
    let mut offset = 0u32;
    for phrase in phrases {
        let existing = labels
            .iter()
            .find(|(l, len, ..)| *l == phrase.label && *len == phrase.length_bars)
            .cloned();
        let (pc, pm, tex) = match existing {
            Some((_, _, c, m, t)) => (c, m, t),
            None => {
                let c = progression(rng, key, phrase.length_bars);
                let m = melody(rng, &c);
                let t = *Texture::ALL.choose(rng).expect("nonempty");
                labels.push((phrase.label, phrase.length_bars, c.clone(), m.clone(), t));
                (c, m, t)
            }
        };
        let piano = piano_texture(&pc, tex);
        mel.extend(pm.shifted(i64::from(offset)).notes);
        acc.extend(piano.shifted(i64::from(offset)).notes);
        chords.extend(pc);
        textures.push(tex);
        offset += (phrase.length_bars * STEPS_PER_BAR) as u32;
    }
    ToySong {
        lead: LeadSheet {
            melody: Track::new(crate::score::instrument::PIANO).with_notes(mel),
            chords,
            phrases: Some(phrases.to_vec()),
        },
        accompaniment: Track::new(crate::score::instrument::PIANO).with_notes(acc),
        textures,
    }
}

/// Common phrase layouts of the toy corpus.
pub const LAYOUTS: [&str; 5] = ["A8A8B8B8", "A4A4B4B4", "A8B8", "A4B4A4B4", "A16"];

pub fn random_song(rng: &mut impl Rng) -> ToySong {
    let layout = LAYOUTS.choose(rng).expect("nonempty");
    song(rng, &crate::score::parse_phrases(layout).expect("valid layout"))
}

/// Band roles: instrument class and register floor.
const BASS: (u8, u8) = (8, 36);
const PAD: (u8, u8) = (15, 55);
const GUITAR: (u8, u8) = (5, 52);
const ARP: (u8, u8) = (13, 67);
const KEYS: (u8, u8) = (1, 60);

fn bass_line(chords: &[ChordSymbol], pattern: usize) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    for (start, chord) in half_bar_chords(chords) {
        let root = lift(chord.root, BASS.1);
        let fifth = lift((chord.root + 7) % 12, BASS.1);
        match pattern % 3 {
            0 => notes.push(NoteEvent::new(start, HALF_BAR, root)),
            1 => {
                notes.push(NoteEvent::new(start, 4, root));
                notes.push(NoteEvent::new(start + 4, 4, fifth));
            }
            _ => {
                for s in (0..HALF_BAR).step_by(2) {
                    notes.push(NoteEvent::new(start + s, 2, if s % 4 == 0 { root } else { fifth }));
                }
            }
        }
    }
    notes
}

fn chord_part(chords: &[ChordSymbol], floor: u8, hits: &[(u32, u32)]) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    for (start, chord) in half_bar_chords(chords) {
        for &(on, dur) in hits {
            for p in voicing(chord, floor) {
                notes.push(NoteEvent::new(start + on, dur, p));
            }
        }
    }
    notes
}

fn arpeggio_part(chords: &[ChordSymbol], floor: u8, step: u32) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    for (start, chord) in half_bar_chords(chords) {
        let v = voicing(chord, floor);
        for (i, s) in (0..HALF_BAR).step_by(step as usize).enumerate() {
            notes.push(NoteEvent::new(start + s, step, v[i % v.len()]));
        }
    }
    notes
}

/// Multi-track accompaniment over random chords: 2-4 of bass, pad, guitar,
/// arpeggio and keys, each with a piece-level figuration.
pub fn band_piece(rng: &mut impl Rng, bars: usize) -> Piece {
    let key = rng.random_range(0..12u8);
    let chords = progression(rng, key, bars);
    band_arrangement(rng, &chords)
}

pub fn band_arrangement(rng: &mut impl Rng, chords: &[ChordSymbol]) -> Piece {
    let bars = chords.len() / BEATS_PER_BAR;
    let count = rng.random_range(2..=4usize);
    let mut roles = vec![BASS, PAD, GUITAR, ARP, KEYS];
    let mut tracks = Vec::new();
    for _ in 0..count {
        let i = rng.random_range(0..roles.len());
        let (class, floor) = roles.remove(i);
        let notes = match class {
            c if c == BASS.0 => bass_line(chords, rng.random_range(0..3)),
            c if c == PAD.0 => chord_part(chords, floor, &[(0, HALF_BAR)]),
            c if c == GUITAR.0 => {
                let strums: [&[(u32, u32)]; 3] = [&[(0, 2), (4, 2)], &[(2, 2), (6, 2)], &[(0, 3), (3, 3), (6, 2)]];
                chord_part(chords, floor, strums.choose(rng).expect("nonempty"))
            }
            c if c == ARP.0 => arpeggio_part(chords, floor, if rng.random_bool(0.5) { 1 } else { 2 }),
            _ => chord_part(chords, floor, &[(0, 4), (4, 4)]),
        };
        tracks.push(Track::new(class).with_notes(notes));
    }
    Piece::new(Meter::FourFour, bars).with_tracks(tracks)
}

/// The 32-bar AABB lead sheet bundled as a fixture.
pub fn aabb_lead(rng: &mut impl Rng) -> LeadSheet {
    song(rng, &crate::score::parse_phrases("A8A8B8B8").expect("valid")).lead
}

/// Phrase database of `songs` random toy songs, with their generating chords.
pub fn phrase_db(rng: &mut impl Rng, songs: usize) -> Result<PhraseDb> {
    let mut db = PhraseDb::new();
    for i in 0..songs {
        let s = random_song(rng);
        db.add_piece(&format!("toy{i:03}"), &s.piece(), Some(&s.lead.chords))?;
    }
    Ok(db)
}

/// Sizes and schedules for training small models on toy band pieces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRecipe {
    pub seed: u64,
    pub pieces: usize,
    pub bars: usize,
    pub db_songs: usize,
    pub codec: CodecTrainConfig,
    pub prior: PriorTrainConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        ToyRecipe {
            seed: 1,
            pieces: 16,
            bars: 8,
            db_songs: 12,
            // Onset cells are sparse; without up-weighting them the codec
            // settles on empty reconstructions at this corpus size.
            codec: CodecTrainConfig {
                epochs: 60,
                pos_weight: 10.0,
                lr_start: 3e-3,
                lr_end: 1e-4,
                ..CodecTrainConfig::default()
            },
            prior: PriorTrainConfig {
                steps: 800,
                batch_size: 8,
                ..PriorTrainConfig::default()
            },
        }
    }
}

pub struct ToyModels {
    pub corpus: Vec<Piece>,
    pub codec: Codec,
    pub prior: Prior,
    pub db: PhraseDb,
}

/// Generates a band corpus and phrase database and trains codec and prior on them.
pub fn train_models(recipe: &ToyRecipe) -> Result<ToyModels> {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let corpus: Vec<Piece> = (0..recipe.pieces).map(|_| band_piece(&mut rng, recipe.bars)).collect();
    let db = phrase_db(&mut rng, recipe.db_songs)?;
    let codec_train = CodecTrainConfig {
        seed: recipe.seed,
        ..recipe.codec.clone()
    };
    let (codec, _) = Codec::train(&corpus, CodecConfig::default(), &codec_train)?;
    let segments = corpus
        .iter()
        .map(|p| prior_segment(&codec, p, p.bar_count, 0))
        .collect::<Result<Vec<_>>>()?;
    let prior_train = PriorTrainConfig {
        seed: recipe.seed,
        ..recipe.prior.clone()
    };
    let (prior, _) = Prior::train(&segments, PriorConfig::default(), &prior_train)?;
    Ok(ToyModels {
        corpus,
        codec,
        prior,
        db,
    })
}
