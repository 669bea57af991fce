//! Symbolic score model quantized at a quarter of a beat.

mod chord;
mod clip;
pub mod instrument;
pub mod midi;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use chord::{ChordSymbol, Quality, CHORD_VOCABULARY};
pub use clip::{downmix, from_clips, to_clips, ClipGrid};
pub use midi::{read_midi, write_midi};

pub const STEPS_PER_BEAT: usize = 4;
/// Grid positions in a 4/4 bar.
pub const STEPS_PER_BAR: usize = 16;
pub const CLIP_BARS: usize = 2;
pub const CLIP_STEPS: usize = CLIP_BARS * STEPS_PER_BAR;
pub const PITCHES: usize = 128;
pub const BEATS_PER_BAR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Meter {
    #[serde(rename = "2/4")]
    TwoFour,
    #[serde(rename = "4/4")]
    FourFour,
}

impl Meter {
    pub fn beats_per_bar(self) -> usize {
        match self {
            Meter::TwoFour => 2,
            Meter::FourFour => 4,
        }
    }

    pub fn steps_per_bar(self) -> usize {
        self.beats_per_bar() * STEPS_PER_BEAT
    }
}

impl fmt::Display for Meter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/4", self.beats_per_bar())
    }
}

/// A note on the step grid. Field order gives the canonical `(onset, pitch)` sort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset: u32,
    pub pitch: u8,
    pub duration: u32,
}

impl NoteEvent {
    pub fn new(onset: u32, duration: u32, pitch: u8) -> Self {
        NoteEvent {
            onset,
            pitch,
            duration,
        }
    }

    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    /// Instrument class in `0..instrument::CLASS_COUNT`.
    pub instrument: u8,
    /// General-MIDI program written on output.
    pub program: u8,
    pub notes: Vec<NoteEvent>,
}

impl Track {
    /// Empty track for an instrument class, using the class's canonical program.
    pub fn new(instrument: u8) -> Self {
        Track {
            instrument,
            program: instrument::class_program(instrument),
            notes: Vec::new(),
        }
    }

    pub fn from_program(program: u8) -> Self {
        Track {
            instrument: instrument::program_class(program),
            program,
            notes: Vec::new(),
        }
    }

    pub fn with_notes(mut self, notes: Vec<NoteEvent>) -> Self {
        self.notes = notes;
        self.sort_notes();
        self
    }

    pub fn sort_notes(&mut self) {
        self.notes.sort_unstable();
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// No two notes sound at the same time.
    pub fn is_monophonic(&self) -> bool {
        let mut notes = self.notes.clone();
        notes.sort_unstable();
        notes.windows(2).all(|w| w[0].end() <= w[1].onset)
    }

    /// Copy of the track with every note moved by `steps` (may be negative);
    /// notes that would start before zero are dropped.
    pub fn shifted(&self, steps: i64) -> Track {
        let notes = self
            .notes
            .iter()
            .filter_map(|n| {
                let onset = n.onset as i64 + steps;
                (onset >= 0).then(|| NoteEvent::new(onset as u32, n.duration, n.pitch))
            })
            .collect();
        Track {
            notes,
            ..self.clone()
        }
    }

    /// Notes overlapping `[start, end)` steps, re-based to `start` and clipped to the window.
    pub fn window(&self, start: u32, end: u32) -> Track {
        let notes = self
            .notes
            .iter()
            .filter(|n| n.onset >= start && n.onset < end)
            .map(|n| NoteEvent::new(n.onset - start, n.end().min(end) - n.onset, n.pitch))
            .collect();
        Track {
            notes,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub label: char,
    pub length_bars: usize,
}

/// Parses a phrase sidecar such as `A8A8B8B8` (label character followed by a bar count).
pub fn parse_phrases(text: &str) -> Result<Vec<Phrase>> {
    let text = text.trim();
    let mut phrases = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((pos, label)) = chars.next() {
        if label.is_whitespace() {
            continue;
        }
        if label.is_ascii_digit() {
            return Err(Error::invalid(format!(
                "phrase annotation {text:?}: expected a label at position {pos}"
            )));
        }
        let mut digits = String::new();
        while let Some(&(_, c)) = chars.peek() {
            if !c.is_ascii_digit() {
                break;
            }
            digits.push(c);
            chars.next();
        }
        let length_bars: usize = digits.parse().map_err(|_| {
            Error::invalid(format!(
                "phrase annotation {text:?}: label '{label}' has no bar count"
            ))
        })?;
        if length_bars == 0 {
            return Err(Error::invalid(format!(
                "phrase annotation {text:?}: zero-length phrase"
            )));
        }
        phrases.push(Phrase { label, length_bars });
    }
    if phrases.is_empty() {
        return Err(Error::invalid("empty phrase annotation"));
    }
    Ok(phrases)
}

pub fn format_phrases(phrases: &[Phrase]) -> String {
    phrases
        .iter()
        .map(|p| format!("{}{}", p.label, p.length_bars))
        .collect()
}

/// Bar offset of each phrase.
pub fn phrase_starts(phrases: &[Phrase]) -> Vec<usize> {
    phrases
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.length_bars;
            Some(start)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub meter: Meter,
    pub bar_count: usize,
    pub tracks: Vec<Track>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrases: Option<Vec<Phrase>>,
}

impl Piece {
    pub fn new(meter: Meter, bar_count: usize) -> Self {
        Piece {
            meter,
            bar_count,
            tracks: Vec::new(),
            phrases: None,
        }
    }

    pub fn with_tracks(mut self, tracks: Vec<Track>) -> Self {
        self.tracks = tracks;
        self
    }

    pub fn steps_per_bar(&self) -> usize {
        self.meter.steps_per_bar()
    }

    pub fn total_steps(&self) -> usize {
        self.bar_count * self.steps_per_bar()
    }

    /// Number of 2-bar clips once the piece is expressed in 4/4.
    pub fn clip_count(&self) -> usize {
        let bars = match self.meter {
            Meter::FourFour => self.bar_count,
            Meter::TwoFour => self.bar_count.div_ceil(2),
        };
        bars.div_ceil(CLIP_BARS)
    }

    pub fn instruments(&self) -> Vec<u8> {
        self.tracks.iter().map(|t| t.instrument).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bar_count == 0 {
            return Err(Error::invalid("piece must have at least one bar"));
        }
        let total = self.total_steps() as u32;
        for (ti, track) in self.tracks.iter().enumerate() {
            if usize::from(track.instrument) >= instrument::CLASS_COUNT {
                return Err(Error::invalid(format!(
                    "track {ti}: instrument class {} out of range",
                    track.instrument
                )));
            }
            if track.program > 127 {
                return Err(Error::invalid(format!("track {ti}: program {} > 127", track.program)));
            }
            for n in &track.notes {
                if n.pitch > 127 {
                    return Err(Error::invalid(format!("track {ti}: pitch {} > 127", n.pitch)));
                }
                if n.duration == 0 {
                    return Err(Error::invalid(format!(
                        "track {ti}: zero-length note at step {}",
                        n.onset
                    )));
                }
                if n.end() > total {
                    return Err(Error::invalid(format!(
                        "track {ti}: note at step {} ends at {} past the piece end {total}",
                        n.onset,
                        n.end()
                    )));
                }
            }
            if track.notes.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::invalid(format!("track {ti}: notes not sorted by (onset, pitch)")));
            }
        }
        if let Some(phrases) = &self.phrases {
            let sum: usize = phrases.iter().map(|p| p.length_bars).sum();
            if sum != self.bar_count {
                return Err(Error::invalid(format!(
                    "phrase lengths sum to {sum} bars, piece has {}",
                    self.bar_count
                )));
            }
        }
        Ok(())
    }

    /// Re-bars a 2/4 piece as 4/4 by merging bar pairs. Phrase lengths are halved when
    /// every phrase has an even length and dropped otherwise.
    pub fn to_four_four(&self) -> Piece {
        match self.meter {
            Meter::FourFour => self.clone(),
            Meter::TwoFour => {
                let phrases = self.phrases.as_ref().and_then(|ps| {
                    ps.iter()
                        .all(|p| p.length_bars % 2 == 0)
                        .then(|| {
                            ps.iter()
                                .map(|p| Phrase {
                                    label: p.label,
                                    length_bars: p.length_bars / 2,
                                })
                                .collect()
                        })
                });
                Piece {
                    meter: Meter::FourFour,
                    bar_count: self.bar_count.div_ceil(2),
                    tracks: self.tracks.clone(),
                    phrases,
                }
            }
        }
    }

    /// Bars `[start, start + bars)` as a new piece (4/4 view).
    pub fn slice_bars(&self, start: usize, bars: usize) -> Piece {
        let piece = self.to_four_four();
        let s = (start * STEPS_PER_BAR) as u32;
        let e = ((start + bars) * STEPS_PER_BAR) as u32;
        Piece {
            meter: Meter::FourFour,
            bar_count: bars,
            tracks: piece.tracks.iter().map(|t| t.window(s, e)).collect(),
            phrases: None,
        }
    }

    /// Appends `other` (same meter) after the last bar of `self`, track by track.
    pub fn concat(&mut self, other: &Piece) -> Result<()> {
        if self.meter != other.meter || self.tracks.len() != other.tracks.len() {
            return Err(Error::invalid("cannot concatenate pieces with different layouts"));
        }
        let offset = self.total_steps() as i64;
        for (dst, src) in self.tracks.iter_mut().zip(&other.tracks) {
            dst.notes.extend(src.shifted(offset).notes);
            dst.sort_notes();
        }
        self.bar_count += other.bar_count;
        Ok(())
    }

    /// All notes of every track merged into one piano track.
    pub fn merged_track(&self, instrument: u8) -> Track {
        let notes = self.tracks.iter().flat_map(|t| t.notes.iter().copied()).collect();
        Track::new(instrument).with_notes(notes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Piece> {
        let mut piece: Piece = serde_json::from_str(text)?;
        for t in &mut piece.tracks {
            t.sort_notes();
        }
        piece.validate()?;
        Ok(piece)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Piece> {
        Piece::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Melody plus one chord per beat; the conditional input of arrangement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadSheet {
    pub melody: Track,
    pub chords: Vec<ChordSymbol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrases: Option<Vec<Phrase>>,
}

impl LeadSheet {
    pub fn bar_count(&self) -> usize {
        self.chords.len() / BEATS_PER_BAR
    }

    pub fn validate(&self) -> Result<()> {
        if self.chords.is_empty() || self.chords.len() % BEATS_PER_BAR != 0 {
            return Err(Error::invalid(format!(
                "lead sheet needs a whole number of 4/4 bars of chords, got {} beats",
                self.chords.len()
            )));
        }
        if !self.melody.is_monophonic() {
            return Err(Error::invalid("melody must be monophonic"));
        }
        let total = (self.bar_count() * STEPS_PER_BAR) as u32;
        if let Some(n) = self.melody.notes.iter().find(|n| n.end() > total || n.duration == 0) {
            return Err(Error::invalid(format!(
                "melody note at step {} does not fit in {} bars",
                n.onset,
                self.bar_count()
            )));
        }
        if let Some(phrases) = &self.phrases {
            let sum: usize = phrases.iter().map(|p| p.length_bars).sum();
            if sum != self.bar_count() {
                return Err(Error::invalid(format!(
                    "phrase lengths sum to {sum} bars, lead sheet has {}",
                    self.bar_count()
                )));
            }
        }
        Ok(())
    }

    /// Melody-only piece of the same length.
    pub fn melody_piece(&self) -> Piece {
        Piece::new(Meter::FourFour, self.bar_count()).with_tracks(vec![self.melody.clone()])
    }

    pub fn from_json(text: &str) -> Result<LeadSheet> {
        let mut lead: LeadSheet = serde_json::from_str(text)?;
        lead.melody.sort_notes();
        lead.validate()?;
        Ok(lead)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<LeadSheet> {
        LeadSheet::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_sidecar_parses() {
        let p = parse_phrases("A8A8B8B8").unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[2], Phrase { label: 'B', length_bars: 8 });
        assert_eq!(format_phrases(&p), "A8A8B8B8");
        assert_eq!(parse_phrases("i4A16").unwrap()[1].length_bars, 16);
        assert!(parse_phrases("A").is_err());
        assert!(parse_phrases("8A").is_err());
        assert!(parse_phrases("").is_err());
    }

    #[test]
    fn phrase_sum_checked() {
        let mut piece = Piece::new(Meter::FourFour, 8);
        piece.phrases = Some(parse_phrases("A4B2").unwrap());
        assert!(piece.validate().is_err());
        piece.phrases = Some(parse_phrases("A4B4").unwrap());
        piece.validate().unwrap();
    }

    #[test]
    fn note_past_end_rejected() {
        let piece = Piece::new(Meter::FourFour, 1)
            .with_tracks(vec![Track::new(0).with_notes(vec![NoteEvent::new(12, 8, 60)])]);
        assert!(piece.validate().is_err());
    }

    #[test]
    fn two_four_rebars_pairwise() {
        let mut piece = Piece::new(Meter::TwoFour, 5)
            .with_tracks(vec![Track::new(0).with_notes(vec![NoteEvent::new(36, 4, 60)])]);
        piece.phrases = Some(parse_phrases("A4B1").unwrap());
        let q = piece.to_four_four();
        assert_eq!(q.bar_count, 3);
        assert_eq!(q.tracks[0].notes[0].onset, 36);
        assert!(q.phrases.is_none());
        assert_eq!(piece.clip_count(), 2);
    }

    #[test]
    fn json_roundtrip() {
        let mut piece = Piece::new(Meter::FourFour, 2).with_tracks(vec![Track::new(8)
            .with_notes(vec![NoteEvent::new(4, 2, 40), NoteEvent::new(0, 4, 36)])]);
        piece.phrases = Some(parse_phrases("A2").unwrap());
        let text = piece.to_json().unwrap();
        assert!(text.contains("\"4/4\""));
        assert_eq!(Piece::from_json(&text).unwrap(), piece);
    }
}
