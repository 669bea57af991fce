use super::{Meter, NoteEvent, Piece, Track, CLIP_BARS, CLIP_STEPS, PITCHES, STEPS_PER_BAR};
use crate::{Error, Result};

/// Per-track onset/sustain pianoroll of one 2-bar clip (`tracks × 32 × 128`).
///
/// A note occupies an onset cell at its first step and sustain cells after it.
/// Sustain at step 0 means the note started in an earlier clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipGrid {
    tracks: usize,
    onset: Vec<bool>,
    sustain: Vec<bool>,
}

#[inline]
fn cell(track: usize, step: usize, pitch: usize) -> usize {
    (track * CLIP_STEPS + step) * PITCHES + pitch
}

impl ClipGrid {
    pub fn new(tracks: usize) -> Self {
        let n = tracks * CLIP_STEPS * PITCHES;
        ClipGrid {
            tracks,
            onset: vec![false; n],
            sustain: vec![false; n],
        }
    }

    pub fn track_count(&self) -> usize {
        self.tracks
    }

    pub fn onset(&self, track: usize, step: usize, pitch: usize) -> bool {
        self.onset[cell(track, step, pitch)]
    }

    pub fn sustain(&self, track: usize, step: usize, pitch: usize) -> bool {
        self.sustain[cell(track, step, pitch)]
    }

    /// The cell is sounding (onset or sustain).
    pub fn active(&self, track: usize, step: usize, pitch: usize) -> bool {
        let i = cell(track, step, pitch);
        self.onset[i] || self.sustain[i]
    }

    pub fn set_onset(&mut self, track: usize, step: usize, pitch: usize, on: bool) {
        self.onset[cell(track, step, pitch)] = on;
    }

    pub fn set_sustain(&mut self, track: usize, step: usize, pitch: usize, on: bool) {
        self.sustain[cell(track, step, pitch)] = on;
    }

    pub fn onset_count(&self) -> usize {
        self.onset.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.onset.iter().chain(&self.sustain).any(|&b| b)
    }

    /// Onset and sustain planes of one track, each `32 × 128` row-major.
    pub fn track_planes(&self, track: usize) -> (&[bool], &[bool]) {
        let r = cell(track, 0, 0)..cell(track + 1, 0, 0);
        (&self.onset[r.clone()], &self.sustain[r])
    }

    pub fn select(&self, track: usize) -> Result<ClipGrid> {
        if track >= self.tracks {
            return Err(Error::IndexOutOfRange {
                what: "track",
                index: track,
                len: self.tracks,
            });
        }
        let (o, s) = self.track_planes(track);
        Ok(ClipGrid {
            tracks: 1,
            onset: o.to_vec(),
            sustain: s.to_vec(),
        })
    }

    /// Stacks single- or multi-track grids along the track axis.
    pub fn stack(parts: &[ClipGrid]) -> ClipGrid {
        let mut out = ClipGrid {
            tracks: 0,
            onset: Vec::new(),
            sustain: Vec::new(),
        };
        for p in parts {
            out.tracks += p.tracks;
            out.onset.extend_from_slice(&p.onset);
            out.sustain.extend_from_slice(&p.sustain);
        }
        out
    }

    /// Drops sustain cells that do not continue a note from the previous step.
    /// Step 0 is left alone since it may continue the previous clip.
    pub fn normalized(&self) -> ClipGrid {
        let mut out = self.clone();
        for n in 0..self.tracks {
            for p in 0..PITCHES {
                for s in 1..CLIP_STEPS {
                    let i = cell(n, s, p);
                    if out.onset[i] {
                        out.sustain[i] = false;
                    } else if out.sustain[i] && !(out.onset[i - PITCHES] || out.sustain[i - PITCHES]) {
                        out.sustain[i] = false;
                    }
                }
                let i0 = cell(n, 0, p);
                if out.onset[i0] {
                    out.sustain[i0] = false;
                }
            }
        }
        out
    }
}

/// Track-wise downmix: onsets and sustains are OR-ed over tracks and a cell
/// that ends up both onset and sustain keeps only the onset.
pub fn downmix(clip: &ClipGrid) -> ClipGrid {
    let mut out = ClipGrid::new(1);
    let plane = CLIP_STEPS * PITCHES;
    for n in 0..clip.tracks {
        let (o, s) = clip.track_planes(n);
        for i in 0..plane {
            out.onset[i] |= o[i];
            out.sustain[i] |= s[i];
        }
    }
    for i in 0..plane {
        if out.onset[i] {
            out.sustain[i] = false;
        }
    }
    out
}

/// Splits a piece into `ceil(K/2)` 2-bar clips (2/4 pieces are re-barred as 4/4 first).
/// The last clip is zero-padded when the bar count is odd.
pub fn to_clips(piece: &Piece) -> Vec<ClipGrid> {
    let piece = piece.to_four_four();
    let count = piece.bar_count.div_ceil(CLIP_BARS);
    let mut clips = vec![ClipGrid::new(piece.tracks.len()); count];
    for (n, track) in piece.tracks.iter().enumerate() {
        for note in &track.notes {
            let p = usize::from(note.pitch);
            let start = note.onset as usize;
            let end = (note.end() as usize).min(count * CLIP_STEPS);
            for t in start..end {
                let clip = &mut clips[t / CLIP_STEPS];
                let i = cell(n, t % CLIP_STEPS, p);
                if t == start {
                    clip.onset[i] = true;
                    clip.sustain[i] = false;
                } else if !clip.onset[i] {
                    clip.sustain[i] = true;
                }
            }
        }
    }
    clips
}

/// Reassembles clips into a 4/4 piece of `bar_count` bars with one track per
/// template track (instrument and program are copied, notes are rebuilt).
///
/// Sustain cells without a sounding predecessor are ignored; notes are cut at
/// the end of the piece.
pub fn from_clips(clips: &[ClipGrid], templates: &[Track], bar_count: usize) -> Result<Piece> {
    let tracks = templates.len();
    if let Some(c) = clips.iter().find(|c| c.tracks != tracks) {
        return Err(Error::LengthMismatch {
            what: "clip track count",
            expected: tracks,
            found: c.tracks,
        });
    }
    let limit = (bar_count * STEPS_PER_BAR).min(clips.len() * CLIP_STEPS);
    let mut out_tracks = Vec::with_capacity(tracks);
    for (n, template) in templates.iter().enumerate() {
        let mut notes = Vec::new();
        for p in 0..PITCHES {
            let mut open: Option<usize> = None;
            for t in 0..limit {
                let clip = &clips[t / CLIP_STEPS];
                let i = cell(n, t % CLIP_STEPS, p);
                if clip.onset[i] {
                    if let Some(s) = open.take() {
                        notes.push(NoteEvent::new(s as u32, (t - s) as u32, p as u8));
                    }
                    open = Some(t);
                } else if !(clip.sustain[i] && open.is_some()) {
                    if let Some(s) = open.take() {
                        notes.push(NoteEvent::new(s as u32, (t - s) as u32, p as u8));
                    }
                }
            }
            if let Some(s) = open {
                notes.push(NoteEvent::new(s as u32, (limit - s) as u32, p as u8));
            }
        }
        out_tracks.push(Track {
            instrument: template.instrument,
            program: template.program,
            notes: Vec::new(),
        }
        .with_notes(notes));
    }
    Ok(Piece::new(Meter::FourFour, bar_count).with_tracks(out_tracks))
}
