//! Piano sketch planning: a phrase database, fitness and transition scores,
//! Viterbi selection over phrase slots and rule-based re-harmonization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{cosine, recognize_chords, track_function};
use crate::score::to_clips;
use crate::score::{
    instrument, phrase_starts, ChordSymbol, LeadSheet, Meter, NoteEvent, Phrase, Piece, Track, BEATS_PER_BAR,
    STEPS_PER_BAR, STEPS_PER_BEAT,
};
use crate::{Error, Result};

/// Phrase lengths the database accepts.
pub const PHRASE_LENGTHS: [usize; 3] = [4, 8, 16];

pub type OnsetGrid = [bool; STEPS_PER_BAR];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerWeights {
    /// Weight of the summed fitness terms.
    pub delta: f64,
    /// Weight of the summed transition terms.
    pub gamma: f64,
    pub rhythm: f64,
    pub chord: f64,
}

impl Default for PlannerWeights {
    fn default() -> Self {
        PlannerWeights {
            delta: 0.3,
            gamma: 0.7,
            rhythm: 0.5,
            chord: 0.5,
        }
    }
}

impl PlannerWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.delta, self.gamma, self.rhythm, self.chord];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("planner weights must be finite and non-negative"));
        }
        if (self.delta + self.gamma - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "delta + gamma must equal 1, got {}",
                self.delta + self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-bar melody onset grids of a track spanning `bars` bars.
pub fn onset_grids(melody: &Track, bars: usize) -> Vec<OnsetGrid> {
    let mut grids = vec![[false; STEPS_PER_BAR]; bars];
    for n in &melody.notes {
        let bar = n.onset as usize / STEPS_PER_BAR;
        if bar < bars {
            grids[bar][n.onset as usize % STEPS_PER_BAR] = true;
        }
    }
    grids
}

/// Boundary features of a piano track: `concat(f^p, f^t)` of its first and last 2-bar clip.
fn boundary_features(accompaniment: &Track, bars: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let piece = Piece::new(Meter::FourFour, bars).with_tracks(vec![accompaniment.clone()]);
    let clips = to_clips(&piece);
    let first = clips.first().ok_or(Error::Empty("phrase accompaniment"))?;
    let last = clips.last().expect("nonempty");
    Ok((track_function(first, 0)?.concat(), track_function(last, 0)?.concat()))
}

/// One retrievable piano phrase with the lead-sheet context it was written for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseEntry {
    pub source: String,
    pub label: char,
    pub length_bars: usize,
    /// Piano accompaniment, re-based to start at step 0.
    pub accompaniment: Track,
    /// Source melody, re-based to start at step 0.
    pub melody: Track,
    pub rhythm: Vec<OnsetGrid>,
    /// One chord per beat.
    pub chords: Vec<ChordSymbol>,
    #[serde(skip)]
    head: Vec<f64>,
    #[serde(skip)]
    tail: Vec<f64>,
}

impl PhraseEntry {
    pub fn new(
        source: impl Into<String>,
        label: char,
        melody: Track,
        accompaniment: Track,
        chords: Vec<ChordSymbol>,
    ) -> Result<Self> {
        if chords.len() % BEATS_PER_BAR != 0 {
            return Err(Error::invalid("phrase chords must cover whole bars"));
        }
        let length_bars = chords.len() / BEATS_PER_BAR;
        if !PHRASE_LENGTHS.contains(&length_bars) {
            return Err(Error::invalid(format!(
                "phrase length {length_bars} bars is not one of {PHRASE_LENGTHS:?}"
            )));
        }
        let mut entry = PhraseEntry {
            source: source.into(),
            label,
            length_bars,
            rhythm: onset_grids(&melody, length_bars),
            accompaniment,
            melody,
            chords,
            head: Vec::new(),
            tail: Vec::new(),
        };
        entry.refresh()?;
        Ok(entry)
    }

    /// Recomputes the cached boundary features and checks the stored rhythm.
    fn refresh(&mut self) -> Result<()> {
        if self.chords.len() != self.length_bars * BEATS_PER_BAR {
            return Err(Error::LengthMismatch {
                what: "phrase chord count",
                expected: self.length_bars * BEATS_PER_BAR,
                found: self.chords.len(),
            });
        }
        if self.rhythm != onset_grids(&self.melody, self.length_bars) {
            return Err(Error::invalid(format!(
                "phrase from {}: stored rhythm does not match its melody",
                self.source
            )));
        }
        let (head, tail) = boundary_features(&self.accompaniment, self.length_bars)?;
        self.head = head;
        self.tail = tail;
        Ok(())
    }

    pub fn head_features(&self) -> &[f64] {
        &self.head
    }

    pub fn tail_features(&self) -> &[f64] {
        &self.tail
    }

    /// Mean number of simultaneously sounding notes over steps where anything sounds.
    pub fn voice_number(&self) -> f64 {
        let total = self.length_bars * STEPS_PER_BAR;
        let mut count = vec![0u32; total];
        for n in &self.accompaniment.notes {
            for t in n.onset as usize..(n.end() as usize).min(total) {
                count[t] += 1;
            }
        }
        let sounding: Vec<u32> = count.into_iter().filter(|&c| c > 0).collect();
        if sounding.is_empty() {
            0.0
        } else {
            sounding.iter().sum::<u32>() as f64 / sounding.len() as f64
        }
    }

    pub fn onsets_per_bar(&self) -> f64 {
        self.accompaniment.notes.len() as f64 / self.length_bars as f64
    }
}

/// What the planner matches an entry against: one lead-sheet phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseQuery {
    pub label: char,
    pub rhythm: Vec<OnsetGrid>,
    pub chords: Vec<ChordSymbol>,
}

impl PhraseQuery {
    pub fn length_bars(&self) -> usize {
        self.rhythm.len()
    }
}

/// Splits an annotated lead sheet into one query per phrase.
pub fn lead_queries(lead: &LeadSheet) -> Result<Vec<PhraseQuery>> {
    lead.validate()?;
    let phrases = lead
        .phrases
        .as_ref()
        .ok_or_else(|| Error::invalid("lead sheet has no phrase annotation"))?;
    Ok(phrases
        .iter()
        .zip(phrase_starts(phrases))
        .map(|(p, start)| {
            let (s, e) = (start * STEPS_PER_BAR, (start + p.length_bars) * STEPS_PER_BAR);
            let melody = lead.melody.window(s as u32, e as u32);
            PhraseQuery {
                label: p.label,
                rhythm: onset_grids(&melody, p.length_bars),
                chords: lead.chords[start * BEATS_PER_BAR..(start + p.length_bars) * BEATS_PER_BAR].to_vec(),
            }
        })
        .collect())
}

fn chord_iou(a: ChordSymbol, b: ChordSymbol) -> f64 {
    let (a, b) = (a.tone_mask(), b.tone_mask());
    f64::from((a & b).count_ones()) / f64::from((a | b).count_ones())
}

/// `w_r·rhythm_sim + w_c·chord_sim`, or `−∞` when the lengths differ.
pub fn fitness(entry: &PhraseEntry, query: &PhraseQuery, weights: &PlannerWeights) -> f64 {
    if entry.length_bars != query.length_bars() || entry.chords.len() != query.chords.len() {
        return f64::NEG_INFINITY;
    }
    let hamming: f64 = entry
        .rhythm
        .iter()
        .zip(&query.rhythm)
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / STEPS_PER_BAR as f64)
        .sum::<f64>()
        / entry.length_bars as f64;
    let chord_hits = entry
        .chords
        .iter()
        .zip(&query.chords)
        .filter(|(a, b)| chord_iou(**a, **b) >= 0.5)
        .count() as f64
        / entry.chords.len() as f64;
    weights.rhythm * (1.0 - hamming) + weights.chord * chord_hits
}

/// Cosine between the last clip of `a` and the first clip of `b`.
pub fn transition(a: &PhraseEntry, b: &PhraseEntry) -> f64 {
    cosine(a.tail_features(), b.head_features())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViterbiResult {
    /// Candidate index chosen in each slot.
    pub path: Vec<usize>,
    pub score: f64,
}

/// Scores closer than this are treated as ties and resolved by lowest index.
const TIE_TOLERANCE: f64 = 1e-12;

/// Maximizes `δ·Σ fitness[l][i_l] + γ·Σ transitions[l][i_l][i_{l+1}]`.
///
/// `transitions[l]` scores slot `l` candidates against slot `l+1` candidates.
/// Among (near-)optimal paths the lexicographically smallest index chain wins.
pub fn viterbi(fitness: &[Vec<f64>], transitions: &[Vec<Vec<f64>>], weights: &PlannerWeights) -> Result<ViterbiResult> {
    let slots = fitness.len();
    if slots == 0 {
        return Err(Error::Empty("phrase sequence"));
    }
    if let Some(l) = fitness.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("slot {l} has no candidates")));
    }
    if transitions.len() + 1 != slots {
        return Err(Error::LengthMismatch {
            what: "transition matrices",
            expected: slots - 1,
            found: transitions.len(),
        });
    }
    // best[l][i]: best score of slots l.. starting from candidate i.
    let mut best: Vec<Vec<f64>> = vec![Vec::new(); slots];
    best[slots - 1] = fitness[slots - 1].iter().map(|f| weights.delta * f).collect();
    for l in (0..slots - 1).rev() {
        let trans = &transitions[l];
        if trans.len() != fitness[l].len() || trans.iter().any(|r| r.len() != fitness[l + 1].len()) {
            return Err(Error::invalid(format!("transition matrix {l} has the wrong shape")));
        }
        best[l] = fitness[l]
            .iter()
            .zip(trans)
            .map(|(f, row)| {
                let follow = row
                    .iter()
                    .zip(&best[l + 1])
                    .map(|(t, b)| weights.gamma * t + b)
                    .fold(f64::NEG_INFINITY, f64::max);
                weights.delta * f + follow
            })
            .collect();
    }
    let pick = |values: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = values.collect();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let i = v.iter().position(|&x| x >= max - TIE_TOLERANCE * max.abs().max(1.0)).unwrap_or(0);
        (i, max)
    };
    let (mut i, score) = pick(&mut best[0].iter().copied());
    let mut path = vec![i];
    for l in 0..slots - 1 {
        let (j, _) = pick(&mut transitions[l][i].iter().zip(&best[l + 1]).map(|(t, b)| weights.gamma * t + b));
        path.push(j);
        i = j;
    }
    Ok(ViterbiResult { path, score })
}

/// Database predicates for pre-filtering by texture density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DbFilter {
    pub min_voices: Option<f64>,
    pub max_voices: Option<f64>,
    pub min_onsets_per_bar: Option<f64>,
    pub max_onsets_per_bar: Option<f64>,
}

impl DbFilter {
    pub fn accepts(&self, entry: &PhraseEntry) -> bool {
        let v = entry.voice_number();
        let o = entry.onsets_per_bar();
        self.min_voices.is_none_or(|m| v >= m)
            && self.max_voices.is_none_or(|m| v <= m)
            && self.min_onsets_per_bar.is_none_or(|m| o >= m)
            && self.max_onsets_per_bar.is_none_or(|m| o <= m)
    }
}

const DB_FORMAT: &str = "orchestrion-phrase-db";
const DB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DbFile {
    format: String,
    version: u32,
    entries: Vec<PhraseEntry>,
}

/// Immutable-after-build collection of piano phrases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhraseDb {
    entries: Vec<PhraseEntry>,
}

impl PhraseDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PhraseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: PhraseEntry) {
        self.entries.push(entry);
    }

    /// Adds every phrase of an annotated piece whose first track is the melody
    /// and whose remaining tracks form the accompaniment. Chords come from
    /// `chords` when given, otherwise from recognizing the accompaniment.
    /// Phrases of unsupported length are skipped; returns the number added.
    pub fn add_piece(&mut self, source: &str, piece: &Piece, chords: Option<&[ChordSymbol]>) -> Result<usize> {
        piece.validate()?;
        if piece.meter != Meter::FourFour {
            return Err(Error::invalid(format!("{source}: phrase databases need 4/4 pieces")));
        }
        let phrases = piece
            .phrases
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{source}: missing phrase annotation")))?;
        check_phrase_sum(phrases, piece.bar_count)?;
        if piece.tracks.len() < 2 {
            return Err(Error::invalid(format!("{source}: need a melody track and an accompaniment")));
        }
        let accompaniment = Piece::new(Meter::FourFour, piece.bar_count).with_tracks(piece.tracks[1..].to_vec());
        let piano = accompaniment.merged_track(instrument::PIANO);
        let recognized;
        let chords = match chords {
            Some(c) => c,
            None => {
                recognized = recognize_chords(&accompaniment);
                &recognized
            }
        };
        if chords.len() != piece.bar_count * BEATS_PER_BAR {
            return Err(Error::LengthMismatch {
                what: "beat count",
                expected: piece.bar_count * BEATS_PER_BAR,
                found: chords.len(),
            });
        }
        let mut added = 0;
        for (p, start) in phrases.iter().zip(phrase_starts(phrases)) {
            if !PHRASE_LENGTHS.contains(&p.length_bars) {
                log::debug!("{source}: skipping {}-bar phrase", p.length_bars);
                continue;
            }
            let (s, e) = ((start * STEPS_PER_BAR) as u32, ((start + p.length_bars) * STEPS_PER_BAR) as u32);
            self.entries.push(PhraseEntry::new(
                source,
                p.label,
                piece.tracks[0].window(s, e),
                piano.window(s, e),
                chords[start * BEATS_PER_BAR..(start + p.length_bars) * BEATS_PER_BAR].to_vec(),
            )?);
            added += 1;
        }
        Ok(added)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DbFile {
            format: DB_FORMAT.into(),
            version: DB_VERSION,
            entries: self.entries.clone(),
        })?)
    }

    /// Parses a stored database and recomputes every derived feature.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: DbFile = serde_json::from_str(text)?;
        if file.format != DB_FORMAT || file.version != DB_VERSION {
            return Err(Error::invalid(format!(
                "not a phrase database (format {:?} version {})",
                file.format, file.version
            )));
        }
        let mut entries = file.entries;
        for e in &mut entries {
            e.accompaniment.sort_notes();
            e.refresh()?;
        }
        Ok(PhraseDb { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_phrase_sum(phrases: &[Phrase], bars: usize) -> Result<()> {
    let sum: usize = phrases.iter().map(|p| p.length_bars).sum();
    if sum != bars {
        return Err(Error::invalid(format!("phrase lengths sum to {sum} bars, piece has {bars}")));
    }
    Ok(())
}

/// Picks one database entry per lead-sheet phrase; returns entry indices.
pub fn viterbi_select(
    queries: &[PhraseQuery],
    db: &PhraseDb,
    weights: &PlannerWeights,
    filter: &DbFilter,
) -> Result<Vec<usize>> {
    weights.validate()?;
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(queries.len());
    let mut fit = Vec::with_capacity(queries.len());
    for (index, q) in queries.iter().enumerate() {
        let c: Vec<usize> = (0..db.len())
            .filter(|&i| db.entries[i].length_bars == q.length_bars() && filter.accepts(&db.entries[i]))
            .collect();
        if c.is_empty() {
            return Err(Error::NoCandidates {
                index,
                label: q.label,
                length: q.length_bars(),
            });
        }
        fit.push(c.iter().map(|&i| fitness(&db.entries[i], q, weights)).collect());
        candidates.push(c);
    }
    let trans: Vec<Vec<Vec<f64>>> = candidates
        .windows(2)
        .map(|w| {
            w[0].iter()
                .map(|&a| w[1].iter().map(|&b| transition(&db.entries[a], &db.entries[b])).collect())
                .collect()
        })
        .collect();
    let result = viterbi(&fit, &trans, weights)?;
    Ok(result.path.iter().zip(&candidates).map(|(&i, c)| c[i]).collect())
}

/// `(to − from) mod 12` as a signed interval in `[−6, 5]`; the tritone goes down.
pub fn root_shift(from: u8, to: u8) -> i32 {
    let d = (i32::from(to) - i32::from(from)).rem_euclid(12);
    if d >= 6 {
        d - 12
    } else {
        d
    }
}

/// Nearest pitch whose class is in the chord; ties go to the lower pitch.
fn snap(pitch: i32, chord: ChordSymbol) -> i32 {
    for d in 0..=6 {
        for cand in [pitch - d, pitch + d] {
            if (0..=127).contains(&cand) && chord.contains_pc(cand.rem_euclid(12) as u8) {
                return cand;
            }
        }
    }
    pitch
}

/// Moves a pitch into MIDI range by whole octaves.
fn fold_into_range(mut p: i32) -> i32 {
    while p < 0 {
        p += 12;
    }
    while p > 127 {
        p -= 12;
    }
    p
}

/// Retargets an accompaniment from `source` chords to `target` chords, beat by
/// beat: transpose by the root interval, then snap former chord tones that
/// left the target chord to the nearest target chord tone. Rhythm is untouched.
pub fn reharmonize(accompaniment: &Track, source: &[ChordSymbol], target: &[ChordSymbol]) -> Result<Track> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            what: "beat count",
            expected: source.len(),
            found: target.len(),
        });
    }
    if source.is_empty() {
        return Err(Error::Empty("chord sequence"));
    }
    let notes = accompaniment
        .notes
        .iter()
        .map(|n| {
            let beat = (n.onset as usize / STEPS_PER_BEAT).min(source.len() - 1);
            let (s, t) = (source[beat], target[beat]);
            if s == t {
                return *n;
            }
            let was_tone = s.contains_pc(n.pitch % 12);
            let mut p = fold_into_range(i32::from(n.pitch) + root_shift(s.root, t.root));
            if was_tone && !t.contains_pc(p.rem_euclid(12) as u8) {
                p = snap(p, t);
            }
            NoteEvent::new(n.onset, n.duration, p as u8)
        })
        .collect();
    Ok(Track {
        notes,
        ..accompaniment.clone()
    })
}

/// Piano sketch of a lead sheet: the melody track followed by the retrieved,
/// re-harmonized piano accompaniment.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoArrangement {
    pub piece: Piece,
    /// Database entry chosen per phrase.
    pub selection: Vec<usize>,
}

impl PianoArrangement {
    /// The accompaniment alone as a one-track piece.
    pub fn accompaniment(&self) -> Piece {
        let mut p = Piece::new(self.piece.meter, self.piece.bar_count).with_tracks(vec![self.piece.tracks[1].clone()]);
        p.phrases = self.piece.phrases.clone();
        p
    }
}

pub fn arrange_piano(
    lead: &LeadSheet,
    db: &PhraseDb,
    weights: &PlannerWeights,
    filter: &DbFilter,
) -> Result<PianoArrangement> {
    let queries = lead_queries(lead)?;
    let selection = viterbi_select(&queries, db, weights, filter)?;
    let phrases = lead.phrases.as_ref().expect("checked by lead_queries");
    let mut notes = Vec::new();
    for ((q, &e), start) in queries.iter().zip(&selection).zip(phrase_starts(phrases)) {
        let entry = &db.entries[e];
        let piano = reharmonize(&entry.accompaniment, &entry.chords, &q.chords)?;
        notes.extend(piano.shifted((start * STEPS_PER_BAR) as i64).notes);
    }
    let mut piano = Track::new(instrument::PIANO).with_notes(notes);
    piano.sort_notes();
    let mut piece = Piece::new(Meter::FourFour, lead.bar_count()).with_tracks(vec![lead.melody.clone(), piano]);
    piece.phrases = Some(phrases.clone());
    piece.validate()?;
    Ok(PianoArrangement { piece, selection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Quality;
    use crate::toy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chord(text: &str) -> ChordSymbol {
        ChordSymbol::parse(text).unwrap()
    }

    #[test]
    fn root_shift_range() {
        assert_eq!(root_shift(0, 9), -3);
        assert_eq!(root_shift(0, 6), -6);
        assert_eq!(root_shift(0, 5), 5);
        assert_eq!(root_shift(11, 0), 1);
        assert!((0..12).all(|a| (0..12).all(|b| (-6..=5).contains(&root_shift(a, b)))));
    }

    #[test]
    fn c_major_block_to_a_minor() {
        let block = Track::new(0).with_notes(vec![
            NoteEvent::new(0, 4, 60),
            NoteEvent::new(0, 4, 64),
            NoteEvent::new(0, 4, 67),
        ]);
        let out = reharmonize(&block, &[chord("C:M")], &[chord("A:m")]).unwrap();
        let mut pitches: Vec<u8> = out.notes.iter().map(|n| n.pitch).collect();
        pitches.sort_unstable();
        // C→A, E→C#→C (snapped down), G→E
        assert_eq!(pitches, vec![57, 60, 64]);
        assert!(out.notes.iter().all(|n| n.onset == 0 && n.duration == 4));
        assert_eq!(reharmonize(&block, &[chord("C:M")], &[chord("C:M")]).unwrap(), block);
        assert!(reharmonize(&block, &[chord("C:M")], &[]).is_err());
    }

    #[test]
    fn snap_ties_go_down() {
        // D between C and E of C major
        assert_eq!(snap(62, ChordSymbol::new(0, Quality::Major)), 60);
    }

    fn toy_db(seed: u64, songs: usize) -> PhraseDb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut db = PhraseDb::new();
        for i in 0..songs {
            let s = toy::random_song(&mut rng);
            db.add_piece(&format!("song{i}"), &s.piece(), Some(&s.lead.chords)).unwrap();
        }
        db
    }

    #[test]
    fn fitness_identity_and_mismatch() {
        let db = toy_db(1, 3);
        let e = &db.entries()[0];
        let q = PhraseQuery {
            label: e.label,
            rhythm: e.rhythm.clone(),
            chords: e.chords.clone(),
        };
        let w = PlannerWeights::default();
        assert_eq!(fitness(e, &q, &w), 1.0);
        let short = PhraseQuery {
            label: 'X',
            rhythm: vec![[false; 16]; 2],
            chords: vec![chord("C:M"); 8],
        };
        assert_eq!(fitness(e, &short, &w), f64::NEG_INFINITY);
        for a in db.entries() {
            for b in db.entries() {
                let t = transition(a, b);
                assert!((0.0..=1.0 + 1e-12).contains(&t));
            }
        }
    }

    #[test]
    fn db_round_trip_recomputes_features() {
        let db = toy_db(2, 4);
        let back = PhraseDb::from_json(&db.to_json().unwrap()).unwrap();
        assert_eq!(back, db);
        let mut tampered: serde_json::Value = serde_json::from_str(&db.to_json().unwrap()).unwrap();
        tampered["entries"][0]["rhythm"][0][0] = serde_json::Value::Bool(true);
        tampered["entries"][0]["rhythm"][0][1] = serde_json::Value::Bool(true);
        assert!(PhraseDb::from_json(&tampered.to_string()).is_err());
    }

    #[test]
    fn self_retrieval_of_single_phrase() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let song = toy::song(&mut rng, &crate::score::parse_phrases("A8").unwrap());
        let mut db = toy_db(5, 3);
        db.add_piece("own", &song.piece(), Some(&song.lead.chords)).unwrap();
        let out = arrange_piano(&song.lead, &db, &PlannerWeights::default(), &DbFilter::default()).unwrap();
        assert_eq!(db.entries()[out.selection[0]].source, "own");
        let mut expected = song.accompaniment.clone();
        expected.sort_notes();
        assert_eq!(out.piece.tracks[1].notes, expected.notes);
    }

    #[test]
    fn missing_length_names_phrase() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let song = toy::song(&mut rng, &crate::score::parse_phrases("A4C16").unwrap());
        let mut db = PhraseDb::new();
        let other = toy::song(&mut rng, &crate::score::parse_phrases("A4").unwrap());
        db.add_piece("x", &other.piece(), None).unwrap();
        let err = arrange_piano(&song.lead, &db, &PlannerWeights::default(), &DbFilter::default()).unwrap_err();
        assert!(matches!(err, Error::NoCandidates { index: 1, label: 'C', length: 16 }), "{err}");
    }

    #[test]
    fn filter_excludes_dense_entries() {
        let db = toy_db(7, 4);
        let f = DbFilter {
            max_onsets_per_bar: Some(8.0),
            ..DbFilter::default()
        };
        for e in db.entries() {
            assert_eq!(f.accepts(e), e.onsets_per_bar() <= 8.0);
        }
    }
}
