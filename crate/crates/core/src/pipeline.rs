//! End-to-end orchestration and arrangement, the donor-search baseline and
//! dataset ingestion.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodeGrouping, MAX_TRACKS};
use crate::features::{cosine, track_function};
use crate::nn::Mat;
use crate::planner::{arrange_piano, DbFilter, PhraseDb, PianoArrangement, PlannerWeights};
use crate::prior::{Prior, PriorSegment, SamplingConfig, TimingCondition};
use crate::score::{downmix, from_clips, read_midi, to_clips, ClipGrid, LeadSheet, Meter, Piece, Track, CLIP_BARS};
use crate::{Error, Result};

/// Default noise weight at inference.
pub const DEFAULT_BETA: f64 = 0.5;
/// Default randomness ratio of the donor search.
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestrateOptions {
    pub beta: f64,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for OrchestrateOptions {
    fn default() -> Self {
        OrchestrateOptions {
            beta: DEFAULT_BETA,
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Orchestration {
    pub piece: Piece,
    /// Sampled groupings, `N` tracks × `T` clips.
    pub groupings: Vec<Vec<CodeGrouping>>,
}

/// Mixture codes (`T × mix_dim`) of the track-wise downmix of every clip.
pub fn mixture_codes(codec: &Codec, piece: &Piece) -> Result<Mat> {
    let clips: Vec<ClipGrid> = to_clips(piece).iter().map(downmix).collect();
    codec.encode_mixtures(&clips)
}

/// Groupings of every track of every clip, `N × T`.
pub fn piece_groupings(codec: &Codec, piece: &Piece) -> Result<Vec<Vec<CodeGrouping>>> {
    let mut out = vec![Vec::new(); piece.tracks.len()];
    for clip in to_clips(piece) {
        for (n, g) in codec.encode_clip_tracks(&clip)?.into_iter().enumerate() {
            out[n].push(g);
        }
    }
    Ok(out)
}

/// Training segment for the prior from a multi-track piece that starts at
/// clip `first_clip` of a song of `song_bars` bars.
pub fn prior_segment(codec: &Codec, piece: &Piece, song_bars: usize, first_clip: usize) -> Result<PriorSegment> {
    if piece.tracks.is_empty() || piece.tracks.len() > MAX_TRACKS {
        return Err(Error::invalid(format!(
            "prior segments need 1..={MAX_TRACKS} tracks, got {}",
            piece.tracks.len()
        )));
    }
    let mix = mixture_codes(codec, piece)?;
    let steps = mix.nrows();
    Ok(PriorSegment {
        mix: mix.rows().into_iter().map(|r| r.to_vec()).collect(),
        groupings: piece_groupings(codec, piece)?,
        instruments: piece.instruments(),
        timing: TimingCondition::for_clips(song_bars, first_clip, steps),
    })
}

fn check_instruments(instruments: &[u8], prior: &Prior) -> Result<()> {
    let limit = MAX_TRACKS.min(prior.config().max_tracks);
    if instruments.is_empty() || instruments.len() > limit {
        return Err(Error::invalid(format!(
            "need 1..={limit} instruments, got {}",
            instruments.len()
        )));
    }
    Ok(())
}

/// Orchestrates a single-track piano piece for the given instruments.
///
/// Pieces longer than the prior's step limit are sampled in windows that
/// overlap by one clip; each window is prompted with the last clip of the
/// previous one.
pub fn orchestrate(
    codec: &Codec,
    prior: &Prior,
    piano: &Piece,
    instruments: &[u8],
    prompt: Option<&Piece>,
    options: &OrchestrateOptions,
) -> Result<Orchestration> {
    piano.validate()?;
    if piano.tracks.len() != 1 {
        return Err(Error::invalid(format!(
            "piano input must be a single track, got {}; downmix it first",
            piano.tracks.len()
        )));
    }
    check_instruments(instruments, prior)?;
    if !(0.0..=1.0).contains(&options.beta) {
        return Err(Error::invalid(format!("beta must be in [0, 1], got {}", options.beta)));
    }
    let piano = piano.to_four_four();
    let clips = to_clips(&piano);
    let mix = codec.encode_mixtures(&clips)?;
    let steps = mix.nrows();
    let prompt_groupings = match prompt {
        Some(p) => {
            p.validate()?;
            if p.tracks.len() != instruments.len() {
                return Err(Error::LengthMismatch {
                    what: "prompt track count",
                    expected: instruments.len(),
                    found: p.tracks.len(),
                });
            }
            let g = piece_groupings(codec, &p.to_four_four())?;
            if g[0].len() >= steps {
                return Err(Error::invalid(format!(
                    "prompt spans {} clips but the piano only has {steps}",
                    g[0].len()
                )));
            }
            Some(g)
        }
        None => None,
    };
    let window = prior.config().max_steps;
    let mut groupings: Vec<Vec<CodeGrouping>> = vec![Vec::with_capacity(steps); instruments.len()];
    let mut start = 0;
    let mut chunk = 0u64;
    while groupings[0].len() < steps {
        let end = (start + window).min(steps);
        let codes = mix.slice(ndarray::s![start..end, ..]).to_owned();
        let timing = TimingCondition::for_clips(piano.bar_count, start, end - start);
        let carried: Option<Vec<Vec<CodeGrouping>>> = if start == 0 {
            prompt_groupings.clone()
        } else {
            Some(groupings.iter().map(|g| g[start..].to_vec()).collect())
        };
        let sampled = prior.sample(
            &codes,
            &timing,
            options.beta,
            instruments,
            carried.as_deref(),
            options.sampling,
            options.seed.wrapping_add(chunk),
        )?;
        for (dst, src) in groupings.iter_mut().zip(sampled) {
            let have = dst.len() - start;
            dst.extend_from_slice(&src[have..]);
        }
        if end == steps {
            break;
        }
        // Overlap one clip so the next window is conditioned on this one.
        start = if window > 1 { end - 1 } else { end };
        chunk += 1;
    }
    let mut out_clips = Vec::with_capacity(steps);
    for t in 0..steps {
        let step: Vec<CodeGrouping> = groupings.iter().map(|g| g[t]).collect();
        out_clips.push(codec.decode(&mix.row(t).to_vec(), &step, instruments)?);
    }
    let templates: Vec<Track> = instruments.iter().map(|&i| Track::new(i)).collect();
    let mut piece = from_clips(&out_clips, &templates, piano.bar_count)?;
    piece.phrases = piano.phrases.clone();
    piece.validate()?;
    Ok(Orchestration { piece, groupings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arrangement {
    /// Melody first, then one track per requested instrument.
    pub piece: Piece,
    pub sketch: PianoArrangement,
    pub groupings: Vec<Vec<CodeGrouping>>,
}

impl Arrangement {
    /// The orchestrated accompaniment without the melody.
    pub fn accompaniment(&self) -> Piece {
        let mut p = self.piece.clone();
        p.tracks.remove(0);
        p
    }
}

/// Full arrangement: piano sketch, orchestration of its accompaniment, and the
/// lead melody reattached as the top track.
#[allow(clippy::too_many_arguments)]
pub fn arrange(
    lead: &LeadSheet,
    db: &PhraseDb,
    weights: &PlannerWeights,
    filter: &DbFilter,
    codec: &Codec,
    prior: &Prior,
    instruments: &[u8],
    prompt: Option<&Piece>,
    options: &OrchestrateOptions,
) -> Result<Arrangement> {
    let sketch = arrange_piano(lead, db, weights, filter)?;
    let band = orchestrate(codec, prior, &sketch.accompaniment(), instruments, prompt, options)?;
    let mut tracks = vec![lead.melody.clone()];
    tracks.extend(band.piece.tracks);
    let mut piece = Piece::new(Meter::FourFour, lead.bar_count()).with_tracks(tracks);
    piece.phrases = lead.phrases.clone();
    piece.validate()?;
    Ok(Arrangement {
        piece,
        sketch,
        groupings: band.groupings,
    })
}

/// `concat(f^p, f^t)` of the first clip of the track-wise mixture.
pub fn opening_features(piece: &Piece) -> Result<Vec<f64>> {
    let clip = to_clips(piece)
        .into_iter()
        .next()
        .ok_or(Error::Empty("piece"))?;
    Ok(track_function(&downmix(&clip), 0)?.concat())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DonorMatch {
    pub index: usize,
    pub score: f64,
    /// The winner's first two bars.
    pub segment: Piece,
    /// The winner's remaining bars, if any.
    pub continuation: Option<Piece>,
}

/// Picks the database piece whose opening best matches the opening of `x`,
/// with `α·ε` Gaussian noise per candidate for variety. Ties go to the lowest index.
pub fn donor_search(x: &Piece, db: &[Piece], alpha: f64, seed: u64) -> Result<DonorMatch> {
    if db.is_empty() {
        return Err(Error::Empty("donor database"));
    }
    let target = opening_features(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64)> = None;
    for (i, y) in db.iter().enumerate() {
        let noise: f64 = StandardNormal.sample(&mut rng);
        let score = cosine(&opening_features(y)?, &target) + alpha * noise;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    let (index, score) = best.expect("nonempty db");
    let winner = db[index].to_four_four();
    let head = CLIP_BARS.min(winner.bar_count);
    let continuation = (winner.bar_count > head).then(|| winner.slice_bars(head, winner.bar_count - head));
    Ok(DonorMatch {
        index,
        score,
        segment: winner.slice_bars(0, head),
        continuation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Song-level split proportions, e.g. `8:1:1` or `95/5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split([':', '/'])
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad split spec {text:?}")))?;
        let spec = match parts[..] {
            [train, valid] => SplitSpec { train, valid, test: 0.0 },
            [train, valid, test] => SplitSpec { train, valid, test },
            _ => return Err(Error::invalid(format!("split spec {text:?} needs 2 or 3 parts"))),
        };
        let all = [spec.train, spec.valid, spec.test];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(format!("split spec {text:?} must be non-negative and not all zero")));
        }
        Ok(spec)
    }

    /// Song counts per split for `n` songs.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let total = self.train + self.valid + self.test;
        let train = ((n as f64) * self.train / total).round() as usize;
        let valid = (((n as f64) * self.valid / total).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        [train, valid, n - train - valid]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub split: SplitSpec,
    pub segment_bars: usize,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            split: SplitSpec {
                train: 8.0,
                valid: 1.0,
                test: 1.0,
            },
            segment_bars: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub start_bar: usize,
    pub bars: usize,
    /// Whether prior training codes were cached for this segment.
    pub codes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub file: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub bars: usize,
    pub tracks: usize,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: IngestConfig,
    pub accepted: usize,
    pub skipped: usize,
    pub files: Vec<FileRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSegment {
    pub id: String,
    pub split: Split,
    pub song_bars: usize,
    pub start_bar: usize,
    pub piece: Piece,
    pub codes: Option<PriorSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub segments: Vec<DatasetSegment>,
}

fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every MIDI file of `dir`, splits songs with a seeded shuffle and cuts
/// them into segments of at most `segment_bars` bars. With a codec, each
/// segment also gets its prior training codes.
pub fn ingest(dir: &Path, config: &IngestConfig, codec: Option<&Codec>) -> Result<Dataset> {
    if config.segment_bars == 0 || config.segment_bars % CLIP_BARS != 0 {
        return Err(Error::invalid("segment_bars must be a positive even number"));
    }
    let mut records = Vec::new();
    let mut pieces = Vec::new();
    for path in midi_files(dir)? {
        let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
        let read = read_midi(&path, true).map(|mut p| {
            p.tracks.retain(|t| !t.notes.is_empty());
            p
        });
        match read {
            Ok(piece) if piece.tracks.is_empty() || piece.bar_count == 0 => {
                records.push(skipped(file, "no pitched notes".into()));
            }
            Ok(piece) => {
                let piece = piece.to_four_four();
                records.push(FileRecord {
                    file,
                    accepted: true,
                    reason: None,
                    split: None,
                    bars: piece.bar_count,
                    tracks: piece.tracks.len(),
                    segments: Vec::new(),
                });
                pieces.push((records.len() - 1, piece));
            }
            Err(e) if e.is_io() => return Err(e),
            Err(e) => {
                log::warn!("skipping {file}: {e}");
                records.push(skipped(file, e.to_string()));
            }
        }
    }
    let mut order: Vec<usize> = (0..pieces.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let [train, valid, _] = config.split.counts(pieces.len());
    let mut assignment = vec![Split::Test; pieces.len()];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = if rank < train {
            Split::Train
        } else if rank < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    let mut segments = Vec::new();
    for ((r, piece), split) in pieces.iter().zip(assignment) {
        let record = &mut records[*r];
        record.split = Some(split);
        let stem = record.file.rsplit_once('.').map_or(record.file.as_str(), |(s, _)| s).to_string();
        for (k, start) in (0..piece.bar_count).step_by(config.segment_bars).enumerate() {
            let bars = config.segment_bars.min(piece.bar_count - start);
            let seg = piece.slice_bars(start, bars);
            let codes = match codec {
                Some(c) if (1..=MAX_TRACKS).contains(&seg.tracks.len()) => {
                    Some(prior_segment(c, &seg, piece.bar_count, start / CLIP_BARS)?)
                }
                _ => None,
            };
            let id = format!("{stem}_{k:03}");
            record.segments.push(SegmentRecord {
                id: id.clone(),
                start_bar: start,
                bars,
                codes: codes.is_some(),
            });
            segments.push(DatasetSegment {
                id,
                split,
                song_bars: piece.bar_count,
                start_bar: start,
                piece: seg,
                codes,
            });
        }
    }
    let accepted = records.iter().filter(|r| r.accepted).count();
    Ok(Dataset {
        manifest: Manifest {
            config: config.clone(),
            accepted,
            skipped: records.len() - accepted,
            files: records,
        },
        segments,
    })
}

fn skipped(file: String, reason: String) -> FileRecord {
    FileRecord {
        file,
        accepted: false,
        reason: Some(reason),
        split: None,
        bars: 0,
        tracks: 0,
        segments: Vec::new(),
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Writes `manifest.json`, `segments/<id>.json` and `codes/<id>.json`.
    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out.join("segments"))?;
        std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        for s in &self.segments {
            std::fs::write(out.join("segments").join(format!("{}.json", s.id)), s.piece.to_json()?)?;
            if let Some(codes) = &s.codes {
                std::fs::create_dir_all(out.join("codes"))?;
                std::fs::write(out.join("codes").join(format!("{}.json", s.id)), serde_json::to_string(codes)?)?;
            }
        }
        Ok(())
    }

    /// Loads a dataset written by [`Dataset::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut segments = Vec::new();
        for f in &manifest.files {
            let Some(split) = f.split else { continue };
            for s in &f.segments {
                let piece = Piece::load_json(dir.join("segments").join(format!("{}.json", s.id)))?;
                let codes = if s.codes {
                    let text = std::fs::read_to_string(dir.join("codes").join(format!("{}.json", s.id)))?;
                    Some(serde_json::from_str(&text)?)
                } else {
                    None
                };
                segments.push(DatasetSegment {
                    id: s.id.clone(),
                    split,
                    song_bars: f.bars,
                    start_bar: s.start_bar,
                    piece,
                    codes,
                });
            }
        }
        Ok(Dataset { manifest, segments })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetSegment> {
        self.segments.iter().filter(move |s| s.split == split)
    }
}
