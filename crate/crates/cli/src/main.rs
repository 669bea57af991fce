use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use orchestrion::codec::{Codec, CodecConfig, CodecTrainConfig};
use orchestrion::features::{piece_bar_features, track_function, Scope};
use orchestrion::metrics::{corpus_report, evaluate, References};
use orchestrion::pipeline::{
    self, donor_search, ingest, Dataset, IngestConfig, OrchestrateOptions, Split, SplitSpec, DEFAULT_ALPHA,
    DEFAULT_BETA,
};
use orchestrion::planner::{DbFilter, PhraseDb, PlannerWeights};
use orchestrion::prior::{Prior, PriorConfig, PriorSegment, PriorTrainConfig, SamplingConfig};
use orchestrion::score::{
    instrument, parse_phrases, read_midi, to_clips, write_midi, LeadSheet, Piece, CLIP_BARS,
};
use orchestrion::{toy, Error};

/// Lead-sheet to band accompaniment: phrase planning, orchestration and evaluation.
#[derive(Parser)]
#[command(name = "orchestrion", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON file with model, training, sampling and planner settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Codec checkpoint.
    #[arg(long, global = true)]
    codec: Option<PathBuf>,
    /// Prior checkpoint.
    #[arg(long, global = true)]
    prior: Option<PathBuf>,
    /// Noise weight blended into the mixture codes, in [0, 1].
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long = "nucleus-p", global = true)]
    nucleus_p: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Comma-separated instrument classes, e.g. "0,5,12".
    #[arg(long, global = true)]
    instruments: Option<String>,
    /// Multi-track MIDI whose first bars seed the orchestration.
    #[arg(long, global = true)]
    prompt: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct FilterArgs {
    #[arg(long)]
    min_voices: Option<f64>,
    #[arg(long)]
    max_voices: Option<f64>,
    #[arg(long)]
    min_onsets_per_bar: Option<f64>,
    #[arg(long)]
    max_onsets_per_bar: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a MIDI folder into train/valid/test segments and write a manifest.
    Ingest {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Song-level proportions such as "8:1:1" or "95/5".
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        segment_bars: Option<usize>,
    },
    /// Build a phrase database from MIDI files with phrase sidecars.
    BuildDb {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Train the function codec on a dataset folder or a folder of MIDI files.
    TrainCodec {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the prior on codes produced by a codec checkpoint.
    TrainPrior {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Arrange a lead sheet: piano sketch, orchestration, melody on top.
    Arrange {
        #[arg(long)]
        lead: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Phrase annotation overriding the lead sheet's, e.g. "A8A8B8B8".
        #[arg(long)]
        phrases: Option<String>,
        /// Also write the piano sketch here.
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Orchestrate a single-track piano piece.
    Orchestrate {
        #[arg(long)]
        piano: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find a prompt donor in a folder of multi-track pieces.
    DonorSearch {
        #[arg(long)]
        piano: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        continuation: Option<PathBuf>,
    },
    /// Compute metrics for one or more results.
    Evaluate {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Piano reference for faithfulness and creativity metrics.
        #[arg(long)]
        piano: Option<PathBuf>,
        /// Lead sheet for chord accuracy.
        #[arg(long)]
        lead: Option<PathBuf>,
        #[arg(long)]
        phrases: Option<String>,
        /// The first track of each result is a melody and is left out of chord accuracy.
        #[arg(long)]
        melody_track: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Dump bar features and track functions of a piece as JSON.
    Features {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus, phrase-annotated songs and a lead sheet.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        pieces: usize,
        #[arg(long, default_value_t = 12)]
        songs: usize,
        #[arg(long, default_value_t = 8)]
        bars: usize,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    codec: CodecConfig,
    codec_train: CodecTrainConfig,
    prior: PriorConfig,
    prior_train: PriorTrainConfig,
    sampling: SamplingConfig,
    beta: Option<f64>,
    alpha: Option<f64>,
    instruments: Option<Vec<u8>>,
    planner: PlannerWeights,
    filter: DbFilter,
    ingest: IngestConfig,
}

type CliResult<T> = Result<T, Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

fn load_config(global: &Global) -> CliResult<Config> {
    let mut config = match &global.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        config.codec_train.seed = seed;
        config.prior_train.seed = seed;
        config.ingest.seed = seed;
    }
    if let Some(p) = global.nucleus_p {
        config.sampling.nucleus_p = p;
    }
    if let Some(t) = global.temperature {
        config.sampling.temperature = t;
    }
    if let Some(b) = global.beta {
        config.beta = Some(b);
    }
    if let Some(list) = &global.instruments {
        config.instruments = Some(parse_instruments(list)?);
    }
    if !(config.sampling.nucleus_p > 0.0 && config.sampling.nucleus_p <= 1.0) {
        return Err(Error::invalid("nucleus-p must be in (0, 1]"));
    }
    if !(config.sampling.temperature > 0.0 && config.sampling.temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(config)
}

fn parse_instruments(list: &str) -> CliResult<Vec<u8>> {
    list.split(',')
        .map(|s| {
            let v: u8 = s
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad instrument {s:?} in {list:?}")))?;
            if usize::from(v) >= instrument::CLASS_COUNT {
                return Err(Error::invalid(format!(
                    "instrument class {v} out of range 0..{}",
                    instrument::CLASS_COUNT
                )));
            }
            Ok(v)
        })
        .collect()
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn read_piece(path: &Path) -> CliResult<Piece> {
    let piece = if is_json(path) {
        Piece::load_json(path)?
    } else {
        read_midi(path, true)?
    };
    piece.validate()?;
    Ok(piece)
}

fn write_piece(piece: &Piece, path: &Path) -> CliResult<()> {
    if is_json(path) {
        std::fs::write(path, piece.to_json()?)?;
    } else {
        write_midi(piece, path)?;
    }
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref().ok_or_else(|| Error::invalid(format!("--{flag} is required")))
}

fn print_json(value: &serde_json::Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn filter_of(base: DbFilter, args: &FilterArgs) -> DbFilter {
    DbFilter {
        min_voices: args.min_voices.or(base.min_voices),
        max_voices: args.max_voices.or(base.max_voices),
        min_onsets_per_bar: args.min_onsets_per_bar.or(base.min_onsets_per_bar),
        max_onsets_per_bar: args.max_onsets_per_bar.or(base.max_onsets_per_bar),
    }
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.iter().any(|x| e.eq_ignore_ascii_case(x)))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Training pieces: the train split of a dataset folder, or every MIDI file of a plain folder.
fn training_segments(data: &Path) -> CliResult<Vec<pipeline::DatasetSegment>> {
    if data.join(pipeline::MANIFEST_FILE).exists() {
        let ds = Dataset::load(data)?;
        return Ok(ds.split(Split::Train).cloned().collect());
    }
    let mut out = Vec::new();
    for path in sorted_files(data, &["mid", "midi", "json"])? {
        let piece = read_piece(&path)?.to_four_four();
        out.push(pipeline::DatasetSegment {
            id: path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
            split: Split::Train,
            song_bars: piece.bar_count,
            start_bar: 0,
            piece,
            codes: None,
        });
    }
    Ok(out)
}

fn instruments_of(config: &Config) -> CliResult<Vec<u8>> {
    config
        .instruments
        .clone()
        .ok_or_else(|| Error::invalid("--instruments is required"))
}

fn options_of(config: &Config, seed: Option<u64>) -> OrchestrateOptions {
    OrchestrateOptions {
        beta: config.beta.unwrap_or(DEFAULT_BETA),
        sampling: config.sampling,
        seed: seed.unwrap_or(0),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Ingest {
            dir,
            out,
            split,
            segment_bars,
        } => {
            let mut ic = config.ingest.clone();
            if let Some(s) = split {
                ic.split = SplitSpec::parse(&s)?;
            }
            if let Some(b) = segment_bars {
                ic.segment_bars = b;
            }
            let codec = g.codec.as_deref().map(Codec::load).transpose()?;
            let ds = ingest(&dir, &ic, codec.as_ref())?;
            ds.write(&out)?;
            print_json(&json!({
                "accepted": ds.manifest.accepted,
                "skipped": ds.manifest.skipped,
                "segments": ds.segments.len(),
            }))
        }
        Command::BuildDb { dir, out, filter } => {
            let filter = filter_of(config.filter, &filter);
            let mut db = PhraseDb::new();
            let mut skipped = Vec::new();
            for path in sorted_files(&dir, &["mid", "midi", "json"])? {
                let name = path.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
                let sidecar = ["phrases", "txt"]
                    .iter()
                    .map(|ext| path.with_extension(ext))
                    .find(|p| p.exists());
                let result = (|| -> CliResult<PhraseDb> {
                    let mut piece = read_piece(&path)?;
                    if let Some(sc) = &sidecar {
                        piece.phrases = Some(parse_phrases(&std::fs::read_to_string(sc)?)?);
                    }
                    let mut one = PhraseDb::new();
                    one.add_piece(&name, &piece, None)?;
                    Ok(one)
                })();
                match result {
                    Ok(one) => one
                        .entries()
                        .iter()
                        .filter(|e| filter.accepts(e))
                        .for_each(|e| db.push(e.clone())),
                    Err(e) if e.is_io() => return Err(e),
                    Err(e) => {
                        log::warn!("skipping {name}: {e}");
                        skipped.push(json!({"file": name, "reason": e.to_string()}));
                    }
                }
            }
            db.save(&out)?;
            print_json(&json!({"entries": db.len(), "skipped": skipped}))
        }
        Command::TrainCodec { data, out, epochs } => {
            let mut train = config.codec_train.clone();
            if let Some(e) = epochs {
                train.epochs = e;
            }
            let pieces: Vec<Piece> = training_segments(&data)?.into_iter().map(|s| s.piece).collect();
            let (codec, stats) = Codec::train(&pieces, config.codec.clone(), &train)?;
            codec.save(&out)?;
            print_json(&json!({"pieces": pieces.len(), "epochs": stats}))
        }
        Command::TrainPrior { data, out, steps } => {
            let codec = Codec::load(require(&g.codec, "codec")?)?;
            let mut pc = config.prior.clone();
            pc.mix_dim = codec.config().mix_dim;
            pc.pitch_codes = codec.config().pitch_codes;
            pc.time_codes = codec.config().time_codes;
            let mut train = config.prior_train.clone();
            if let Some(s) = steps {
                train.steps = s;
            }
            let mut segments: Vec<PriorSegment> = Vec::new();
            for s in training_segments(&data)? {
                if s.piece.tracks.is_empty() || s.piece.tracks.len() > pc.max_tracks {
                    log::warn!("{}: {} tracks, skipped", s.id, s.piece.tracks.len());
                    continue;
                }
                let seg = match s.codes {
                    Some(c) => c,
                    None => pipeline::prior_segment(&codec, &s.piece, s.song_bars, s.start_bar / CLIP_BARS)?,
                };
                if seg.steps() > pc.max_steps {
                    log::warn!("{}: {} clips exceed max_steps, skipped", s.id, seg.steps());
                    continue;
                }
                segments.push(seg);
            }
            let (prior, losses) = Prior::train(&segments, pc, &train)?;
            prior.save(&out)?;
            print_json(&json!({"segments": segments.len(), "steps": losses.len(), "final_loss": losses.last()}))
        }
        Command::Arrange {
            lead,
            db,
            out,
            phrases,
            sketch,
            filter,
        } => {
            let mut lead = LeadSheet::load_json(&lead)?;
            if let Some(p) = phrases {
                lead.phrases = Some(parse_phrases(&p)?);
                lead.validate()?;
            }
            let db = PhraseDb::load(&db)?;
            let filter = filter_of(config.filter, &filter);
            let instruments = instruments_of(&config)?;
            let codec = Codec::load(require(&g.codec, "codec")?)?;
            let prior = Prior::load(require(&g.prior, "prior")?)?;
            let prompt = g.prompt.as_deref().map(read_piece).transpose()?;
            let arrangement = pipeline::arrange(
                &lead,
                &db,
                &config.planner,
                &filter,
                &codec,
                &prior,
                &instruments,
                prompt.as_ref(),
                &options_of(&config, g.seed),
            )?;
            write_piece(&arrangement.piece, &out)?;
            if let Some(path) = sketch {
                write_piece(&arrangement.sketch.piece, &path)?;
            }
            let sources: Vec<&str> = arrangement
                .sketch
                .selection
                .iter()
                .map(|&i| db.entries()[i].source.as_str())
                .collect();
            print_json(&json!({
                "bars": arrangement.piece.bar_count,
                "tracks": arrangement.piece.tracks.len(),
                "selection": arrangement.sketch.selection,
                "sources": sources,
            }))
        }
        Command::Orchestrate { piano, out } => {
            let piano = read_piece(&piano)?;
            let instruments = instruments_of(&config)?;
            let codec = Codec::load(require(&g.codec, "codec")?)?;
            let prior = Prior::load(require(&g.prior, "prior")?)?;
            let prompt = g.prompt.as_deref().map(read_piece).transpose()?;
            let o = pipeline::orchestrate(
                &codec,
                &prior,
                &piano,
                &instruments,
                prompt.as_ref(),
                &options_of(&config, g.seed),
            )?;
            write_piece(&o.piece, &out)?;
            print_json(&json!({"bars": o.piece.bar_count, "tracks": o.piece.tracks.len()}))
        }
        Command::DonorSearch {
            piano,
            db,
            alpha,
            out,
            continuation,
        } => {
            let x = read_piece(&piano)?;
            let files = sorted_files(&db, &["mid", "midi", "json"])?;
            let pieces = files.iter().map(|f| read_piece(f)).collect::<CliResult<Vec<_>>>()?;
            let alpha = alpha.or(config.alpha).unwrap_or(DEFAULT_ALPHA);
            let m = donor_search(&x, &pieces, alpha, g.seed.unwrap_or(0))?;
            write_piece(&m.segment, &out)?;
            if let (Some(path), Some(c)) = (continuation, &m.continuation) {
                write_piece(c, &path)?;
            }
            print_json(&json!({
                "index": m.index,
                "file": files[m.index].file_name().and_then(|f| f.to_str()),
                "score": m.score,
            }))
        }
        Command::Evaluate {
            results,
            piano,
            lead,
            phrases,
            melody_track,
            json: json_out,
        } => {
            let piano = piano.as_deref().map(read_piece).transpose()?;
            let lead = lead.as_deref().map(LeadSheet::load_json).transpose()?;
            let phrases = phrases.as_deref().map(parse_phrases).transpose()?;
            let refs = References {
                piano: piano.as_ref(),
                lead: lead.as_ref(),
                phrases: phrases.as_deref(),
            };
            let mut reports = Vec::new();
            for path in &results {
                let result = read_piece(path)?;
                let accompaniment = melody_track.then(|| {
                    let mut p = result.clone();
                    if !p.tracks.is_empty() {
                        p.tracks.remove(0);
                    }
                    p
                });
                reports.push(evaluate(&result, accompaniment.as_ref(), &refs)?);
            }
            let report = corpus_report(reports);
            let text = serde_json::to_string_pretty(&report)?;
            match json_out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            print!("{}", report.table());
            Ok(())
        }
        Command::Features { input, out } => {
            let piece = read_piece(&input)?;
            let bars = piece_bar_features(&piece, Scope::Mixture)?;
            let mut clips = Vec::new();
            for (c, clip) in to_clips(&piece).iter().enumerate() {
                let tracks = (0..clip.track_count())
                    .map(|n| track_function(clip, n))
                    .collect::<orchestrion::Result<Vec<_>>>()?;
                clips.push(json!({"clip": c, "tracks": tracks}));
            }
            let dump = json!({
                "piece": input.file_stem().and_then(|s| s.to_str()),
                "bars": bars.iter().enumerate().map(|(k, f)| json!({
                    "bar": k,
                    "pitch_hist": f.pitch_hist,
                    "voice_intensity": f.voice_intensity,
                    "groove": f.groove,
                })).collect::<Vec<_>>(),
                "clips": clips,
            });
            match out {
                Some(path) => std::fs::write(path, serde_json::to_string_pretty(&dump)?)?,
                None => print_json(&dump)?,
            }
            Ok(())
        }
        Command::ToyData {
            out,
            pieces,
            songs,
            bars,
        } => toy_data(&out, pieces, songs, bars, g.seed.unwrap_or(0)),
    }
}

/// `corpus/` band pieces, `songs/` annotated melody+piano songs, `lead.json` and `piano.mid`.
fn toy_data(out: &Path, pieces: usize, songs: usize, bars: usize, seed: u64) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out.join("corpus"))?;
    std::fs::create_dir_all(out.join("songs"))?;
    for i in 0..pieces {
        write_midi(&toy::band_piece(&mut rng, bars), out.join("corpus").join(format!("band{i:03}.mid")))?;
    }
    for i in 0..songs {
        let s = toy::random_song(&mut rng);
        let stem = out.join("songs").join(format!("song{i:03}"));
        write_midi(&s.piece(), stem.with_extension("mid"))?;
        let annotation = orchestrion::score::format_phrases(s.lead.phrases.as_deref().unwrap_or_default());
        std::fs::write(stem.with_extension("phrases"), annotation)?;
    }
    let lead = toy::aabb_lead(&mut rng);
    std::fs::write(out.join("lead.json"), lead.to_json()?)?;
    // A single-track piano over the lead chords, ready for `orchestrate`.
    let piano = Piece::new(orchestrion::score::Meter::FourFour, lead.bar_count())
        .with_tracks(vec![toy::piano_texture(&lead.chords, toy::Texture::Arpeggio)]);
    write_midi(&piano, out.join("piano.mid"))?;
    print_json(&json!({"pieces": pieces, "songs": songs, "lead_bars": lead.bar_count()}))
}
