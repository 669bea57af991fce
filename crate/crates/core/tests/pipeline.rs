use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orchestrion::codec::{Codec, CodecConfig};
use orchestrion::metrics::a_chord;
use orchestrion::pipeline::{
    donor_search, ingest, orchestrate, piece_groupings, Dataset, IngestConfig, OrchestrateOptions, Split, SplitSpec,
};
use orchestrion::planner::{arrange_piano, DbFilter, PhraseDb, PlannerWeights};
use orchestrion::prior::{Prior, PriorConfig};
use orchestrion::score::{write_midi, Meter, NoteEvent, Piece, Track};
use orchestrion::{toy, Error};

fn micro_models() -> (Codec, Prior) {
    let codec = Codec::new(CodecConfig::micro(), 1).unwrap();
    let prior = Prior::new(PriorConfig::micro(codec.config().mix_dim), 1).unwrap();
    (codec, prior)
}

fn piano(bars: usize, seed: u64) -> Piece {
    let band = toy::band_piece(&mut ChaCha8Rng::seed_from_u64(seed), bars);
    Piece::new(Meter::FourFour, bars).with_tracks(vec![band.merged_track(0)])
}

#[test]
fn orchestration_shape_and_seeding() {
    let (codec, prior) = micro_models();
    let p = piano(10, 3);
    let instruments = [0, 8, 24, 33];
    let opts = OrchestrateOptions {
        seed: 9,
        ..OrchestrateOptions::default()
    };
    let a = orchestrate(&codec, &prior, &p, &instruments, None, &opts).unwrap();
    assert_eq!(a.piece.tracks.len(), 4);
    assert_eq!(a.piece.bar_count, 10);
    assert_eq!(a.piece.instruments(), instruments);
    assert!(a.groupings.iter().all(|g| g.len() == 5));
    a.piece.validate().unwrap();
    let b = orchestrate(&codec, &prior, &p, &instruments, None, &opts).unwrap();
    assert_eq!(a, b);
    let other = OrchestrateOptions { seed: 10, ..opts };
    let c = orchestrate(&codec, &prior, &p, &instruments, None, &other).unwrap();
    assert_ne!(a.groupings, c.groupings);
}

#[test]
fn orchestration_input_errors() {
    let (codec, prior) = micro_models();
    let band = toy::band_piece(&mut ChaCha8Rng::seed_from_u64(4), 4);
    let err = orchestrate(&codec, &prior, &band, &[0, 8], None, &OrchestrateOptions::default()).unwrap_err();
    assert!(err.to_string().contains("downmix"), "{err}");

    let p = piano(8, 4);
    let prompt = band.slice_bars(0, 2);
    let wrong = vec![0u8; prompt.tracks.len() + 1];
    assert!(matches!(
        orchestrate(&codec, &prior, &p, &wrong, Some(&prompt), &OrchestrateOptions::default()),
        Err(Error::LengthMismatch { .. })
    ));
    let bad_beta = OrchestrateOptions {
        beta: 1.5,
        ..OrchestrateOptions::default()
    };
    assert!(orchestrate(&codec, &prior, &p, &[0], None, &bad_beta).is_err());
    assert!(orchestrate(&codec, &prior, &p, &[], None, &OrchestrateOptions::default()).is_err());
}

#[test]
fn prompt_survives_orchestration() {
    let (codec, prior) = micro_models();
    let band = toy::band_piece(&mut ChaCha8Rng::seed_from_u64(5), 12);
    let p = Piece::new(Meter::FourFour, 12).with_tracks(vec![band.merged_track(0)]);
    let prompt = band.slice_bars(0, 4);
    let o = orchestrate(&codec, &prior, &p, &band.instruments(), Some(&prompt), &OrchestrateOptions::default()).unwrap();
    let want = piece_groupings(&codec, &prompt).unwrap();
    for (got, want) in o.groupings.iter().zip(&want) {
        assert_eq!(&got[..2], &want[..]);
    }
}

#[test]
fn piano_sketch_follows_lead_chords() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let db = toy::phrase_db(&mut rng, 12).unwrap();
    let lead = toy::aabb_lead(&mut rng);
    let sketch = arrange_piano(&lead, &db, &PlannerWeights::default(), &DbFilter::default()).unwrap();
    assert_eq!(sketch.piece.tracks[0], lead.melody);
    assert_eq!(sketch.selection.len(), 4);
    let acc = a_chord(&sketch.accompaniment(), &lead).unwrap();
    assert!(acc >= 0.9, "{acc}");

    let dir = tempfile::tempdir().unwrap();
    db.save(dir.path().join("db.json")).unwrap();
    let back = PhraseDb::load(dir.path().join("db.json")).unwrap();
    let again = arrange_piano(&lead, &back, &PlannerWeights::default(), &DbFilter::default()).unwrap();
    assert_eq!(again, sketch);
}

#[test]
fn donor_search_prefers_matching_opening() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let db: Vec<Piece> = (0..5).map(|_| toy::band_piece(&mut rng, 6)).collect();
    let x = Piece::new(Meter::FourFour, 6).with_tracks(vec![db[3].merged_track(0)]);
    let m = donor_search(&x, &db, 0.0, 1).unwrap();
    assert_eq!(m.index, 3);
    assert!((m.score - 1.0).abs() < 1e-12);
    assert_eq!(m.segment.bar_count, 2);
    assert_eq!(m.continuation.as_ref().map(|c| c.bar_count), Some(4));
    assert_eq!(donor_search(&x, &db, 0.5, 2).unwrap(), donor_search(&x, &db, 0.5, 2).unwrap());
}

#[test]
fn ingest_splits_segments_and_skips_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("midi");
    std::fs::create_dir(&src).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10 {
        write_midi(&toy::band_piece(&mut rng, 8 + 4 * (i % 3)), src.join(format!("song{i:02}.mid"))).unwrap();
    }
    std::fs::write(src.join("broken.mid"), b"not a midi file").unwrap();
    let silent = Piece::new(Meter::FourFour, 2).with_tracks(vec![Track::new(0)]);
    write_midi(&silent, src.join("silent.mid")).unwrap();
    let long = Piece::new(Meter::FourFour, 20)
        .with_tracks(vec![Track::new(0).with_notes(vec![NoteEvent::new(0, 4, 60), NoteEvent::new(300, 4, 62)])]);
    write_midi(&long, src.join("long.mid")).unwrap();

    let config = IngestConfig {
        split: SplitSpec::parse("8:1:1").unwrap(),
        segment_bars: 8,
        seed: 4,
    };
    let codec = Codec::new(CodecConfig::micro(), 0).unwrap();
    let ds = ingest(&src, &config, Some(&codec)).unwrap();
    assert_eq!(ds.manifest.accepted, 11);
    assert_eq!(ds.manifest.skipped, 2);
    let counts = [Split::Train, Split::Valid, Split::Test].map(|s| {
        ds.manifest.files.iter().filter(|f| f.split == Some(s)).count()
    });
    assert_eq!(counts.iter().sum::<usize>(), 11);
    assert!(counts[0] >= 8, "{counts:?}");
    let long_segments: Vec<_> = ds.segments.iter().filter(|s| s.id.starts_with("long_")).collect();
    assert_eq!(long_segments.iter().map(|s| s.piece.bar_count).collect::<Vec<_>>(), [8, 8, 4]);
    assert_eq!(long_segments[2].id, "long_002");
    assert!(ds.segments.iter().all(|s| s.codes.is_some()));

    let out = dir.path().join("ds");
    ds.write(&out).unwrap();
    let back = Dataset::load(&out).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.segments.iter().map(|s| &s.id).collect::<Vec<_>>(), ds.segments.iter().map(|s| &s.id).collect::<Vec<_>>());
    for (a, b) in back.segments.iter().zip(&ds.segments) {
        assert_eq!(a.piece, b.piece, "{}", a.id);
        assert_eq!(a.codes, b.codes, "{}", a.id);
    }
    assert_eq!(back, ds);
    assert_eq!(ingest(&src, &config, Some(&codec)).unwrap(), ds);
}

#[test]
fn checkpoints_round_trip_through_files() {
    let (codec, prior) = micro_models();
    let dir = tempfile::tempdir().unwrap();
    codec.save(dir.path().join("c.ckpt")).unwrap();
    prior.save(dir.path().join("p.ckpt")).unwrap();
    let (c2, p2) = (
        Codec::load(dir.path().join("c.ckpt")).unwrap(),
        Prior::load(dir.path().join("p.ckpt")).unwrap(),
    );
    let p = piano(6, 1);
    let opts = OrchestrateOptions::default();
    assert_eq!(
        orchestrate(&codec, &prior, &p, &[0, 8], None, &opts).unwrap(),
        orchestrate(&c2, &p2, &p, &[0, 8], None, &opts).unwrap()
    );
    assert!(Codec::load(dir.path().join("p.ckpt")).is_err());
    assert!(Prior::load(dir.path().join("missing.ckpt")).unwrap_err().is_io());
}
