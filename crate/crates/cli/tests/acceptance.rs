//! Acceptance suite: one PASS/FAIL line per criterion, with the tolerance and
//! runtime budget it is held to. Runs as a plain binary (`harness = false`).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use orchestrion::codec::{ClipExample, Codec, CodecConfig, CodecTrainConfig};
use orchestrion::features::recognize_chords;
use orchestrion::metrics::{a_chord, g_mix, g_phrase, g_track, h_groove, h_pitch, s_groove, s_pitch};
use orchestrion::nn::{gradient_check, Mat};
use orchestrion::pipeline::{orchestrate, piece_groupings, prior_segment, OrchestrateOptions};
use orchestrion::planner::{
    fitness, lead_queries, transition, viterbi, viterbi_select, DbFilter, PlannerWeights,
};
use orchestrion::prior::{
    nucleus_sample, nucleus_support, Prior, PriorConfig, PriorSegment, PriorTrainConfig, SamplingConfig,
    TimingCondition,
};
use orchestrion::score::{ChordSymbol, LeadSheet, Meter, NoteEvent, Phrase, Piece, Quality, Track};
use orchestrion::toy::{self, ToyModels, ToyRecipe};
use orchestrion::vq::Codebook;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Brute-force metric oracle, re-derived from raw notes.

fn sounds(track: &Track, t: usize, pitch: u8) -> bool {
    track
        .notes
        .iter()
        .any(|n| n.pitch == pitch && (n.onset as usize) <= t && t < n.end() as usize)
}

fn starts(track: &Track, t: usize, pitch: u8) -> bool {
    track.notes.iter().any(|n| n.pitch == pitch && n.onset as usize == t)
}

struct OracleBar {
    hist: Vec<f64>,
    voices: Vec<f64>,
    groove: Vec<bool>,
}

/// Features of bar `k` of the cell-wise union of `tracks`.
fn oracle_bar(tracks: &[&Track], k: usize) -> OracleBar {
    let mut bar = OracleBar {
        hist: vec![0.0; 12],
        voices: vec![0.0; 16],
        groove: vec![false; 16],
    };
    for q in 0..16 {
        let t = k * 16 + q;
        for pitch in 0..128u8 {
            if tracks.iter().any(|tr| sounds(tr, t, pitch)) {
                bar.hist[usize::from(pitch % 12)] += 1.0;
            }
            if tracks.iter().any(|tr| starts(tr, t, pitch)) {
                bar.voices[q] += 1.0;
            }
        }
        bar.groove[q] = bar.voices[q] > 0.0;
    }
    bar
}

fn all_tracks(piece: &Piece) -> Vec<&Track> {
    piece.tracks.iter().collect()
}

fn oracle_cos(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (nu == 0.0, nv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv),
    }
}

fn oracle_entropy(sims: &[f64]) -> f64 {
    let total: f64 = sims.iter().sum();
    if total == 0.0 {
        return (sims.len() as f64).ln();
    }
    let mut h = 0.0;
    for s in sims {
        let p = s / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

fn oracle_similarity(result: &Piece, piano: &Piece, pitch: bool) -> f64 {
    let k = result.bar_count;
    let mut sum = 0.0;
    for bar in 0..k {
        let a = oracle_bar(&all_tracks(result), bar);
        let b = oracle_bar(&all_tracks(piano), bar);
        sum += if pitch {
            oracle_cos(&a.hist, &b.hist)
        } else {
            oracle_cos(&a.voices, &b.voices)
        };
    }
    sum / k as f64
}

fn oracle_track_entropy(result: &Piece, piano: &Piece, pitch: bool) -> f64 {
    let k = result.bar_count;
    let mut sum = 0.0;
    for bar in 0..k {
        let reference = oracle_bar(&all_tracks(piano), bar);
        let mut sims = Vec::new();
        for track in &result.tracks {
            let f = oracle_bar(&[track], bar);
            sims.push(if pitch {
                oracle_cos(&f.hist, &reference.hist)
            } else {
                oracle_cos(&f.voices, &reference.voices)
            });
        }
        sum += oracle_entropy(&sims);
    }
    sum / k as f64
}

fn consistency(a: &[bool], b: &[bool]) -> f64 {
    let mut xor = 0;
    for q in 0..16 {
        if a[q] != b[q] {
            xor += 1;
        }
    }
    1.0 - f64::from(xor) / 16.0
}

fn oracle_grooves(tracks: &[&Track], bars: usize) -> Vec<Vec<bool>> {
    (0..bars).map(|k| oracle_bar(tracks, k).groove).collect()
}

fn oracle_pairs(g: &[Vec<bool>]) -> f64 {
    let k = g.len();
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            sum += consistency(&g[i], &g[j]);
        }
    }
    sum / (k * k) as f64
}

fn oracle_g_track(piece: &Piece) -> f64 {
    let mut sum = 0.0;
    for track in &piece.tracks {
        sum += oracle_pairs(&oracle_grooves(&[track], piece.bar_count));
    }
    sum / piece.tracks.len() as f64
}

/// `None` when some phrase has zero inter-phrase consistency.
fn oracle_g_phrase(piece: &Piece, lengths: &[usize]) -> Option<f64> {
    let g = oracle_grooves(&all_tracks(piece), piece.bar_count);
    let k = g.len();
    let mut phrase_of = Vec::new();
    for (l, &len) in lengths.iter().enumerate() {
        phrase_of.extend(std::iter::repeat_n(l, len));
    }
    let mut total = 0.0;
    for (l, &len) in lengths.iter().enumerate() {
        let (mut intra, mut inter) = (0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                if phrase_of[i] != l {
                    continue;
                }
                if phrase_of[j] == l {
                    intra += consistency(&g[i], &g[j]);
                } else {
                    inter += consistency(&g[i], &g[j]);
                }
            }
        }
        let intra = intra / (len * len) as f64;
        let inter = inter / (len * (k - len)) as f64;
        if inter == 0.0 {
            return None;
        }
        total += intra / inter;
    }
    Some(total / lengths.len() as f64)
}

const TEMPLATES: [(Quality, &[u8]); 8] = [
    (Quality::Major, &[0, 4, 7]),
    (Quality::Minor, &[0, 3, 7]),
    (Quality::Diminished, &[0, 3, 6]),
    (Quality::Augmented, &[0, 4, 8]),
    (Quality::Dominant7, &[0, 4, 7, 10]),
    (Quality::Major7, &[0, 4, 7, 11]),
    (Quality::Minor7, &[0, 3, 7, 10]),
    (Quality::HalfDiminished7, &[0, 3, 6, 10]),
];

/// Per-beat template matching: `(in − 0.5·out) / mass`, then fewest missing
/// chord tones, then lowest root, then quality order. Silence carries over.
fn oracle_chords(piece: &Piece) -> Vec<ChordSymbol> {
    let mut out = Vec::new();
    let mut prev = ChordSymbol::new(0, Quality::Major);
    for beat in 0..piece.bar_count * 4 {
        let mut profile = [0.0f64; 12];
        for t in beat * 4..beat * 4 + 4 {
            for pc in 0..12u8 {
                let on = (0..128u8)
                    .filter(|p| p % 12 == pc)
                    .any(|p| piece.tracks.iter().any(|tr| sounds(tr, t, p)));
                if on {
                    profile[usize::from(pc)] += 1.0;
                }
            }
        }
        let mass: f64 = profile.iter().sum();
        if mass > 0.0 {
            let mut best: Option<(f64, usize, ChordSymbol)> = None;
            for root in 0..12u8 {
                for &(quality, intervals) in &TEMPLATES {
                    let tones: Vec<usize> = intervals.iter().map(|i| usize::from((root + i) % 12)).collect();
                    let inside: f64 = tones.iter().map(|&c| profile[c]).sum();
                    let score = (inside - 0.5 * (mass - inside)) / mass;
                    let missing = tones.iter().filter(|&&c| profile[c] == 0.0).count();
                    let better = match best {
                        None => true,
                        Some((s, m, _)) => score > s || (score == s && missing < m),
                    };
                    if better {
                        best = Some((score, missing, ChordSymbol::new(root, quality)));
                    }
                }
            }
            prev = best.expect("96 templates").2;
        }
        out.push(prev);
    }
    out
}

fn random_track(rng: &mut ChaCha8Rng, bars: usize) -> Track {
    let total = bars as u32 * 16;
    let notes = (0..rng.random_range(0..=10))
        .map(|_| {
            let onset = rng.random_range(0..total);
            let duration = rng.random_range(1..=(total - onset).min(20));
            NoteEvent::new(onset, duration, rng.random_range(48..72))
        })
        .collect();
    Track::new(rng.random_range(0..34)).with_notes(notes)
}

fn random_piece(rng: &mut ChaCha8Rng, bars: usize, max_tracks: usize) -> Piece {
    let n = rng.random_range(1..=max_tracks);
    Piece::new(Meter::FourFour, bars).with_tracks((0..n).map(|_| random_track(rng, bars)).collect())
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut phrase_cases = 0;
    let mut undefined = 0;
    for case in 0..200 {
        let bars = rng.random_range(1..=8);
        let result = random_piece(&mut rng, bars, 4);
        let piano = random_piece(&mut rng, bars, 2);
        let mut compare = |name: &str, got: orchestrion::Result<f64>, want: f64| -> Result<(), String> {
            let got = got.map_err(|e| format!("case {case}: {name} errored: {e}"))?;
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure(d <= 1e-9, || format!("case {case}: {name} = {got}, oracle {want}"))
        };
        compare("s_pitch", s_pitch(&result, &piano), oracle_similarity(&result, &piano, true))?;
        compare("s_groove", s_groove(&result, &piano), oracle_similarity(&result, &piano, false))?;
        compare("h_pitch", h_pitch(&result, &piano), oracle_track_entropy(&result, &piano, true))?;
        compare("h_groove", h_groove(&result, &piano), oracle_track_entropy(&result, &piano, false))?;
        compare("g_mix", g_mix(&result), oracle_pairs(&oracle_grooves(&all_tracks(&result), bars)))?;
        compare("g_track", g_track(&result), oracle_g_track(&result))?;

        let chords = oracle_chords(&result);
        ensure(recognize_chords(&result) == chords, || format!("case {case}: chord sequence differs"))?;
        let lead_chords: Vec<ChordSymbol> = chords
            .iter()
            .map(|&c| {
                if rng.random_bool(0.3) {
                    ChordSymbol::from_index(rng.random_range(0..96)).expect("index")
                } else {
                    c
                }
            })
            .collect();
        let hits = lead_chords.iter().zip(&chords).filter(|(a, b)| a == b).count();
        let lead = LeadSheet {
            melody: Track::new(0),
            chords: lead_chords,
            phrases: None,
        };
        compare("a_chord", a_chord(&result, &lead), hits as f64 / chords.len() as f64)?;

        if bars >= 2 {
            let mut cuts: Vec<usize> = (1..bars).filter(|_| rng.random_bool(0.4)).collect();
            if cuts.is_empty() {
                cuts.push(rng.random_range(1..bars));
            }
            let mut lengths = Vec::new();
            let mut prev = 0;
            for c in cuts.into_iter().chain([bars]) {
                lengths.push(c - prev);
                prev = c;
            }
            let phrases: Vec<Phrase> = lengths
                .iter()
                .enumerate()
                .map(|(i, &l)| Phrase {
                    label: char::from(b'A' + (i % 26) as u8),
                    length_bars: l,
                })
                .collect();
            phrase_cases += 1;
            match oracle_g_phrase(&result, &lengths) {
                Some(want) => compare("g_phrase", g_phrase(&result, &phrases), want)?,
                None => {
                    undefined += 1;
                    ensure(g_phrase(&result, &phrases).is_err(), || {
                        format!("case {case}: g_phrase should be undefined")
                    })?
                }
            }
        }
    }
    Ok(format!(
        "200 pieces, 8 metrics + chord sequence, {phrase_cases} phrase splits ({undefined} undefined), max |d| {worst:.1e} (tol 1e-9)"
    ))
}

// ---------------------------------------------------------------------------

fn metric_anchors() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut near = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        ensure(d <= 1e-9, || format!("{name}: {got} vs {want}"))
    };
    for _ in 0..20 {
        let p = random_piece(&mut rng, 4, 4);
        near("S_pitch self", s_pitch(&p, &p).map_err(|e| e.to_string())?, 1.0)?;
        near("S_groove self", s_groove(&p, &p).map_err(|e| e.to_string())?, 1.0)?;
    }
    let pattern: Vec<NoteEvent> = (0..8u32)
        .flat_map(|bar| [0u32, 6, 10].map(|q| NoteEvent::new(bar * 16 + q, 2, 60 + (bar % 3) as u8)))
        .collect();
    let constant = Piece::new(Meter::FourFour, 8).with_tracks(vec![Track::new(0).with_notes(pattern)]);
    near("G_Mix constant groove", g_mix(&constant).map_err(|e| e.to_string())?, 1.0)?;
    let piano = random_piece(&mut rng, 4, 1);
    for n in 1..=6 {
        let copies = Piece::new(Meter::FourFour, 4).with_tracks(vec![piano.tracks[0].clone(); n]);
        near("H_pitch identical", h_pitch(&copies, &piano).map_err(|e| e.to_string())?, (n as f64).ln())?;
        near("H_groove identical", h_groove(&copies, &piano).map_err(|e| e.to_string())?, (n as f64).ln())?;
    }
    let config = PriorConfig {
        zero_init_heads: true,
        ..PriorConfig::default()
    };
    let prior = Prior::new(config.clone(), 3).map_err(|e| e.to_string())?;
    let segment = random_segment(&mut rng, &config, 3, 4);
    let nll = prior.nll(&[segment], 0.5, 0).map_err(|e| e.to_string())?;
    let uniform = (64f64.ln() + 8.0 * 128f64.ln()) / 9.0;
    near("uniform NLL", nll, uniform)?;
    // Hand value (4.1589 + 8 * 4.8520) / 9, quoted to four decimals.
    ensure((uniform - 4.7750).abs() < 5e-5, || format!("closed form {uniform}"))?;
    Ok(format!("S, G_Mix, H = ln N (N = 1..6), NLL {nll:.6} nats, max |d| {worst:.1e} (tol 1e-9)"))
}

fn random_segment(rng: &mut ChaCha8Rng, config: &PriorConfig, tracks: usize, steps: usize) -> PriorSegment {
    use orchestrion::codec::CodeGrouping;
    PriorSegment {
        mix: (0..steps)
            .map(|_| (0..config.mix_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        groupings: (0..tracks)
            .map(|_| {
                (0..steps)
                    .map(|_| CodeGrouping {
                        pitch: rng.random_range(0..config.pitch_codes),
                        time: std::array::from_fn(|_| rng.random_range(0..config.time_codes)),
                    })
                    .collect()
            })
            .collect(),
        instruments: (0..tracks).map(|_| rng.random_range(0..34)).collect(),
        timing: TimingCondition::for_clips(steps * 2 + 2, 1, steps),
    }
}

// ---------------------------------------------------------------------------

/// Lexicographically first path within the tie tolerance of the best score.
fn exhaustive(fit: &[Vec<f64>], trans: &[Vec<Vec<f64>>], w: &PlannerWeights) -> (Vec<usize>, f64) {
    let sizes: Vec<usize> = fit.iter().map(Vec::len).collect();
    let mut paths = Vec::new();
    let mut idx = vec![0usize; sizes.len()];
    loop {
        let f: f64 = idx.iter().enumerate().map(|(l, &i)| fit[l][i]).sum();
        let t: f64 = (0..idx.len().saturating_sub(1)).map(|l| trans[l][idx[l]][idx[l + 1]]).sum();
        paths.push((idx.clone(), w.delta * f + w.gamma * t));
        let mut l = sizes.len();
        loop {
            if l == 0 {
                let best = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                let tol = 1e-12 * best.abs().max(1.0);
                let first = paths.iter().find(|p| p.1 >= best - tol).expect("nonempty");
                return (first.0.clone(), best);
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < sizes[l] {
                break;
            }
            idx[l] = 0;
        }
    }
}

fn viterbi_exhaustive() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut discrete = 0;
    for trial in 0..1000 {
        let slots = rng.random_range(1..=5);
        let sizes: Vec<usize> = (0..slots).map(|_| rng.random_range(1..=6)).collect();
        let coarse = trial % 3 == 0;
        if coarse {
            discrete += 1;
        }
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                f64::from(rng.random_range(0..4u8)) * 0.25
            } else {
                rng.random_range(0.0..1.0)
            }
        };
        let fit: Vec<Vec<f64>> = sizes.iter().map(|&s| (0..s).map(|_| draw(&mut rng)).collect()).collect();
        let trans: Vec<Vec<Vec<f64>>> = sizes
            .windows(2)
            .map(|w| (0..w[0]).map(|_| (0..w[1]).map(|_| draw(&mut rng)).collect()).collect())
            .collect();
        let delta = if coarse { 0.5 } else { rng.random_range(0.0..1.0) };
        let w = PlannerWeights {
            delta,
            gamma: 1.0 - delta,
            ..PlannerWeights::default()
        };
        let got = viterbi(&fit, &trans, &w).map_err(|e| e.to_string())?;
        let (path, score) = exhaustive(&fit, &trans, &w);
        ensure(got.path == path, || format!("trial {trial}: viterbi {:?} vs exhaustive {path:?}", got.path))?;
        ensure((got.score - score).abs() <= 1e-12, || format!("trial {trial}: score {} vs {score}", got.score))?;
    }

    // Database-backed instances: real fitness and transition scores.
    let weights = PlannerWeights::default();
    let mut db_trials = 0;
    let mut trial_seed = 0u64;
    while db_trials < 60 {
        trial_seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let db = toy::phrase_db(&mut rng, 3).map_err(|e| e.to_string())?;
        let lead = toy::random_song(&mut rng).lead;
        let queries = lead_queries(&lead).map_err(|e| e.to_string())?;
        if queries.len() > 5 {
            continue;
        }
        let candidates: Vec<Vec<usize>> = queries
            .iter()
            .map(|q| (0..db.len()).filter(|&i| db.entries()[i].length_bars == q.length_bars()).collect())
            .collect();
        let product: usize = candidates.iter().map(Vec::len).product();
        if product == 0 || product > 200_000 {
            ensure(product > 0 || viterbi_select(&queries, &db, &weights, &DbFilter::default()).is_err(), || {
                "missing candidates must be an error".into()
            })?;
            continue;
        }
        let fit: Vec<Vec<f64>> = candidates
            .iter()
            .zip(&queries)
            .map(|(c, q)| c.iter().map(|&i| fitness(&db.entries()[i], q, &weights)).collect())
            .collect();
        let trans: Vec<Vec<Vec<f64>>> = candidates
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .map(|&a| w[1].iter().map(|&b| transition(&db.entries()[a], &db.entries()[b])).collect())
                    .collect()
            })
            .collect();
        let (path, _) = exhaustive(&fit, &trans, &weights);
        let want: Vec<usize> = path.iter().zip(&candidates).map(|(&i, c)| c[i]).collect();
        let got = viterbi_select(&queries, &db, &weights, &DbFilter::default()).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("db trial {trial_seed}: {got:?} vs {want:?}"))?;
        db_trials += 1;
    }
    Ok(format!(
        "1000 matrix trials ({discrete} with tied discrete scores) + {db_trials} phrase-db trials, exact path match"
    ))
}

// ---------------------------------------------------------------------------

fn vq_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let book = Codebook::random(64, 16, 1.0, &mut rng);
    for q in 0..10_000 {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut best = (f64::INFINITY, 0);
        for k in 0..64 {
            let d: f64 = book.entry(k).iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        let (k, code) = book.quantize(&v).map_err(|e| e.to_string())?;
        ensure(k == best.1, || format!("query {q}: index {k} vs nearest {}", best.1))?;
        ensure(code.as_slice() == book.entry(k), || format!("query {q}: returned vector is not entry {k}"))?;
    }

    let mut ema = Codebook::random(8, 4, 1.0, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let rows = rng.random_range(1..40);
        let batch = Mat::from_shape_fn((rows, 4), |_| rng.random_range(-3.0..3.0));
        let assign: Vec<usize> = (0..rows).map(|_| rng.random_range(0..8)).collect();
        let decay = 0.99;
        let counts_before: f64 = ema.ema_counts().iter().sum();
        let sums_before: Vec<f64> = (0..4).map(|j| ema.ema_sums().column(j).sum()).collect();
        ema.ema_update(&batch, &assign, decay);
        let counts_after: f64 = ema.ema_counts().iter().sum();
        worst = worst.max((counts_after - (decay * counts_before + (1.0 - decay) * rows as f64)).abs());
        for j in 0..4 {
            let want = decay * sums_before[j] + (1.0 - decay) * batch.column(j).sum();
            worst = worst.max((ema.ema_sums().column(j).sum() - want).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("EMA mass drift {worst:.2e}"))?;

    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let data = Mat::from_shape_fn((2000, 8), |(i, j)| centers[i % 4][j] + rng.random_range(-0.3..0.3));
    let frozen = Codebook::random(8, 8, 1.0, &mut rng);
    let mut trained = frozen.clone();
    let mut order: Vec<usize> = (0..2000).collect();
    for _ in 0..30 {
        trained.reset_usage();
        order.shuffle(&mut rng);
        for chunk in order.chunks(100) {
            let batch = Mat::from_shape_fn((chunk.len(), 8), |(r, j)| data[[chunk[r], j]]);
            let (assign, _) = trained.quantize_rows(&batch).map_err(|e| e.to_string())?;
            trained.record_usage(&assign);
            trained.ema_update(&batch, &assign, 0.99);
        }
        trained.random_restart(&data, 1.0, &mut rng).map_err(|e| e.to_string())?;
    }
    let (assign, _) = trained.quantize_rows(&data).map_err(|e| e.to_string())?;
    let used = assign.iter().collect::<std::collections::BTreeSet<_>>().len();
    let (mse_frozen, mse_trained) = (frozen.quantization_mse(&data), trained.quantization_mse(&data));
    let ratio = mse_trained / mse_frozen;
    ensure(ratio < 0.5, || format!("trained/frozen MSE ratio {ratio:.3}"))?;
    ensure(used >= 4, || format!("only {used} entries used"))?;
    Ok(format!(
        "10k nearest-neighbour queries exact; EMA drift {worst:.1e} (tol 1e-9); planted clusters MSE ratio {ratio:.4} (< 0.5), {used}/8 entries used"
    ))
}

// ---------------------------------------------------------------------------

fn band_fixture() -> Piece {
    toy::band_piece(&mut ChaCha8Rng::seed_from_u64(11), 4)
}

fn gradient_checks() -> Check {
    let config = CodecConfig {
        bypass_vq: true,
        ..CodecConfig::micro()
    };
    let codec = Codec::new(config, 1).map_err(|e| e.to_string())?;
    let examples = ClipExample::from_piece(&band_fixture()).map_err(|e| e.to_string())?;
    let batch: Vec<&ClipExample> = examples.iter().collect();
    let mut store = codec.params().clone();
    let codec_check = gradient_check(
        &mut store,
        |p, want| codec.loss_with(p, &batch, want).expect("codec loss"),
        1e-5,
        6,
        1,
    );
    ensure(codec_check.max_rel_error < 1e-3, || format!("codec: {codec_check:?}"))?;

    let pc = PriorConfig::micro(8);
    let prior = Prior::new(pc.clone(), 2).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let segment = random_segment(&mut rng, &pc, 2, 3);
    let mut store = prior.params().clone();
    let prior_check = gradient_check(
        &mut store,
        |p, want| prior.loss_with(p, &[&segment], 0.3, 4, want).expect("prior loss"),
        1e-5,
        6,
        2,
    );
    ensure(prior_check.max_rel_error < 1e-3, || format!("prior: {prior_check:?}"))?;
    Ok(format!(
        "codec {} coords max rel err {:.1e}, prior {} coords max rel err {:.1e} (tol 1e-3)",
        codec_check.checked, codec_check.max_rel_error, prior_check.checked, prior_check.max_rel_error
    ))
}

// ---------------------------------------------------------------------------

fn prior_structure() -> Check {
    let config = PriorConfig {
        mix_dim: 16,
        dropout: 0.1,
        ..PriorConfig::default()
    };
    let prior = Prior::new(config.clone(), 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, t) = (3, 6);
    let seg = random_segment(&mut rng, &config, n, t);
    let codes = Mat::from_shape_fn((t, config.mix_dim), |(i, j)| seg.mix[i][j]);
    let base = prior
        .forward(&codes, &seg.timing, 0.4, 1, &seg.instruments, &seg.groupings)
        .map_err(|e| e.to_string())?;
    for tau in 0..t {
        let mut perturbed = seg.groupings.clone();
        for track in &mut perturbed {
            for g in &mut track[tau..] {
                g.pitch = (g.pitch + 7) % config.pitch_codes;
                g.time[3] = (g.time[3] + 11) % config.time_codes;
            }
        }
        let out = prior
            .forward(&codes, &seg.timing, 0.4, 1, &seg.instruments, &perturbed)
            .map_err(|e| e.to_string())?;
        for track in 0..n {
            for step in 0..=tau {
                let row = track * t + step;
                let d = base
                    .logits
                    .row(row)
                    .iter()
                    .zip(out.logits.row(row).iter())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                ensure(d <= 1e-12, || format!("perturbing steps >= {tau} moved step {step} by {d:e}"))?;
            }
        }
        // Step τ+1 reads the grouping of step τ, so it must react.
        if tau + 1 < t {
            ensure(base.logits.row(tau + 1) != out.logits.row(tau + 1), || {
                format!("step {} ignores its history", tau + 1)
            })?;
        }
    }

    let prompt: Vec<Vec<_>> = seg.groupings.iter().map(|g| g[..2].to_vec()).collect();
    let sampled = prior
        .sample(&codes, &seg.timing, 0.5, &seg.instruments, Some(&prompt), SamplingConfig::default(), 4)
        .map_err(|e| e.to_string())?;
    for (s, p) in sampled.iter().zip(&prompt) {
        ensure(s[..2] == p[..], || "prompt not copied verbatim".into())?;
    }

    // Pipeline level: windows of max_steps clips, prompt taken from a piece.
    let codec = Codec::new(CodecConfig::micro(), 3).map_err(|e| e.to_string())?;
    let small = Prior::new(PriorConfig::micro(8), 3).map_err(|e| e.to_string())?;
    let band = toy::band_piece(&mut rng, 16);
    let piano = Piece::new(Meter::FourFour, 16).with_tracks(vec![band.merged_track(0)]);
    let donor = band.slice_bars(0, 4);
    let instruments = band.instruments();
    let o = orchestrate(&codec, &small, &piano, &instruments, Some(&donor), &OrchestrateOptions::default())
        .map_err(|e| e.to_string())?;
    let want = piece_groupings(&codec, &donor).map_err(|e| e.to_string())?;
    for (got, want) in o.groupings.iter().zip(&want) {
        ensure(got[..want.len()] == want[..], || "orchestration prompt not verbatim".into())?;
    }

    let (an, at) = (5, 7);
    let big = random_segment(&mut rng, &config, an, at);
    let codes = Mat::from_shape_fn((at, config.mix_dim), |(i, j)| big.mix[i][j]);
    let stats = prior
        .forward(&codes, &big.timing, 0.0, 0, &big.instruments, &big.groupings)
        .map_err(|e| e.to_string())?
        .attention;
    let bound = an.max(at);
    ensure(stats.matrices > 0 && stats.max_queries <= bound && stats.max_keys <= bound, || {
        format!("attention audit {stats:?} exceeds max(N, T) = {bound}")
    })?;

    let support = nucleus_support(&[0.5, 0.3, 0.2], 0.6);
    ensure(
        support.len() == 2
            && support[0].0 == 0
            && support[1].0 == 1
            && (support[0].1 - 0.625).abs() < 1e-12
            && (support[1].1 - 0.375).abs() < 1e-12,
        || format!("nucleus support {support:?}"),
    )?;
    let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    let sampling = SamplingConfig {
        nucleus_p: 0.6,
        temperature: 1.0,
    };
    let mut counts = [0usize; 3];
    for _ in 0..20_000 {
        counts[nucleus_sample(&logits, sampling, &mut rng)] += 1;
    }
    let freq = counts[0] as f64 / 20_000.0;
    ensure(counts[2] == 0 && (freq - 0.625).abs() < 0.015, || format!("nucleus draws {counts:?}"))?;
    Ok(format!(
        "causal at all {t} steps, prompt verbatim (sampler + windowed pipeline), attention max {}x{} for N={an} T={at}, nucleus (0.625, 0.375), empirical {freq:.3}",
        stats.max_queries, stats.max_keys
    ))
}

// ---------------------------------------------------------------------------

fn toy_models() -> &'static ToyModels {
    static MODELS: OnceLock<ToyModels> = OnceLock::new();
    MODELS.get_or_init(|| {
        let start = Instant::now();
        let models = toy::train_models(&ToyRecipe::default()).expect("toy training");
        println!("       (toy codec and prior trained in {:.1}s, shared by later checks)", start.elapsed().as_secs_f64());
        models
    })
}

fn overfit_prior() -> Check {
    let models = toy_models();
    let start = Instant::now();
    let segments: Vec<PriorSegment> = models.corpus[..10]
        .iter()
        .map(|p| prior_segment(&models.codec, p, p.bar_count, 0))
        .collect::<orchestrion::Result<_>>()
        .map_err(|e| e.to_string())?;
    let config = PriorConfig {
        d_model: 64,
        dropout: 0.0,
        mix_dim: models.codec.config().mix_dim,
        ..PriorConfig::default()
    };
    let train = PriorTrainConfig {
        steps: 2000,
        batch_size: 10,
        lr_start: 2e-3,
        lr_end: 1e-4,
        seed: 0,
        beta: Some(0.0),
        target_loss: Some(0.05),
    };
    let (prior, losses) = Prior::train(&segments, config, &train).map_err(|e| e.to_string())?;
    let nll = prior.nll(&segments, 0.0, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(nll < 0.1, || format!("NLL {nll:.4} after {} steps", losses.len()))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {:.0}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "NLL {nll:.4} nats (< 0.1) after {} steps (<= 2000), {:.1}s",
        losses.len(),
        elapsed.as_secs_f64()
    ))
}

fn overfit_codec() -> Check {
    let piece = toy::band_piece(&mut ChaCha8Rng::seed_from_u64(21), 8);
    let examples = ClipExample::from_piece(&piece).map_err(|e| e.to_string())?;
    let train = CodecTrainConfig {
        epochs: 500,
        batch_size: 4,
        lr_start: 3e-3,
        lr_end: 1e-4,
        pos_weight: 2.0,
        ..CodecTrainConfig::default()
    };
    let (codec, _) = Codec::train_examples(&examples, CodecConfig::default(), &train).map_err(|e| e.to_string())?;
    let f1 = codec.reconstruction_score(&examples).map_err(|e| e.to_string())?.f1();
    ensure(f1 >= 0.9, || format!("onset F1 {f1:.4}"))?;
    Ok(format!("onset F1 {f1:.4} (>= 0.9) on a memorized 8-bar band piece"))
}

// ---------------------------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_orchestrion")
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    ensure(out.status.success(), || {
        format!(
            "`orchestrion {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/aabb_lead.json")
}

fn end_to_end() -> Check {
    let models = toy_models();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    models.codec.save(d.join("codec.ckpt")).map_err(|e| e.to_string())?;
    models.prior.save(d.join("prior.ckpt")).map_err(|e| e.to_string())?;
    models.db.save(d.join("db.json")).map_err(|e| e.to_string())?;
    let widest = models.corpus.iter().max_by_key(|p| p.tracks.len()).expect("corpus");
    let instruments = widest.instruments();
    let list: Vec<String> = instruments.iter().map(u8::to_string).collect();
    let list = list.join(",");
    let lead_path = fixture_path();
    let lead_arg = lead_path.to_string_lossy().into_owned();

    let start = Instant::now();
    run_cli(
        d,
        &[
            "arrange", "--lead", &lead_arg, "--db", "db.json", "--out", "arranged.mid", "--sketch", "sketch.json",
            "--codec", "codec.ckpt", "--prior", "prior.ckpt", "--instruments", &list, "--seed", "1",
        ],
    )?;
    let elapsed = start.elapsed();

    let lead = LeadSheet::load_json(&lead_path).map_err(|e| e.to_string())?;
    let out = orchestrion::score::read_midi(d.join("arranged.mid"), true).map_err(|e| e.to_string())?;
    out.validate().map_err(|e| e.to_string())?;
    ensure(out.tracks.len() == instruments.len() + 1, || {
        format!("{} tracks, expected {}", out.tracks.len(), instruments.len() + 1)
    })?;
    ensure(out.bar_count == 32, || format!("{} bars", out.bar_count))?;
    ensure(out.tracks[0].notes == lead.melody.notes, || "melody altered".into())?;
    let mut sketch = Piece::load_json(d.join("sketch.json")).map_err(|e| e.to_string())?;
    sketch.tracks.remove(0);
    let acc = a_chord(&sketch, &lead).map_err(|e| e.to_string())?;
    ensure(acc >= 0.9, || format!("sketch a_chord {acc:.3}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("arrange took {:.0}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "{} tracks x {} bars MIDI, melody note-for-note, sketch a_chord {acc:.3} (>= 0.9), arrange {:.1}s (< 120s)",
        out.tracks.len(),
        out.bar_count,
        elapsed.as_secs_f64()
    ))
}

fn beta_ablation() -> Check {
    let models = toy_models();
    let start = Instant::now();
    let (mut at0, mut at1, mut n) = (0.0, 0.0, 0usize);
    for seed in 0..20u64 {
        for piece in &models.corpus {
            let piano = Piece::new(Meter::FourFour, piece.bar_count).with_tracks(vec![piece.merged_track(0)]);
            let instruments = piece.instruments();
            for (beta, acc) in [(0.0, &mut at0), (1.0, &mut at1)] {
                let options = OrchestrateOptions {
                    beta,
                    seed,
                    ..OrchestrateOptions::default()
                };
                let o = orchestrate(&models.codec, &models.prior, &piano, &instruments, None, &options)
                    .map_err(|e| e.to_string())?;
                *acc += s_groove(&o.piece, &piano).map_err(|e| e.to_string())?;
            }
            n += 1;
        }
    }
    let (m0, m1) = (at0 / n as f64, at1 / n as f64);
    let elapsed = start.elapsed();
    ensure(m0 >= m1, || format!("S_Groove beta=0 {m0:.4} < beta=1 {m1:.4}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {:.0}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "mean S_Groove beta=0 {m0:.4} >= beta=1 {m1:.4} over 20 seeds x {} held-in downmixes, {:.1}s",
        models.corpus.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn tiny_config() -> String {
    let codec = CodecConfig::micro();
    let prior = PriorConfig {
        max_steps: 4,
        ..PriorConfig::micro(codec.mix_dim)
    };
    serde_json::json!({
        "codec": codec,
        "codec_train": {"epochs": 2, "batch_size": 4},
        "prior": prior,
        "prior_train": {"steps": 3, "batch_size": 2},
        "instruments": [0, 8, 24],
    })
    .to_string()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable").flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("inside").to_path_buf();
                out.insert(rel, std::fs::read(&p).expect("readable"));
            }
        }
    }
    out
}

const PIPELINE: &[&[&str]] = &[
    &["toy-data", "--out", "data", "--pieces", "4", "--songs", "10", "--bars", "8", "--seed", "3"],
    &["ingest", "data/corpus", "--out", "ds", "--split", "8:1:1", "--seed", "3"],
    &["train-codec", "ds", "--out", "codec.ckpt", "--config", "cfg.json", "--seed", "3"],
    &["ingest", "data/corpus", "--out", "ds_codes", "--codec", "codec.ckpt", "--seed", "3"],
    &["train-prior", "ds_codes", "--out", "prior.ckpt", "--codec", "codec.ckpt", "--config", "cfg.json", "--seed", "3"],
    &["build-db", "data/songs", "--out", "db.json"],
    &[
        "arrange", "--lead", "data/lead.json", "--db", "db.json", "--out", "arranged.mid", "--sketch", "sketch.json",
        "--codec", "codec.ckpt", "--prior", "prior.ckpt", "--config", "cfg.json", "--seed", "5",
    ],
    &[
        "orchestrate", "--piano", "data/piano.mid", "--out", "band.mid", "--codec", "codec.ckpt", "--prior",
        "prior.ckpt", "--config", "cfg.json", "--seed", "5", "--beta", "0.3", "--nucleus-p", "0.8", "--temperature",
        "1.2",
    ],
    &[
        "donor-search", "--piano", "data/piano.mid", "--db", "data/corpus", "--out", "donor.mid", "--continuation",
        "continuation.mid", "--seed", "5",
    ],
    &[
        "evaluate", "arranged.mid", "--piano", "data/piano.mid", "--lead", "data/lead.json", "--phrases", "A8A8B8B8",
        "--melody-track", "--json", "report.json",
    ],
    &["features", "arranged.mid", "--out", "features.json"],
];

fn determinism() -> Check {
    let config = tiny_config();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join("cfg.json"), &config).map_err(|e| e.to_string())?;
        let mut stdout = Vec::new();
        for args in PIPELINE {
            stdout.push(run_cli(dir.path(), args)?);
        }
        runs.push((stdout, snapshot(dir.path()), dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    for (i, (x, y)) in a.0.iter().zip(&b.0).enumerate() {
        ensure(x == y, || format!("stdout of `{}` differs between runs", PIPELINE[i][0]))?;
    }
    ensure(a.1.keys().eq(b.1.keys()), || "runs produced different file sets".into())?;
    for (path, bytes) in &a.1 {
        ensure(b.1[path] == *bytes, || format!("{} differs between runs", path.display()))?;
    }
    let commands: std::collections::BTreeSet<&str> = PIPELINE.iter().map(|a| a[0]).collect();
    Ok(format!(
        "{} commands ({} distinct subcommands) x 2 runs: {} output files and all stdout byte-identical",
        PIPELINE.len(),
        commands.len(),
        a.1.len()
    ))
}

// ---------------------------------------------------------------------------

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "metric-oracle", budget: Duration::from_secs(60), run: metric_oracle },
        Criterion { name: "metric-anchors", budget: Duration::from_secs(60), run: metric_anchors },
        Criterion { name: "viterbi-exhaustive", budget: Duration::from_secs(60), run: viterbi_exhaustive },
        Criterion { name: "vq-suite", budget: Duration::from_secs(120), run: vq_suite },
        Criterion { name: "gradient-checks", budget: Duration::from_secs(120), run: gradient_checks },
        Criterion { name: "prior-structure", budget: Duration::from_secs(120), run: prior_structure },
        Criterion { name: "overfit-prior", budget: Duration::from_secs(600), run: overfit_prior },
        Criterion { name: "overfit-codec", budget: Duration::from_secs(600), run: overfit_codec },
        Criterion { name: "end-to-end", budget: Duration::from_secs(600), run: end_to_end },
        Criterion { name: "beta-ablation", budget: Duration::from_secs(600), run: beta_ablation },
        Criterion { name: "determinism", budget: Duration::from_secs(600), run: determinism },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| c.name.contains(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed > c.budget {
                Err(format!("{detail}; over budget"))
            } else {
                Ok(detail)
            }
        });
        let timing = format!("[{:.1}s / {}s]", elapsed.as_secs_f64(), c.budget.as_secs());
        match outcome {
            Ok(detail) => println!("[PASS] {}: {detail} {timing}", c.name),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {}: {why} {timing}", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
