//! Objective evaluation: faithfulness (`s_pitch`, `s_groove`), creativity
//! (`h_pitch`, `h_groove`), chord accuracy and groove consistency.

use serde::{Deserialize, Serialize};

use crate::features::{cosine, piece_bar_features, recognize_chords, BarFeatures, Scope};
use crate::score::{LeadSheet, Phrase, Piece, STEPS_PER_BAR};
use crate::{Error, Result};

fn bar_count_4_4(piece: &Piece) -> usize {
    piece.to_four_four().bar_count
}

fn check_bars(result: &Piece, reference: &Piece) -> Result<usize> {
    let (a, b) = (bar_count_4_4(result), bar_count_4_4(reference));
    if a != b {
        return Err(Error::LengthMismatch {
            what: "bar count",
            expected: b,
            found: a,
        });
    }
    Ok(a)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn similarity(
    result: &Piece,
    piano: &Piece,
    descriptor: impl Fn(&BarFeatures) -> Vec<f64>,
) -> Result<f64> {
    check_bars(result, piano)?;
    let mix = piece_bar_features(result, Scope::Mixture)?;
    let pno = piece_bar_features(piano, Scope::Mixture)?;
    Ok(mean(mix.iter().zip(&pno).map(|(a, b)| cosine(&descriptor(a), &descriptor(b)))))
}

fn hist(f: &BarFeatures) -> Vec<f64> {
    f.pitch_hist.to_vec()
}

fn voices(f: &BarFeatures) -> Vec<f64> {
    f.voice_vector().to_vec()
}

/// Mean per-bar cosine between the pitch histograms of the result mixture and the piano.
pub fn s_pitch(result: &Piece, piano: &Piece) -> Result<f64> {
    similarity(result, piano, hist)
}

/// Mean per-bar cosine between the voice intensities of the result mixture and the piano.
pub fn s_groove(result: &Piece, piano: &Piece) -> Result<f64> {
    similarity(result, piano, voices)
}

/// Entropy (nats) of a similarity vector normalized to sum to one; all-zero
/// similarities count as the uniform distribution.
pub fn similarity_entropy(sims: &[f64]) -> f64 {
    let total: f64 = sims.iter().sum();
    if total == 0.0 {
        return (sims.len() as f64).ln();
    }
    -sims
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

fn track_entropy(
    result: &Piece,
    piano: &Piece,
    descriptor: impl Fn(&BarFeatures) -> Vec<f64>,
) -> Result<f64> {
    let bars = check_bars(result, piano)?;
    if result.tracks.is_empty() {
        return Err(Error::invalid("entropy metrics need at least one result track"));
    }
    let pno = piece_bar_features(piano, Scope::Mixture)?;
    let per_track = (0..result.tracks.len())
        .map(|n| piece_bar_features(result, Scope::Track(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean((0..bars).map(|k| {
        let reference = descriptor(&pno[k]);
        let sims: Vec<f64> = per_track.iter().map(|t| cosine(&descriptor(&t[k]), &reference)).collect();
        similarity_entropy(&sims)
    })))
}

pub fn h_pitch(result: &Piece, piano: &Piece) -> Result<f64> {
    track_entropy(result, piano, hist)
}

pub fn h_groove(result: &Piece, piano: &Piece) -> Result<f64> {
    track_entropy(result, piano, voices)
}

/// Share of beats whose recognized chord equals the lead-sheet chord in root and quality.
pub fn a_chord(arrangement: &Piece, lead: &LeadSheet) -> Result<f64> {
    let recognized = recognize_chords(arrangement);
    if recognized.len() != lead.chords.len() {
        return Err(Error::LengthMismatch {
            what: "beat count",
            expected: lead.chords.len(),
            found: recognized.len(),
        });
    }
    if recognized.is_empty() {
        return Err(Error::UndefinedMetric("chord accuracy of an empty piece".into()));
    }
    let hits = recognized.iter().zip(&lead.chords).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / recognized.len() as f64)
}

/// `1 − XOR-distance / 16` between two grooves.
pub fn groove_consistency(a: &[bool; STEPS_PER_BAR], b: &[bool; STEPS_PER_BAR]) -> f64 {
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    1.0 - diff as f64 / STEPS_PER_BAR as f64
}

fn grooves(piece: &Piece, scope: Scope) -> Result<Vec<[bool; STEPS_PER_BAR]>> {
    Ok(piece_bar_features(piece, scope)?.into_iter().map(|f| f.groove).collect())
}

fn all_pairs_consistency(g: &[[bool; STEPS_PER_BAR]]) -> f64 {
    let k = g.len() as f64;
    let mut sum = 0.0;
    for a in g {
        for b in g {
            sum += groove_consistency(a, b);
        }
    }
    sum / (k * k)
}

/// Mean groove consistency over all ordered bar pairs (diagonal included) of the mixture.
pub fn g_mix(piece: &Piece) -> Result<f64> {
    let g = grooves(piece, Scope::Mixture)?;
    if g.is_empty() {
        return Err(Error::UndefinedMetric("groove consistency of a zero-bar piece".into()));
    }
    Ok(all_pairs_consistency(&g))
}

/// Per-track groove consistency averaged over tracks.
pub fn g_track(piece: &Piece) -> Result<f64> {
    if piece.tracks.is_empty() {
        return Err(Error::UndefinedMetric("track groove consistency without tracks".into()));
    }
    let mut total = 0.0;
    for n in 0..piece.tracks.len() {
        let g = grooves(piece, Scope::Track(n))?;
        if g.is_empty() {
            return Err(Error::UndefinedMetric("groove consistency of a zero-bar piece".into()));
        }
        total += all_pairs_consistency(&g);
    }
    Ok(total / piece.tracks.len() as f64)
}

/// Intra-phrase over inter-phrase mixture groove consistency, averaged over phrases.
pub fn g_phrase(piece: &Piece, phrases: &[Phrase]) -> Result<f64> {
    let g = grooves(piece, Scope::Mixture)?;
    let k = g.len();
    let total: usize = phrases.iter().map(|p| p.length_bars).sum();
    if total != k {
        return Err(Error::LengthMismatch {
            what: "phrase bars",
            expected: k,
            found: total,
        });
    }
    if phrases.len() < 2 {
        return Err(Error::UndefinedMetric("phrase groove diversity needs at least two phrases".into()));
    }
    let mut sum = 0.0;
    let mut start = 0;
    for p in phrases {
        let kl = p.length_bars;
        let inside = start..start + kl;
        let mut intra = 0.0;
        let mut inter = 0.0;
        for i in inside.clone() {
            for j in 0..k {
                let c = groove_consistency(&g[i], &g[j]);
                if inside.contains(&j) {
                    intra += c;
                } else {
                    inter += c;
                }
            }
        }
        let intra = intra / (kl * kl) as f64;
        let inter = inter / (kl * (k - kl)) as f64;
        if inter == 0.0 {
            return Err(Error::UndefinedMetric(format!(
                "phrase '{}' has zero inter-phrase groove consistency (ratio is +inf)",
                p.label
            )));
        }
        sum += intra / inter;
        start += kl;
    }
    Ok(sum / phrases.len() as f64)
}

/// Per-piece metrics. Metrics whose reference input is unavailable are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_pitch: Option<f64>,
    pub s_groove: Option<f64>,
    pub h_pitch: Option<f64>,
    pub h_groove: Option<f64>,
    pub a_chord: Option<f64>,
    pub g_mix: Option<f64>,
    pub g_track: Option<f64>,
    pub g_phrase: Option<f64>,
}

pub const METRIC_NAMES: [&str; 8] = [
    "s_pitch", "s_groove", "h_pitch", "h_groove", "a_chord", "g_mix", "g_track", "g_phrase",
];

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.s_pitch,
            self.s_groove,
            self.h_pitch,
            self.h_groove,
            self.a_chord,
            self.g_mix,
            self.g_track,
            self.g_phrase,
        ]
    }
}

/// What a result is compared against.
#[derive(Clone, Debug, Default)]
pub struct References<'a> {
    pub piano: Option<&'a Piece>,
    pub lead: Option<&'a LeadSheet>,
    pub phrases: Option<&'a [Phrase]>,
}

/// Computes every metric that the references allow. `a_chord` is measured on
/// `accompaniment` (the result without its melody) when given.
pub fn evaluate(result: &Piece, accompaniment: Option<&Piece>, refs: &References<'_>) -> Result<MetricReport> {
    let mut report = MetricReport {
        g_mix: Some(g_mix(result)?),
        g_track: (!result.tracks.is_empty()).then(|| g_track(result)).transpose()?,
        ..MetricReport::default()
    };
    if let Some(piano) = refs.piano {
        report.s_pitch = Some(s_pitch(result, piano)?);
        report.s_groove = Some(s_groove(result, piano)?);
        if !result.tracks.is_empty() {
            report.h_pitch = Some(h_pitch(result, piano)?);
            report.h_groove = Some(h_groove(result, piano)?);
        }
    }
    if let Some(lead) = refs.lead {
        report.a_chord = Some(a_chord(accompaniment.unwrap_or(result), lead)?);
    }
    let phrases = refs
        .phrases
        .or(result.phrases.as_deref())
        .or(refs.lead.and_then(|l| l.phrases.as_deref()));
    if let Some(phrases) = phrases {
        // Undefined ratios (single phrase, zero inter-phrase consistency) are left out.
        report.g_phrase = match g_phrase(result, phrases) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(report)
}

/// Corpus mean and 95% confidence half-width (1.96 standard errors).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let m = mean(values.iter().copied());
    let ci95 = if n > 1 {
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean: m, ci95, n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub pieces: Vec<MetricReport>,
    /// Keyed by metric name, in [`METRIC_NAMES`] order; `None` when no piece has the metric.
    pub summary: Vec<(String, Option<Summary>)>,
}

/// Pools per-piece reports (triplicate runs are simply more pieces).
pub fn corpus_report(pieces: Vec<MetricReport>) -> CorpusReport {
    let summary = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let vals: Vec<f64> = pieces.iter().filter_map(|r| r.values()[i]).collect();
            (name.to_string(), summarize(&vals))
        })
        .collect();
    CorpusReport { pieces, summary }
}

impl CorpusReport {
    /// Two-row text table: orchestration metrics then arrangement metrics.
    pub fn table(&self) -> String {
        let cell = |name: &str| -> String {
            match self.summary.iter().find(|(n, _)| n == name).and_then(|(_, s)| *s) {
                Some(s) => format!("{:.3} ± {:.3}", s.mean, s.ci95),
                None => "-".to_string(),
            }
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16}{:<18}{:<18}{:<18}{:<18}\n",
            "Orchestration", "S_Pitch", "S_Groove", "H_Pitch", "H_Groove"
        ));
        out.push_str(&format!(
            "{:<16}{:<18}{:<18}{:<18}{:<18}\n",
            format!("(n={})", self.pieces.len()),
            cell("s_pitch"),
            cell("s_groove"),
            cell("h_pitch"),
            cell("h_groove")
        ));
        out.push_str(&format!(
            "{:<16}{:<18}{:<18}{:<18}{:<18}\n",
            "Arrangement", "A_Chord", "G_Mix", "G_Track", "G_Phrase"
        ));
        out.push_str(&format!(
            "{:<16}{:<18}{:<18}{:<18}{:<18}\n",
            "",
            cell("a_chord"),
            cell("g_mix"),
            cell("g_track"),
            cell("g_phrase")
        ));
        out
    }
}
