//! Python bindings: score I/O, metrics, checkpoints, arrangement and toy training.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orchestrion::codec::{Codec as CoreCodec, CodecConfig, CodecTrainConfig};
use orchestrion::features::recognize_chords;
use orchestrion::metrics::{self, References};
use orchestrion::pipeline::{self, OrchestrateOptions, DEFAULT_ALPHA, DEFAULT_BETA};
use orchestrion::planner::{self, DbFilter, PhraseDb as CorePhraseDb, PlannerWeights};
use orchestrion::prior::{Prior as CorePrior, SamplingConfig};
use orchestrion::score::{self, LeadSheet as CoreLeadSheet, Piece as CorePiece};
use orchestrion::{toy, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for orchestrion::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A multi-track symbolic score on a 16th-note grid.
#[pyclass(module = "orchestrion", from_py_object)]
#[derive(Clone)]
struct Piece {
    inner: CorePiece,
}

#[pymethods]
impl Piece {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Piece { inner: CorePiece::from_json(text).py()? })
    }

    #[staticmethod]
    fn read_midi(path: &str) -> PyResult<Self> {
        Ok(Piece { inner: score::read_midi(path, true).py()? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    fn write_midi(&self, path: &str) -> PyResult<()> {
        score::write_midi(&self.inner, path).py()
    }

    #[getter]
    fn bar_count(&self) -> usize {
        self.inner.bar_count
    }

    #[getter]
    fn instruments(&self) -> Vec<u8> {
        self.inner.instruments()
    }

    /// Note count per track.
    fn note_counts(&self) -> Vec<usize> {
        self.inner.tracks.iter().map(|t| t.notes.len()).collect()
    }

    /// Single-track downmix of every track, suitable as orchestration input.
    fn downmix(&self) -> Piece {
        let merged = self.inner.merged_track(0);
        Piece { inner: CorePiece::new(self.inner.meter, self.inner.bar_count).with_tracks(vec![merged]) }
    }

    /// Beat-level chord labels such as `"A:m"`.
    fn chords(&self) -> Vec<String> {
        recognize_chords(&self.inner).iter().map(|c| c.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.tracks.len()
    }

    fn __eq__(&self, other: &Piece) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Piece(bars={}, instruments={:?})", self.inner.bar_count, self.inner.instruments())
    }
}

/// Melody, per-beat chords and an optional phrase annotation.
#[pyclass(module = "orchestrion", from_py_object)]
#[derive(Clone)]
struct LeadSheet {
    inner: CoreLeadSheet,
}

#[pymethods]
impl LeadSheet {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(LeadSheet { inner: CoreLeadSheet::from_json(text).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(LeadSheet { inner: CoreLeadSheet::load_json(path).py()? })
    }

    /// A 32-bar AABB lead sheet with a seeded melody.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn toy(seed: u64) -> Self {
        LeadSheet { inner: toy::aabb_lead(&mut ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    #[getter]
    fn bar_count(&self) -> usize {
        self.inner.bar_count()
    }

    #[getter]
    fn chords(&self) -> Vec<String> {
        self.inner.chords.iter().map(|c| c.to_string()).collect()
    }

    #[getter]
    fn phrases(&self) -> Option<String> {
        self.inner.phrases.as_deref().map(score::format_phrases)
    }
}

/// Piano phrase database used by the planner.
#[pyclass(module = "orchestrion", from_py_object)]
#[derive(Clone)]
struct PhraseDb {
    inner: CorePhraseDb,
}

#[pymethods]
impl PhraseDb {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PhraseDb { inner: CorePhraseDb::load(path).py()? })
    }

    /// A database built from `songs` generated songs.
    #[staticmethod]
    #[pyo3(signature = (songs=12, seed=0))]
    fn toy(songs: usize, seed: u64) -> PyResult<Self> {
        Ok(PhraseDb { inner: toy::phrase_db(&mut ChaCha8Rng::seed_from_u64(seed), songs).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// The function codec (mixture encoder, VQ'd track functions, track decoder).
#[pyclass(module = "orchestrion", from_py_object)]
#[derive(Clone)]
struct Codec {
    inner: CoreCodec,
}

#[pymethods]
impl Codec {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Codec { inner: CoreCodec::load(path).py()? })
    }

    /// Trains the desk-scale codec on multi-track pieces.
    #[staticmethod]
    #[pyo3(signature = (pieces, epochs=30, seed=0, pos_weight=1.0))]
    fn train(py: Python<'_>, pieces: Vec<Piece>, epochs: usize, seed: u64, pos_weight: f64) -> PyResult<Self> {
        let corpus: Vec<CorePiece> = pieces.into_iter().map(|p| p.inner).collect();
        let config = CodecTrainConfig { epochs, seed, pos_weight, ..CodecTrainConfig::default() };
        let (inner, _) = py.detach(|| CoreCodec::train(&corpus, CodecConfig::default(), &config)).py()?;
        Ok(Codec { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }
}

/// The autoregressive prior over per-track code groupings.
#[pyclass(module = "orchestrion", from_py_object)]
#[derive(Clone)]
struct Prior {
    inner: CorePrior,
}

#[pymethods]
impl Prior {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Prior { inner: CorePrior::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }
}

/// Generates a band corpus and phrase database, then trains codec and prior on it.
///
/// Returns `(codec, prior, db, corpus)`.
#[pyfunction]
#[pyo3(signature = (seed=1, pieces=16, bars=8, codec_epochs=60, prior_steps=800))]
fn train_toy(
    py: Python<'_>,
    seed: u64,
    pieces: usize,
    bars: usize,
    codec_epochs: usize,
    prior_steps: usize,
) -> PyResult<(Codec, Prior, PhraseDb, Vec<Piece>)> {
    let mut recipe = toy::ToyRecipe { seed, pieces, bars, ..toy::ToyRecipe::default() };
    recipe.codec.epochs = codec_epochs;
    recipe.prior.steps = prior_steps;
    let m = py.detach(|| toy::train_models(&recipe)).py()?;
    Ok((
        Codec { inner: m.codec },
        Prior { inner: m.prior },
        PhraseDb { inner: m.db },
        m.corpus.into_iter().map(|inner| Piece { inner }).collect(),
    ))
}

/// A multi-track toy band piece.
#[pyfunction]
#[pyo3(signature = (bars=8, seed=0))]
fn toy_band(bars: usize, seed: u64) -> Piece {
    Piece { inner: toy::band_piece(&mut ChaCha8Rng::seed_from_u64(seed), bars) }
}

fn options(beta: f64, nucleus_p: f64, temperature: f64, seed: u64) -> OrchestrateOptions {
    OrchestrateOptions { beta, sampling: SamplingConfig { nucleus_p, temperature }, seed }
}

/// Stage-1 piano sketch: melody track followed by the re-harmonized accompaniment.
#[pyfunction]
fn arrange_piano(lead: &LeadSheet, db: &PhraseDb) -> PyResult<Piece> {
    let sketch = planner::arrange_piano(&lead.inner, &db.inner, &PlannerWeights::default(), &DbFilter::default()).py()?;
    Ok(Piece { inner: sketch.piece })
}

/// Orchestrates a single-track piano piece for the given instrument classes.
#[pyfunction]
#[pyo3(signature = (codec, prior, piano, instruments, prompt=None, beta=DEFAULT_BETA, nucleus_p=None, temperature=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn orchestrate(
    py: Python<'_>,
    codec: &Codec,
    prior: &Prior,
    piano: &Piece,
    instruments: Vec<u8>,
    prompt: Option<Piece>,
    beta: f64,
    nucleus_p: Option<f64>,
    temperature: Option<f64>,
    seed: u64,
) -> PyResult<Piece> {
    let d = SamplingConfig::default();
    let opts = options(beta, nucleus_p.unwrap_or(d.nucleus_p), temperature.unwrap_or(d.temperature), seed);
    let prompt = prompt.map(|p| p.inner);
    let out = py
        .detach(|| pipeline::orchestrate(&codec.inner, &prior.inner, &piano.inner, &instruments, prompt.as_ref(), &opts))
        .py()?;
    Ok(Piece { inner: out.piece })
}

/// Full arrangement: melody track first, then one track per instrument.
#[pyfunction]
#[pyo3(signature = (lead, db, codec, prior, instruments, prompt=None, beta=DEFAULT_BETA, nucleus_p=None, temperature=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn arrange(
    py: Python<'_>,
    lead: &LeadSheet,
    db: &PhraseDb,
    codec: &Codec,
    prior: &Prior,
    instruments: Vec<u8>,
    prompt: Option<Piece>,
    beta: f64,
    nucleus_p: Option<f64>,
    temperature: Option<f64>,
    seed: u64,
) -> PyResult<Piece> {
    let d = SamplingConfig::default();
    let opts = options(beta, nucleus_p.unwrap_or(d.nucleus_p), temperature.unwrap_or(d.temperature), seed);
    let prompt = prompt.map(|p| p.inner);
    let out = py
        .detach(|| {
            pipeline::arrange(
                &lead.inner,
                &db.inner,
                &PlannerWeights::default(),
                &DbFilter::default(),
                &codec.inner,
                &prior.inner,
                &instruments,
                prompt.as_ref(),
                &opts,
            )
        })
        .py()?;
    Ok(Piece { inner: out.piece })
}

/// Index of the best-matching multi-track donor and its 2-bar opening.
#[pyfunction]
#[pyo3(signature = (piano, db, alpha=DEFAULT_ALPHA, seed=0))]
fn donor_search(piano: &Piece, db: Vec<Piece>, alpha: f64, seed: u64) -> PyResult<(usize, f64, Piece)> {
    let db: Vec<CorePiece> = db.into_iter().map(|p| p.inner).collect();
    let m = pipeline::donor_search(&piano.inner, &db, alpha, seed).py()?;
    Ok((m.index, m.score, Piece { inner: m.segment }))
}

/// Every metric the given references allow, as a dict of name to value or None.
#[pyfunction]
#[pyo3(signature = (result, piano=None, lead=None, accompaniment=None))]
fn evaluate(
    result: &Piece,
    piano: Option<&Piece>,
    lead: Option<&LeadSheet>,
    accompaniment: Option<&Piece>,
) -> PyResult<Vec<(String, Option<f64>)>> {
    let refs = References {
        piano: piano.map(|p| &p.inner),
        lead: lead.map(|l| &l.inner),
        phrases: lead.and_then(|l| l.inner.phrases.as_deref()),
    };
    let report = metrics::evaluate(&result.inner, accompaniment.map(|p| &p.inner), &refs).py()?;
    Ok(metrics::METRIC_NAMES.iter().map(|n| n.to_string()).zip(report.values()).collect())
}

#[pyfunction]
fn s_pitch(result: &Piece, piano: &Piece) -> PyResult<f64> {
    metrics::s_pitch(&result.inner, &piano.inner).py()
}

#[pyfunction]
fn s_groove(result: &Piece, piano: &Piece) -> PyResult<f64> {
    metrics::s_groove(&result.inner, &piano.inner).py()
}

#[pyfunction]
fn a_chord(arrangement: &Piece, lead: &LeadSheet) -> PyResult<f64> {
    metrics::a_chord(&arrangement.inner, &lead.inner).py()
}

#[pyfunction]
fn g_mix(piece: &Piece) -> PyResult<f64> {
    metrics::g_mix(&piece.inner).py()
}

#[pymodule(name = "orchestrion")]
fn orchestrion_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Piece>()?;
    m.add_class::<LeadSheet>()?;
    m.add_class::<PhraseDb>()?;
    m.add_class::<Codec>()?;
    m.add_class::<Prior>()?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(toy_band, m)?)?;
    m.add_function(wrap_pyfunction!(arrange_piano, m)?)?;
    m.add_function(wrap_pyfunction!(orchestrate, m)?)?;
    m.add_function(wrap_pyfunction!(arrange, m)?)?;
    m.add_function(wrap_pyfunction!(donor_search, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(s_pitch, m)?)?;
    m.add_function(wrap_pyfunction!(s_groove, m)?)?;
    m.add_function(wrap_pyfunction!(a_chord, m)?)?;
    m.add_function(wrap_pyfunction!(g_mix, m)?)?;
    Ok(())
}
