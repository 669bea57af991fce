//! Small function codec: a mixture encoder, VQ'd pitch/time function encoders
//! and a per-track decoder, trained by separating mixtures back into tracks.

use std::path::Path;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::features::{track_function, TrackFunction};
use crate::nn::{conv_table, sigmoid, Adam, Graph, Linear, LrSchedule, Mat, ParamId, ParamStore, Var};
use crate::score::{downmix, instrument, to_clips, ClipGrid, Piece, CLIP_STEPS, PITCHES};
use crate::vq::{Codebook, COMMITMENT_WEIGHT, EMA_DECAY, RESTART_THRESHOLD};
use crate::{Error, Result};

pub const TIME_FRAMES: usize = 8;
pub const MAX_TRACKS: usize = 16;
const ROLL_WIDTH: usize = 2 * PITCHES;
const PITCH_KERNEL: usize = 12;
const PITCH_STRIDE: usize = 4;
const PITCH_FRAMES: usize = (PITCHES - PITCH_KERNEL) / PITCH_STRIDE + 1;
const TIME_KERNEL: usize = CLIP_STEPS / TIME_FRAMES;

/// Nine discrete indices describing one track clip: one pitch code and
/// eight beat-level time codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeGrouping {
    pub pitch: usize,
    pub time: [usize; TIME_FRAMES],
}

impl CodeGrouping {
    pub fn to_array(&self) -> [usize; 9] {
        let mut a = [0; 9];
        a[0] = self.pitch;
        a[1..].copy_from_slice(&self.time);
        a
    }

    pub fn from_array(a: [usize; 9]) -> Self {
        let mut time = [0; TIME_FRAMES];
        time.copy_from_slice(&a[1..]);
        CodeGrouping { pitch: a[0], time }
    }
}

/// Continuous pre-quantization values of one track function.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionLatent {
    pub pitch: Vec<f64>,
    /// `8 × time_channels`, row-major.
    pub time: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub mix_dim: usize,
    pub mix_channels: [usize; 2],
    pub pitch_channels: usize,
    pub pitch_hidden: usize,
    pub pitch_dim: usize,
    pub pitch_codes: usize,
    pub time_channels: usize,
    pub time_codes: usize,
    pub time_latent: usize,
    pub instrument_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_rank: usize,
    /// Feed continuous latents to the decoder instead of codebook entries.
    /// Only meaningful for gradient checks.
    pub bypass_vq: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mix_dim: 256,
            mix_channels: [64, 128],
            pitch_channels: 8,
            pitch_hidden: 128,
            pitch_dim: 128,
            pitch_codes: 64,
            time_channels: 16,
            time_codes: 128,
            time_latent: 128,
            instrument_dim: 32,
            decoder_hidden: 256,
            decoder_rank: 64,
            bypass_vq: false,
        }
    }
}

impl CodecConfig {
    /// A very small configuration for gradient checks and smoke tests.
    pub fn micro() -> Self {
        CodecConfig {
            mix_dim: 8,
            mix_channels: [4, 6],
            pitch_channels: 2,
            pitch_hidden: 8,
            pitch_dim: 8,
            pitch_codes: 8,
            time_channels: 4,
            time_codes: 8,
            time_latent: 8,
            instrument_dim: 4,
            decoder_hidden: 8,
            decoder_rank: 4,
            bypass_vq: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.mix_dim,
            self.mix_channels[0],
            self.mix_channels[1],
            self.pitch_channels,
            self.pitch_hidden,
            self.pitch_dim,
            self.pitch_codes,
            self.time_channels,
            self.time_codes,
            self.time_latent,
            self.instrument_dim,
            self.decoder_hidden,
            self.decoder_rank,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("codec dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub ema_decay: f64,
    pub restart_threshold: f64,
    pub commitment: f64,
    /// Weight of positive (active) cells in the reconstruction loss.
    pub pos_weight: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_start: 1e-3,
            lr_end: 1e-5,
            seed: 0,
            ema_decay: EMA_DECAY,
            restart_threshold: RESTART_THRESHOLD,
            commitment: COMMITMENT_WEIGHT,
            pos_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    mix1: Linear,
    mix2: Linear,
    mix_out: Linear,
    pitch_conv: Linear,
    pitch_hidden: Linear,
    pitch_fc: Linear,
    time_conv: Linear,
    time_fc: Linear,
    instrument: ParamId,
    dec1: Linear,
    dec2: Linear,
    dec_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Codec {
    config: CodecConfig,
    params: ParamStore,
    layers: Layers,
    pitch_book: Codebook,
    time_book: Codebook,
}

/// One clip of a training piece with per-track supervision.
#[derive(Clone, Debug)]
pub struct ClipExample {
    pub mixture: ClipGrid,
    pub functions: Vec<TrackFunction>,
    pub instruments: Vec<u8>,
    pub tracks: ClipGrid,
}

impl ClipExample {
    pub fn from_clip(clip: &ClipGrid, instruments: &[u8]) -> Result<Self> {
        let functions = (0..clip.track_count())
            .map(|n| track_function(clip, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipExample {
            mixture: downmix(clip),
            functions,
            instruments: instruments.to_vec(),
            tracks: clip.clone(),
        })
    }

    pub fn from_piece(piece: &Piece) -> Result<Vec<Self>> {
        let inst = piece.instruments();
        to_clips(piece).iter().map(|c| ClipExample::from_clip(c, &inst)).collect()
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecEpoch {
    pub loss: f64,
    pub pitch_codes_used: usize,
    pub time_codes_used: usize,
    pub restarts: usize,
}

/// Onset-cell precision/recall summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnsetScore {
    pub true_positive: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl OnsetScore {
    pub fn f1(&self) -> f64 {
        if self.predicted + self.actual == 0 {
            return 1.0;
        }
        2.0 * self.true_positive as f64 / (self.predicted + self.actual) as f64
    }

    pub fn add(&mut self, other: OnsetScore) {
        self.true_positive += other.true_positive;
        self.predicted += other.predicted;
        self.actual += other.actual;
    }

    pub fn compare(predicted: &ClipGrid, actual: &ClipGrid) -> OnsetScore {
        let mut s = OnsetScore {
            true_positive: 0,
            predicted: 0,
            actual: 0,
        };
        for n in 0..predicted.track_count().min(actual.track_count()) {
            let (po, _) = predicted.track_planes(n);
            let (ao, _) = actual.track_planes(n);
            for (&p, &a) in po.iter().zip(ao) {
                s.predicted += p as usize;
                s.actual += a as usize;
                s.true_positive += (p && a) as usize;
            }
        }
        s
    }
}

struct Encoded {
    pitch_pre: Var,
    time_pre: Var,
    pitch_idx: Vec<usize>,
    time_idx: Vec<usize>,
    pitch_codes: Mat,
    time_codes: Mat,
}

fn roll_matrix(clips: &[&ClipGrid], track: usize) -> Mat {
    let mut m = Mat::zeros((clips.len() * CLIP_STEPS, ROLL_WIDTH));
    for (b, clip) in clips.iter().enumerate() {
        let (on, sus) = clip.track_planes(track);
        for t in 0..CLIP_STEPS {
            for p in 0..PITCHES {
                let i = t * PITCHES + p;
                if on[i] {
                    m[[b * CLIP_STEPS + t, p]] = 1.0;
                }
                if sus[i] {
                    m[[b * CLIP_STEPS + t, PITCHES + p]] = 1.0;
                }
            }
        }
    }
    m
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let layers = Layers {
            mix1: Linear::new(&mut p, &mut rng, "mix.conv1", 4 * ROLL_WIDTH, c.mix_channels[0]),
            mix2: Linear::new(&mut p, &mut rng, "mix.conv2", 4 * c.mix_channels[0], c.mix_channels[1]),
            mix_out: Linear::new(&mut p, &mut rng, "mix.out", c.mix_channels[1], c.mix_dim),
            pitch_conv: Linear::new(&mut p, &mut rng, "pitch.conv", PITCH_KERNEL, c.pitch_channels),
            pitch_hidden: Linear::new(&mut p, &mut rng, "pitch.hidden", PITCH_FRAMES * c.pitch_channels, c.pitch_hidden),
            pitch_fc: Linear::new(&mut p, &mut rng, "pitch.fc", c.pitch_hidden, c.pitch_dim),
            time_conv: Linear::new(&mut p, &mut rng, "time.conv", TIME_KERNEL, c.time_channels),
            time_fc: Linear::new(&mut p, &mut rng, "time.fc", TIME_FRAMES * c.time_channels, c.time_latent),
            instrument: p.normal("instrument.embedding", instrument::CLASS_COUNT, c.instrument_dim, 1.0, &mut rng),
            dec1: Linear::new(
                &mut p,
                &mut rng,
                "decoder.fc1",
                c.mix_dim + c.pitch_dim + c.time_latent + c.instrument_dim,
                c.decoder_hidden,
            ),
            dec2: Linear::new(&mut p, &mut rng, "decoder.fc2", c.decoder_hidden, CLIP_STEPS * c.decoder_rank),
            dec_out: Linear::new(&mut p, &mut rng, "decoder.out", c.decoder_rank, ROLL_WIDTH),
        };
        let pitch_book = Codebook::random(c.pitch_codes, c.pitch_dim, 1.0, &mut rng);
        let time_book = Codebook::random(c.time_codes, c.time_channels, 1.0, &mut rng);
        Ok(Codec {
            config,
            params: p,
            layers,
            pitch_book,
            time_book,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn pitch_codebook(&self) -> &Codebook {
        &self.pitch_book
    }

    pub fn time_codebook(&self) -> &Codebook {
        &self.time_book
    }

    pub fn time_codebook_mut(&mut self) -> &mut Codebook {
        &mut self.time_book
    }

    pub fn pitch_codebook_mut(&mut self) -> &mut Codebook {
        &mut self.pitch_book
    }

    fn mixture_graph(&self, g: &mut Graph<'_>, clips: &[&ClipGrid]) -> Var {
        let l = &self.layers;
        let x = g.constant(roll_matrix(clips, 0));
        let (t1, len1) = conv_table(clips.len(), CLIP_STEPS, 4, 2, 1);
        let h = g.unfold(x, t1);
        let h = g.dense(h, l.mix1);
        let h = g.gelu(h);
        let (t2, len2) = conv_table(clips.len(), len1, 4, 2, 1);
        let h = g.unfold(h, t2);
        let h = g.dense(h, l.mix2);
        let h = g.gelu(h);
        let h = g.mean_rows(h, len2);
        g.dense(h, l.mix_out)
    }

    fn function_graph(&self, g: &mut Graph<'_>, functions: &[&TrackFunction]) -> Result<Encoded> {
        let l = &self.layers;
        let c = &self.config;
        let m = functions.len();
        let pitch_in = Mat::from_shape_fn((m * PITCHES, 1), |(r, _)| functions[r / PITCHES].pitch_fn[r % PITCHES]);
        let x = g.constant(pitch_in);
        let (t, frames) = conv_table(m, PITCHES, PITCH_KERNEL, PITCH_STRIDE, 0);
        let h = g.unfold(x, t);
        let h = g.dense(h, l.pitch_conv);
        let h = g.gelu(h);
        let h = g.reshape(h, m, frames * c.pitch_channels);
        let h = g.dense(h, l.pitch_hidden);
        let h = g.gelu(h);
        let pitch_pre = g.dense(h, l.pitch_fc);

        let time_in = Mat::from_shape_fn((m * CLIP_STEPS, 1), |(r, _)| functions[r / CLIP_STEPS].time_fn[r % CLIP_STEPS]);
        let x = g.constant(time_in);
        let (t, _) = conv_table(m, CLIP_STEPS, TIME_KERNEL, TIME_KERNEL, 0);
        let h = g.unfold(x, t);
        let time_pre = g.dense(h, l.time_conv);

        let (pitch_idx, pitch_codes) = self.pitch_book.quantize_rows(g.value(pitch_pre))?;
        let (time_idx, time_codes) = self.time_book.quantize_rows(g.value(time_pre))?;
        Ok(Encoded {
            pitch_pre,
            time_pre,
            pitch_idx,
            time_idx,
            pitch_codes,
            time_codes,
        })
    }

    /// Track logits (`M·32 × 256`, onset then sustain) for `M` tracks given
    /// per-track mixture rows, pitch latents, time codes and instruments.
    fn decoder_graph(&self, g: &mut Graph<'_>, mix: Var, pitch: Var, time: Var, instruments: &[u8]) -> Var {
        let l = &self.layers;
        let m = instruments.len();
        let time = g.reshape(time, m, TIME_FRAMES * self.config.time_channels);
        let time = g.dense(time, l.time_fc);
        let table = g.param(l.instrument);
        let rows: Vec<usize> = instruments.iter().map(|&i| usize::from(i)).collect();
        let inst = g.gather_rows(table, &rows);
        let h = g.concat_cols(&[mix, pitch, time, inst]);
        let h = g.dense(h, l.dec1);
        let h = g.gelu(h);
        let h = g.dense(h, l.dec2);
        let h = g.reshape(h, m * CLIP_STEPS, self.config.decoder_rank);
        let h = g.gelu(h);
        g.dense(h, l.dec_out)
    }

    /// Mixture code of every (single-track) clip, one row each.
    pub fn encode_mixtures(&self, clips: &[ClipGrid]) -> Result<Mat> {
        if let Some(c) = clips.iter().find(|c| c.track_count() != 1) {
            return Err(Error::invalid(format!(
                "mixture encoder expects a single-track clip, got {} tracks; downmix first",
                c.track_count()
            )));
        }
        if clips.is_empty() {
            return Ok(Mat::zeros((0, self.config.mix_dim)));
        }
        let refs: Vec<&ClipGrid> = clips.iter().collect();
        let mut g = Graph::new(&self.params);
        let z = self.mixture_graph(&mut g, &refs);
        Ok(g.value(z).clone())
    }

    pub fn encode_mixture(&self, clip: &ClipGrid) -> Result<Vec<f64>> {
        Ok(self.encode_mixtures(std::slice::from_ref(clip))?.row(0).to_vec())
    }

    pub fn encode_function(&self, function: &TrackFunction) -> Result<(CodeGrouping, FunctionLatent)> {
        Ok(self.encode_functions(&[function])?.remove(0))
    }

    pub fn encode_functions(&self, functions: &[&TrackFunction]) -> Result<Vec<(CodeGrouping, FunctionLatent)>> {
        if functions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let e = self.function_graph(&mut g, functions)?;
        let pitch = g.value(e.pitch_pre);
        let time = g.value(e.time_pre);
        Ok((0..functions.len())
            .map(|i| {
                let mut t = [0; TIME_FRAMES];
                t.copy_from_slice(&e.time_idx[i * TIME_FRAMES..(i + 1) * TIME_FRAMES]);
                let grouping = CodeGrouping {
                    pitch: e.pitch_idx[i],
                    time: t,
                };
                let latent = FunctionLatent {
                    pitch: pitch.row(i).to_vec(),
                    time: time.slice(s![i * TIME_FRAMES..(i + 1) * TIME_FRAMES, ..]).iter().copied().collect(),
                };
                (grouping, latent)
            })
            .collect())
    }

    /// Groupings of every track of a multi-track clip.
    pub fn encode_clip_tracks(&self, clip: &ClipGrid) -> Result<Vec<CodeGrouping>> {
        let functions = (0..clip.track_count())
            .map(|n| track_function(clip, n))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TrackFunction> = functions.iter().collect();
        Ok(self.encode_functions(&refs)?.into_iter().map(|(g, _)| g).collect())
    }

    fn check_grouping(&self, grouping: &CodeGrouping) -> Result<()> {
        if grouping.pitch >= self.config.pitch_codes {
            return Err(Error::IndexOutOfRange {
                what: "pitch code",
                index: grouping.pitch,
                len: self.config.pitch_codes,
            });
        }
        if let Some(&t) = grouping.time.iter().find(|&&t| t >= self.config.time_codes) {
            return Err(Error::IndexOutOfRange {
                what: "time code",
                index: t,
                len: self.config.time_codes,
            });
        }
        Ok(())
    }

    /// Onset/sustain logits (`N·32 × 256`) of the decoded tracks.
    pub fn decode_logits(&self, mix: &[f64], groupings: &[CodeGrouping], instruments: &[u8]) -> Result<Mat> {
        let n = groupings.len();
        if n == 0 || n > MAX_TRACKS {
            return Err(Error::invalid(format!("track count must be in 1..={MAX_TRACKS}, got {n}")));
        }
        if instruments.len() != n {
            return Err(Error::LengthMismatch {
                what: "instrument count",
                expected: n,
                found: instruments.len(),
            });
        }
        if mix.len() != self.config.mix_dim {
            return Err(Error::LengthMismatch {
                what: "mixture code dimension",
                expected: self.config.mix_dim,
                found: mix.len(),
            });
        }
        if let Some(&i) = instruments.iter().find(|&&i| usize::from(i) >= instrument::CLASS_COUNT) {
            return Err(Error::IndexOutOfRange {
                what: "instrument class",
                index: usize::from(i),
                len: instrument::CLASS_COUNT,
            });
        }
        for gr in groupings {
            self.check_grouping(gr)?;
        }
        let c = &self.config;
        let mut g = Graph::new(&self.params);
        let mix_rows = Mat::from_shape_fn((n, c.mix_dim), |(_, j)| mix[j]);
        let pitch = Mat::from_shape_fn((n, c.pitch_dim), |(i, j)| self.pitch_book.entry(groupings[i].pitch)[j]);
        let time = Mat::from_shape_fn((n * TIME_FRAMES, c.time_channels), |(r, j)| {
            self.time_book.entry(groupings[r / TIME_FRAMES].time[r % TIME_FRAMES])[j]
        });
        let mix = g.constant(mix_rows);
        let pitch = g.constant(pitch);
        let time = g.constant(time);
        let logits = self.decoder_graph(&mut g, mix, pitch, time, instruments);
        Ok(g.value(logits).clone())
    }

    /// Decodes `N` tracks; a cell is on when its sigmoid exceeds 0.5.
    pub fn decode(&self, mix: &[f64], groupings: &[CodeGrouping], instruments: &[u8]) -> Result<ClipGrid> {
        let logits = self.decode_logits(mix, groupings, instruments)?;
        let mut clip = ClipGrid::new(groupings.len());
        for n in 0..groupings.len() {
            for t in 0..CLIP_STEPS {
                let row = logits.row(n * CLIP_STEPS + t);
                for p in 0..PITCHES {
                    if sigmoid(row[p]) > 0.5 {
                        clip.set_onset(n, t, p, true);
                    } else if sigmoid(row[PITCHES + p]) > 0.5 {
                        clip.set_sustain(n, t, p, true);
                    }
                }
            }
        }
        Ok(clip.normalized())
    }

    /// Training loss of a batch of clips against the given parameter values.
    ///
    /// Returns `(loss, gradients, pitch latents, pitch assignments, time
    /// latents, time assignments)`; gradients only when `want_grads`.
    fn batch_loss(
        &self,
        params: &ParamStore,
        batch: &[&ClipExample],
        commitment: f64,
        pos_weight: f64,
        want_grads: bool,
    ) -> Result<BatchOutput> {
        let c = &self.config;
        let mut g = Graph::new(params);
        let mixtures: Vec<&ClipGrid> = batch.iter().map(|e| &e.mixture).collect();
        let mix = self.mixture_graph(&mut g, &mixtures);
        let mut mix_rows = Vec::new();
        let mut functions = Vec::new();
        let mut instruments = Vec::new();
        let mut targets = Vec::new();
        for (b, e) in batch.iter().enumerate() {
            for n in 0..e.tracks.track_count() {
                mix_rows.push(b);
                functions.push(&e.functions[n]);
                instruments.push(e.instruments[n]);
                targets.push((&e.tracks, n));
            }
        }
        let m = functions.len();
        let mix = g.gather_rows(mix, &mix_rows);
        let enc = self.function_graph(&mut g, &functions)?;
        let (pitch, time) = if c.bypass_vq {
            (enc.pitch_pre, enc.time_pre)
        } else {
            (
                g.straight_through(enc.pitch_pre, enc.pitch_codes.clone()),
                g.straight_through(enc.time_pre, enc.time_codes.clone()),
            )
        };
        let logits = self.decoder_graph(&mut g, mix, pitch, time, &instruments);
        let mut target = Mat::zeros((m * CLIP_STEPS, ROLL_WIDTH));
        for (i, (clip, n)) in targets.iter().enumerate() {
            let r = roll_matrix(&[clip], *n);
            target.slice_mut(s![i * CLIP_STEPS..(i + 1) * CLIP_STEPS, ..]).assign(&r);
        }
        let recon = g.bce_with_logits(logits, target, pos_weight);
        let pc = g.constant(enc.pitch_codes);
        let tc = g.constant(enc.time_codes);
        let cp = g.mse(enc.pitch_pre, pc);
        let ct = g.mse(enc.time_pre, tc);
        let commit = g.add(cp, ct);
        let commit = g.scale(commit, commitment);
        let loss = g.add(recon, commit);
        let grads = want_grads.then(|| g.backward(loss));
        Ok(BatchOutput {
            loss: g.scalar(loss),
            grads,
            pitch_latents: g.value(enc.pitch_pre).clone(),
            pitch_idx: enc.pitch_idx,
            time_latents: g.value(enc.time_pre).clone(),
            time_idx: enc.time_idx,
        })
    }

    /// Loss of a batch under an explicit parameter set, for gradient checks.
    pub fn loss_with(
        &self,
        params: &ParamStore,
        batch: &[&ClipExample],
        want_grads: bool,
    ) -> Result<(f64, Option<crate::nn::Gradients>)> {
        let out = self.batch_loss(params, batch, COMMITMENT_WEIGHT, 1.0, want_grads)?;
        Ok((out.loss, out.grads))
    }

    /// Mean loss over examples without updating anything.
    pub fn evaluate_loss(&self, examples: &[ClipExample], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&ClipExample> = chunk.iter().collect();
            let out = self.batch_loss(&self.params, &refs, COMMITMENT_WEIGHT, 1.0, false)?;
            total += out.loss * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Re-seeds codebooks from encoder outputs on `examples` (all entries).
    fn seed_codebooks(&mut self, examples: &[ClipExample], rng: &mut ChaCha8Rng) -> Result<()> {
        let functions: Vec<&TrackFunction> = examples.iter().flat_map(|e| e.functions.iter()).collect();
        let (pitch, time) = self.function_latents(&functions)?;
        self.pitch_book.reset_usage();
        self.time_book.reset_usage();
        self.pitch_book.random_restart(&pitch, f64::INFINITY, rng)?;
        self.time_book.random_restart(&time, f64::INFINITY, rng)?;
        Ok(())
    }

    fn function_latents(&self, functions: &[&TrackFunction]) -> Result<(Mat, Mat)> {
        let mut g = Graph::new(&self.params);
        let e = self.function_graph(&mut g, functions)?;
        Ok((g.value(e.pitch_pre).clone(), g.value(e.time_pre).clone()))
    }

    /// Trains on the clips of `corpus`; returns the model and per-epoch stats.
    pub fn train(corpus: &[Piece], config: CodecConfig, train: &CodecTrainConfig) -> Result<(Codec, Vec<CodecEpoch>)> {
        let mut examples = Vec::new();
        for piece in corpus {
            examples.extend(ClipExample::from_piece(piece)?);
        }
        Self::train_examples(&examples, config, train)
    }

    pub fn train_examples(
        examples: &[ClipExample],
        config: CodecConfig,
        train: &CodecTrainConfig,
    ) -> Result<(Codec, Vec<CodecEpoch>)> {
        if examples.is_empty() {
            return Err(Error::Empty("codec training corpus"));
        }
        if train.batch_size == 0 || train.epochs == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        let mut codec = Codec::new(config, train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
        codec.seed_codebooks(examples, &mut rng)?;
        let mut opt = Adam::new(&codec.params);
        let steps_per_epoch = examples.len().div_ceil(train.batch_size);
        let schedule = LrSchedule {
            start: train.lr_start,
            end: train.lr_end,
            steps: steps_per_epoch * train.epochs,
        };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut history = Vec::with_capacity(train.epochs);
        let mut step = 0;
        for epoch in 0..train.epochs {
            order.shuffle(&mut rng);
            codec.pitch_book.reset_usage();
            codec.time_book.reset_usage();
            let mut pitch_pool = Vec::new();
            let mut time_pool = Vec::new();
            let mut total = 0.0;
            for chunk in order.chunks(train.batch_size) {
                let batch: Vec<&ClipExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let out = codec.batch_loss(&codec.params, &batch, train.commitment, train.pos_weight, true)?;
                total += out.loss * batch.len() as f64;
                let grads = out.grads.expect("requested");
                opt.step(&mut codec.params, &grads, schedule.at(step));
                step += 1;
                codec.pitch_book.record_usage(&out.pitch_idx);
                codec.time_book.record_usage(&out.time_idx);
                codec.pitch_book.ema_update(&out.pitch_latents, &out.pitch_idx, train.ema_decay);
                codec.time_book.ema_update(&out.time_latents, &out.time_idx, train.ema_decay);
                pitch_pool.push(out.pitch_latents);
                time_pool.push(out.time_latents);
            }
            let pitch_codes_used = codec.pitch_book.used_entries();
            let time_codes_used = codec.time_book.used_entries();
            let pitch_pool = concat_rows(&pitch_pool);
            let time_pool = concat_rows(&time_pool);
            // the final epoch keeps its codebooks so the decoder matches them
            let restarts = if epoch + 1 < train.epochs {
                codec.pitch_book.random_restart(&pitch_pool, train.restart_threshold, &mut rng)?
                    + codec.time_book.random_restart(&time_pool, train.restart_threshold, &mut rng)?
            } else {
                0
            };
            let loss = total / examples.len() as f64;
            log::debug!("codec epoch loss {loss:.5}, codes used {pitch_codes_used}/{time_codes_used}, restarts {restarts}");
            history.push(CodecEpoch {
                loss,
                pitch_codes_used,
                time_codes_used,
                restarts,
            });
        }
        Ok((codec, history))
    }

    /// Onset agreement when decoding each example from its own mixture code
    /// and true groupings.
    pub fn reconstruction_score(&self, examples: &[ClipExample]) -> Result<OnsetScore> {
        let mut score = OnsetScore {
            true_positive: 0,
            predicted: 0,
            actual: 0,
        };
        for e in examples {
            let mix = self.encode_mixture(&e.mixture)?;
            let groupings = self.encode_clip_tracks(&e.tracks)?;
            let out = self.decode(&mix, &groupings, &e.instruments)?;
            score.add(OnsetScore::compare(&out, &e.tracks));
        }
        Ok(score)
    }

    /// Usage histograms of both codebooks over `examples` (pitch, time).
    pub fn code_usage(&self, examples: &[ClipExample]) -> Result<(Vec<u64>, Vec<u64>)> {
        let mut pitch = vec![0; self.config.pitch_codes];
        let mut time = vec![0; self.config.time_codes];
        for e in examples {
            for g in self.encode_clip_tracks(&e.tracks)? {
                pitch[g.pitch] += 1;
                for t in g.time {
                    time[t] += 1;
                }
            }
        }
        Ok((pitch, time))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut arrays = self.params.export();
        arrays.extend(self.pitch_book.export("codebook.pitch"));
        arrays.extend(self.time_book.export("codebook.time"));
        Ok(Container::new("codec", serde_json::to_value(&self.config)?, arrays))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "codec" {
            return Err(Error::Checkpoint(format!("expected a codec checkpoint, found {}", c.kind)));
        }
        let config: CodecConfig = serde_json::from_value(c.metadata.clone())?;
        let mut codec = Codec::new(config, 0)?;
        let (books, weights): (Vec<_>, Vec<_>) = c.arrays.iter().cloned().partition(|(n, _, _)| n.starts_with("codebook."));
        codec.params.import(&weights)?;
        codec.pitch_book = Codebook::import(&books, "codebook.pitch")?;
        codec.time_book = Codebook::import(&books, "codebook.time")?;
        if codec.pitch_book.size() != codec.config.pitch_codes
            || codec.pitch_book.dim() != codec.config.pitch_dim
            || codec.time_book.size() != codec.config.time_codes
            || codec.time_book.dim() != codec.config.time_channels
        {
            return Err(Error::Checkpoint("codebook shape does not match codec config".into()));
        }
        Ok(codec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, "codec")?)
    }
}

struct BatchOutput {
    loss: f64,
    grads: Option<crate::nn::Gradients>,
    pitch_latents: Mat,
    pitch_idx: Vec<usize>,
    time_latents: Mat,
    time_idx: Vec<usize>,
}

fn concat_rows(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{Meter, NoteEvent, Track};

    fn tiny_piece() -> Piece {
        let bass = Track::new(8).with_notes((0..4).map(|b| NoteEvent::new(b * 16, 8, 36 + b as u8)).collect());
        let pad = Track::new(19).with_notes(vec![NoteEvent::new(0, 32, 60), NoteEvent::new(32, 32, 64)]);
        Piece::new(Meter::FourFour, 4).with_tracks(vec![bass, pad])
    }

    #[test]
    fn shapes_and_determinism() {
        let codec = Codec::new(CodecConfig::micro(), 3).unwrap();
        let ex = ClipExample::from_piece(&tiny_piece()).unwrap();
        let z = codec.encode_mixture(&ex[0].mixture).unwrap();
        assert_eq!(z.len(), 8);
        assert_eq!(z, codec.encode_mixture(&ex[0].mixture).unwrap());
        let zero = codec.encode_mixture(&ClipGrid::new(1)).unwrap();
        assert!(zero.iter().all(|v| v.is_finite()));
        assert!(codec.encode_mixture(&ex[0].tracks).is_err());
        let groupings = codec.encode_clip_tracks(&ex[0].tracks).unwrap();
        assert_eq!(groupings.len(), 2);
        let out = codec.decode(&z, &groupings, &[8, 19]).unwrap();
        assert_eq!(out.track_count(), 2);
        assert!(codec.decode(&z, &[], &[]).is_err());
        assert!(codec.decode(&z, &vec![groupings[0]; 17], &[0; 17]).is_err());
    }

    #[test]
    fn decode_is_track_symmetric() {
        let codec = Codec::new(CodecConfig::micro(), 4).unwrap();
        let ex = ClipExample::from_piece(&tiny_piece()).unwrap();
        let z = codec.encode_mixture(&ex[0].mixture).unwrap();
        let g = codec.encode_clip_tracks(&ex[0].tracks).unwrap();
        let a = codec.decode_logits(&z, &g, &[8, 19]).unwrap();
        let b = codec.decode_logits(&z, &[g[1], g[0]], &[19, 8]).unwrap();
        assert_eq!(a.slice(s![0..32, ..]), b.slice(s![32..64, ..]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = Codec::new(CodecConfig::micro(), 5).unwrap();
        let back = Codec::from_container(&Container::from_bytes(&codec.to_container().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, codec.params);
        assert_eq!(back.pitch_book.entries(), codec.pitch_book.entries());
        let ex = ClipExample::from_piece(&tiny_piece()).unwrap();
        assert_eq!(
            back.encode_mixture(&ex[1].mixture).unwrap(),
            codec.encode_mixture(&ex[1].mixture).unwrap()
        );
    }
}
