//! Autoregressive prior over code groupings.
//!
//! A context encoder reads the (noise-blended) mixture codes of a piece. The
//! decoder holds one row per (track, step); time layers attend causally along
//! each track and cross-attend to the context, track layers attend across the
//! tracks of one step. Attention is always restricted to one axis, so no
//! score matrix is larger than `max(N, T)` on either side.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{CodeGrouping, TIME_FRAMES};
use crate::container::Container;
use crate::nn::{
    Adam, AttentionGroup, AttentionSpec, AttentionStats, Gradients, Graph, LayerNormParams, Linear, LrSchedule, Mat,
    ParamId, ParamStore, Var,
};
use crate::score::instrument;
use crate::{Error, Result};

pub const CODES_PER_GROUPING: usize = 1 + TIME_FRAMES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub context_layers: usize,
    /// Number of interleaved (time layer, track layer) pairs.
    pub decoder_pairs: usize,
    pub dropout: f64,
    pub mix_dim: usize,
    pub pitch_codes: usize,
    pub time_codes: usize,
    pub max_steps: usize,
    pub max_tracks: usize,
    /// Start with all-zero output heads (uniform predictions).
    pub zero_init_heads: bool,
}

impl Default for PriorConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        PriorConfig {
            d_model: 64,
            d_ff: 256,
            heads: 4,
            context_layers: 2,
            decoder_pairs: 2,
            dropout: 0.1,
            mix_dim: 256,
            pitch_codes: 64,
            time_codes: 128,
            max_steps: 16,
            max_tracks: 16,
            zero_init_heads: false,
        }
    }
}

impl PriorConfig {
    /// Full-size configuration (about 9.3M parameters).
    pub fn full_scale() -> Self {
        PriorConfig {
            d_model: 256,
            d_ff: 1024,
            heads: 8,
            context_layers: 2,
            decoder_pairs: 4,
            ..PriorConfig::default()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn micro(mix_dim: usize) -> Self {
        PriorConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            context_layers: 1,
            decoder_pairs: 1,
            dropout: 0.0,
            mix_dim,
            pitch_codes: 8,
            time_codes: 8,
            max_steps: 4,
            max_tracks: 4,
            zero_init_heads: false,
        }
    }

    pub fn output_width(&self) -> usize {
        self.pitch_codes + TIME_FRAMES * self.time_codes
    }

    /// `(offset, size)` of each of the nine heads in a logit row.
    pub fn head_segments(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(0, self.pitch_codes)];
        for k in 0..TIME_FRAMES {
            v.push((self.pitch_codes + k * self.time_codes, self.time_codes));
        }
        v
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid("d_model must be a positive multiple of heads"));
        }
        if self.d_ff == 0 || self.mix_dim == 0 || self.pitch_codes == 0 || self.time_codes == 0 {
            return Err(Error::invalid("prior dimensions must be positive"));
        }
        if self.max_steps == 0 || self.max_tracks == 0 {
            return Err(Error::invalid("max_steps and max_tracks must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Where a clip sits in its song.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingCondition {
    pub song_length_bars: f64,
    pub start: f64,
    pub end: f64,
}

impl TimingCondition {
    /// Timing of `count` consecutive 2-bar clips starting at clip `first`.
    pub fn for_clips(song_bars: usize, first: usize, count: usize) -> Vec<TimingCondition> {
        let total = song_bars.max(1) as f64;
        (first..first + count)
            .map(|c| TimingCondition {
                song_length_bars: total,
                start: (2 * c) as f64 / total,
                end: ((2 * c + 2) as f64 / total).min(1.0),
            })
            .collect()
    }

    fn features(&self) -> [f64; 3] {
        [self.song_length_bars / 128.0, self.start, self.end]
    }
}

/// Nucleus sampling parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub nucleus_p: f64,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            nucleus_p: 0.1,
            temperature: 4.0,
        }
    }
}

/// The smallest set of highest-probability outcomes whose mass reaches `p`,
/// renormalized. Probabilities are sorted descending with ties by index.
pub fn nucleus_support(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

/// Temperature-scaled nucleus sampling from raw logits; temperature 0 is argmax.
pub fn nucleus_sample(logits: &[f64], sampling: SamplingConfig, rng: &mut impl Rng) -> usize {
    if sampling.temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| ((v - max) / sampling.temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let support = nucleus_support(&probs, sampling.nucleus_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, q) in &support {
        acc += q;
        if u < acc {
            return i;
        }
    }
    support.last().expect("nonempty support").0
}

/// Mean over rows of `−(1/9) Σ_k log p(target_k)`.
pub fn grouping_nll(logits: &Mat, targets: &[CodeGrouping], config: &PriorConfig) -> f64 {
    assert_eq!(logits.nrows(), targets.len());
    let segs = config.head_segments();
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let codes = t.to_array();
        for (k, &(off, size)) in segs.iter().enumerate() {
            let row = logits.slice(ndarray::s![r, off..off + size]);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lz = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lz - row[codes[k]];
        }
    }
    total / (CODES_PER_GROUPING * targets.len().max(1)) as f64
}

/// One training segment: mixture codes, per-track groupings and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSegment {
    /// `T` rows of mixture codes.
    pub mix: Vec<Vec<f64>>,
    /// `N` tracks × `T` groupings.
    pub groupings: Vec<Vec<CodeGrouping>>,
    pub instruments: Vec<u8>,
    pub timing: Vec<TimingCondition>,
}

impl PriorSegment {
    pub fn steps(&self) -> usize {
        self.mix.len()
    }

    pub fn tracks(&self) -> usize {
        self.groupings.len()
    }

    fn mix_matrix(&self, dim: usize) -> Mat {
        Mat::from_shape_fn((self.mix.len(), dim), |(t, j)| self.mix[t][j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Fixed noise weight; `None` draws β ~ U[0, 1] per segment.
    pub beta: Option<f64>,
    /// Stop as soon as a step's batch loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            steps: 2000,
            batch_size: 8,
            lr_start: 1e-3,
            lr_end: 1e-5,
            seed: 0,
            beta: None,
            target_loss: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    bias: Option<ParamId>,
}

impl Attn {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: &PriorConfig, max_distance: Option<usize>) -> Self {
        let d = c.d_model;
        Attn {
            q: Linear::new(p, rng, &format!("{name}.q"), d, d),
            k: Linear::new(p, rng, &format!("{name}.k"), d, d),
            v: Linear::new(p, rng, &format!("{name}.v"), d, d),
            o: Linear::new(p, rng, &format!("{name}.o"), d, d),
            bias: max_distance.map(|m| p.zeros(format!("{name}.relative_bias"), c.heads, 2 * m + 1)),
        }
    }
}

#[derive(Clone, Debug)]
struct Ffn {
    ln: LayerNormParams,
    fc1: Linear,
    fc2: Linear,
}

impl Ffn {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: &PriorConfig) -> Self {
        Ffn {
            ln: LayerNormParams::new(p, &format!("{name}.ln"), c.d_model),
            fc1: Linear::new(p, rng, &format!("{name}.fc1"), c.d_model, c.d_ff),
            fc2: Linear::new(p, rng, &format!("{name}.fc2"), c.d_ff, c.d_model),
        }
    }
}

#[derive(Clone, Debug)]
struct SelfBlock {
    ln: LayerNormParams,
    attn: Attn,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    this: SelfBlock,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct TimeLayer {
    this: SelfBlock,
    cross_ln: LayerNormParams,
    cross: Attn,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct TrackLayer {
    this: SelfBlock,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Layers {
    ctx_in: Linear,
    ctx_timing: Linear,
    encoder: Vec<EncoderLayer>,
    ctx_ln: LayerNormParams,
    pitch_table: ParamId,
    time_table: ParamId,
    /// Multiplicative within-grouping position factors, one row per slot.
    slot_scale: ParamId,
    start: ParamId,
    instrument: ParamId,
    dec_timing: Linear,
    pairs: Vec<(TimeLayer, TrackLayer)>,
    out_ln: LayerNormParams,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Prior {
    config: PriorConfig,
    params: ParamStore,
    layers: Layers,
}

/// Decoder inputs of one segment after validation.
struct SegmentView<'a> {
    ctx_input: Mat,
    timing: &'a [TimingCondition],
    instruments: &'a [u8],
    history: &'a [Vec<CodeGrouping>],
    /// Decoder steps to compute (`≤ timing.len()`).
    steps: usize,
}

/// Logits of one forward pass plus attention bookkeeping.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Row `n·T + τ` holds the logits of track `n` at step `τ`.
    pub logits: Mat,
    pub attention: AttentionStats,
}

fn blend(mix: &Mat, beta: f64, rng: &mut ChaCha8Rng) -> Mat {
    let noise = Mat::from_shape_fn(mix.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    mix * (1.0 - beta) + noise * beta
}

impl Prior {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let self_block = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, m: Option<usize>| SelfBlock {
            ln: LayerNormParams::new(p, &format!("{name}.ln"), d),
            attn: Attn::new(p, rng, name, c, m),
        };
        let ctx_in = Linear::new(&mut p, &mut rng, "context.input", c.mix_dim, d);
        let ctx_timing = Linear::new(&mut p, &mut rng, "context.timing", 3, d);
        let encoder = (0..c.context_layers)
            .map(|i| EncoderLayer {
                this: self_block(&mut p, &mut rng, &format!("context.{i}.attn"), Some(c.max_steps - 1)),
                ffn: Ffn::new(&mut p, &mut rng, &format!("context.{i}.ffn"), c),
            })
            .collect();
        let ctx_ln = LayerNormParams::new(&mut p, "context.ln", d);
        let pitch_table = p.normal("embed.pitch", c.pitch_codes, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let time_table = p.normal("embed.time", c.time_codes, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let slot_scale = p.ones("embed.slot_scale", CODES_PER_GROUPING, d);
        let start = p.normal("embed.start", 1, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let instrument = p.normal("embed.instrument", instrument::CLASS_COUNT, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let dec_timing = Linear::new(&mut p, &mut rng, "decoder.timing", 3, d);
        let pairs = (0..c.decoder_pairs)
            .map(|i| {
                let time = TimeLayer {
                    this: self_block(&mut p, &mut rng, &format!("decoder.{i}.time.attn"), Some(c.max_steps - 1)),
                    cross_ln: LayerNormParams::new(&mut p, &format!("decoder.{i}.time.cross.ln"), d),
                    cross: Attn::new(&mut p, &mut rng, &format!("decoder.{i}.time.cross"), c, None),
                    ffn: Ffn::new(&mut p, &mut rng, &format!("decoder.{i}.time.ffn"), c),
                };
                let track = TrackLayer {
                    this: self_block(&mut p, &mut rng, &format!("decoder.{i}.track.attn"), Some(c.max_tracks - 1)),
                    ffn: Ffn::new(&mut p, &mut rng, &format!("decoder.{i}.track.ffn"), c),
                };
                (time, track)
            })
            .collect();
        let out_ln = LayerNormParams::new(&mut p, "decoder.ln", d);
        let head = Linear::new(&mut p, &mut rng, "decoder.head", d, c.output_width());
        if c.zero_init_heads {
            p.get_mut(head.w).fill(0.0);
        }
        let layers = Layers {
            ctx_in,
            ctx_timing,
            encoder,
            ctx_ln,
            pitch_table,
            time_table,
            slot_scale,
            start,
            instrument,
            dec_timing,
            pairs,
            out_ln,
            head,
        };
        Ok(Prior {
            config,
            params: p,
            layers,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes every relative-position bias table.
    pub fn zero_relative_bias(&mut self) {
        let ids: Vec<ParamId> = self
            .params
            .ids()
            .filter(|&id| self.params.name(id).ends_with("relative_bias"))
            .collect();
        for id in ids {
            self.params.get_mut(id).fill(0.0);
        }
    }

    fn check_context(&self, mix: &Mat, timing: &[TimingCondition], beta: f64) -> Result<()> {
        let t = mix.nrows();
        if t == 0 {
            return Err(Error::Empty("context"));
        }
        if t > self.config.max_steps {
            return Err(Error::invalid(format!(
                "{t} steps exceed the configured maximum of {}",
                self.config.max_steps
            )));
        }
        if mix.ncols() != self.config.mix_dim {
            return Err(Error::LengthMismatch {
                what: "mixture code dimension",
                expected: self.config.mix_dim,
                found: mix.ncols(),
            });
        }
        if timing.len() != t {
            return Err(Error::LengthMismatch {
                what: "timing conditions",
                expected: t,
                found: timing.len(),
            });
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!("beta must be in [0, 1], got {beta}")));
        }
        Ok(())
    }

    fn check_tracks(&self, instruments: &[u8], history: &[Vec<CodeGrouping>], steps: usize) -> Result<()> {
        let n = instruments.len();
        if n == 0 || n > self.config.max_tracks {
            return Err(Error::invalid(format!(
                "track count must be in 1..={}, got {n}",
                self.config.max_tracks
            )));
        }
        if let Some(&i) = instruments.iter().find(|&&i| usize::from(i) >= instrument::CLASS_COUNT) {
            return Err(Error::IndexOutOfRange {
                what: "instrument class",
                index: usize::from(i),
                len: instrument::CLASS_COUNT,
            });
        }
        if history.len() != n {
            return Err(Error::LengthMismatch {
                what: "history track count",
                expected: n,
                found: history.len(),
            });
        }
        for h in history {
            if h.len() + 1 < steps {
                return Err(Error::LengthMismatch {
                    what: "history length",
                    expected: steps - 1,
                    found: h.len(),
                });
            }
            for g in h {
                if g.pitch >= self.config.pitch_codes || g.time.iter().any(|&t| t >= self.config.time_codes) {
                    return Err(Error::invalid("grouping index outside the codebook"));
                }
            }
        }
        Ok(())
    }

    fn context_graph(&self, g: &mut Graph<'_>, segs: &[SegmentView<'_>]) -> (Var, Vec<usize>) {
        let l = &self.layers;
        let c = &self.config;
        let mut offsets = Vec::with_capacity(segs.len());
        let mut rows = 0;
        for s in segs {
            offsets.push(rows);
            rows += s.ctx_input.nrows();
        }
        let mut input = Mat::zeros((rows, c.mix_dim));
        let mut timing = Mat::zeros((rows, 3));
        for (s, &off) in segs.iter().zip(&offsets) {
            input.slice_mut(ndarray::s![off..off + s.ctx_input.nrows(), ..]).assign(&s.ctx_input);
            for (t, tc) in s.timing.iter().enumerate() {
                for (j, v) in tc.features().iter().enumerate() {
                    timing[[off + t, j]] = *v;
                }
            }
        }
        let x = g.constant(input);
        let x = g.dense(x, l.ctx_in);
        let tv = g.constant(timing);
        let tv = g.dense(tv, l.ctx_timing);
        let mut x = g.add(x, tv);
        x = g.dropout(x, c.dropout);
        let spec = AttentionSpec {
            heads: c.heads,
            causal: false,
            max_distance: c.max_steps - 1,
            groups: segs
                .iter()
                .zip(&offsets)
                .map(|(s, &off)| {
                    let r: Vec<usize> = (off..off + s.ctx_input.nrows()).collect();
                    AttentionGroup::sequential(r.clone(), r)
                })
                .collect(),
        };
        for layer in &l.encoder {
            x = self.self_attention(g, x, &layer.this, spec.clone());
            x = self.feed_forward(g, x, &layer.ffn);
        }
        (g.norm(x, l.ctx_ln), offsets)
    }

    fn self_attention(&self, g: &mut Graph<'_>, x: Var, block: &SelfBlock, spec: AttentionSpec) -> Var {
        let h = g.norm(x, block.ln);
        let h = self.attend(g, h, h, &block.attn, spec);
        let h = g.dropout(h, self.config.dropout);
        g.add(x, h)
    }

    fn attend(&self, g: &mut Graph<'_>, xq: Var, xkv: Var, a: &Attn, spec: AttentionSpec) -> Var {
        let q = g.dense(xq, a.q);
        let k = g.dense(xkv, a.k);
        let v = g.dense(xkv, a.v);
        let o = g.attention(q, k, v, a.bias, spec);
        g.dense(o, a.o)
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: Var, f: &Ffn) -> Var {
        let h = g.norm(x, f.ln);
        let h = g.dense(h, f.fc1);
        let h = g.gelu(h);
        let h = g.dense(h, f.fc2);
        let h = g.dropout(h, self.config.dropout);
        g.add(x, h)
    }

    /// Builds the full model; returns logits with rows ordered by segment,
    /// then track, then step, and the row offset of each segment.
    fn build(&self, g: &mut Graph<'_>, segs: &[SegmentView<'_>]) -> (Var, Vec<usize>) {
        let l = &self.layers;
        let c = &self.config;
        let (memory, mem_offsets) = self.context_graph(g, segs);

        let mut offsets = Vec::with_capacity(segs.len());
        let mut rows = 0;
        for s in segs {
            offsets.push(rows);
            rows += s.instruments.len() * s.steps;
        }
        let mut pitch_rows = vec![None; rows];
        let mut time_rows = vec![vec![None; rows]; TIME_FRAMES];
        let mut start_rows = vec![None; rows];
        let mut inst_rows = Vec::with_capacity(rows);
        let mut timing = Mat::zeros((rows, 3));
        for (s, &off) in segs.iter().zip(&offsets) {
            for (n, &inst) in s.instruments.iter().enumerate() {
                for tau in 0..s.steps {
                    let r = off + n * s.steps + tau;
                    if tau == 0 {
                        start_rows[r] = Some(0);
                    } else {
                        let gr = s.history[n][tau - 1];
                        pitch_rows[r] = Some(gr.pitch);
                        for (k, rows) in time_rows.iter_mut().enumerate() {
                            rows[r] = Some(gr.time[k]);
                        }
                    }
                    inst_rows.push(usize::from(inst));
                    for (j, v) in s.timing[tau].features().iter().enumerate() {
                        timing[[r, j]] = *v;
                    }
                }
            }
        }
        let slot = g.param(l.slot_scale);
        let pitch_table = g.param(l.pitch_table);
        let time_table = g.param(l.time_table);
        let mut x = {
            let e = g.unfold(pitch_table, pitch_rows.into_iter().map(|i| vec![i]).collect());
            let s0 = g.gather_rows(slot, &[0]);
            g.mul_row(e, s0)
        };
        for (k, rows) in time_rows.into_iter().enumerate() {
            let e = g.unfold(time_table, rows.into_iter().map(|i| vec![i]).collect());
            let sk = g.gather_rows(slot, &[k + 1]);
            let e = g.mul_row(e, sk);
            x = g.add(x, e);
        }
        let start = g.param(l.start);
        let st = g.unfold(start, start_rows.into_iter().map(|i| vec![i]).collect());
        x = g.add(x, st);
        let inst_table = g.param(l.instrument);
        let inst = g.gather_rows(inst_table, &inst_rows);
        x = g.add(x, inst);
        let tv = g.constant(timing);
        let tv = g.dense(tv, l.dec_timing);
        x = g.add(x, tv);
        x = g.dropout(x, c.dropout);

        let mut time_groups = Vec::new();
        let mut cross_groups = Vec::new();
        let mut track_groups = Vec::new();
        for ((s, &off), &moff) in segs.iter().zip(&offsets).zip(&mem_offsets) {
            let n_tracks = s.instruments.len();
            let memory_rows: Vec<usize> = (moff..moff + s.ctx_input.nrows()).collect();
            for n in 0..n_tracks {
                let r: Vec<usize> = (0..s.steps).map(|t| off + n * s.steps + t).collect();
                time_groups.push(AttentionGroup::sequential(r.clone(), r.clone()));
                cross_groups.push(AttentionGroup::sequential(r, memory_rows.clone()));
            }
            for tau in 0..s.steps {
                let r: Vec<usize> = (0..n_tracks).map(|n| off + n * s.steps + tau).collect();
                track_groups.push(AttentionGroup::sequential(r.clone(), r));
            }
        }
        let time_spec = AttentionSpec {
            heads: c.heads,
            causal: true,
            max_distance: c.max_steps - 1,
            groups: time_groups,
        };
        let cross_spec = AttentionSpec {
            heads: c.heads,
            causal: false,
            max_distance: 0,
            groups: cross_groups,
        };
        let track_spec = AttentionSpec {
            heads: c.heads,
            causal: false,
            max_distance: c.max_tracks - 1,
            groups: track_groups,
        };
        for (time, track) in &l.pairs {
            x = self.self_attention(g, x, &time.this, time_spec.clone());
            let h = g.norm(x, time.cross_ln);
            let h = self.attend(g, h, memory, &time.cross, cross_spec.clone());
            let h = g.dropout(h, c.dropout);
            x = g.add(x, h);
            x = self.feed_forward(g, x, &time.ffn);
            x = self.self_attention(g, x, &track.this, track_spec.clone());
            x = self.feed_forward(g, x, &track.ffn);
        }
        let x = g.norm(x, l.out_ln);
        (g.dense(x, l.head), offsets)
    }

    /// Context memory (`T × d_model`) in evaluation mode; the noise `ε` is
    /// drawn per step from `seed`.
    pub fn encode_context(&self, codes: &Mat, timing: &[TimingCondition], beta: f64, seed: u64) -> Result<Mat> {
        self.check_context(codes, timing, beta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = SegmentView {
            ctx_input: blend(codes, beta, &mut rng),
            timing,
            instruments: &[],
            history: &[],
            steps: 0,
        };
        let mut g = Graph::new(&self.params);
        let (m, _) = self.context_graph(&mut g, std::slice::from_ref(&view));
        Ok(g.value(m).clone())
    }

    /// Teacher-forced logits for all `N × T` positions. The input at step τ
    /// is the grouping of step τ−1 (a learned start token at τ = 0).
    pub fn forward(
        &self,
        codes: &Mat,
        timing: &[TimingCondition],
        beta: f64,
        seed: u64,
        instruments: &[u8],
        history: &[Vec<CodeGrouping>],
    ) -> Result<ForwardOutput> {
        self.check_context(codes, timing, beta)?;
        let steps = codes.nrows();
        self.check_tracks(instruments, history, steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = SegmentView {
            ctx_input: blend(codes, beta, &mut rng),
            timing,
            instruments,
            history,
            steps,
        };
        let mut g = Graph::new(&self.params);
        let (logits, _) = self.build(&mut g, std::slice::from_ref(&view));
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            attention: g.attention_stats(),
        })
    }

    /// Samples groupings for every track and step. Prompt steps are copied
    /// verbatim and generation starts after them.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        codes: &Mat,
        timing: &[TimingCondition],
        beta: f64,
        instruments: &[u8],
        prompt: Option<&[Vec<CodeGrouping>]>,
        sampling: SamplingConfig,
        seed: u64,
    ) -> Result<Vec<Vec<CodeGrouping>>> {
        self.check_context(codes, timing, beta)?;
        let steps = codes.nrows();
        let n = instruments.len();
        let mut history: Vec<Vec<CodeGrouping>> = vec![Vec::with_capacity(steps); n];
        if let Some(prompt) = prompt {
            if prompt.len() != n {
                return Err(Error::LengthMismatch {
                    what: "prompt track count",
                    expected: n,
                    found: prompt.len(),
                });
            }
            let len = prompt[0].len();
            if prompt.iter().any(|p| p.len() != len) {
                return Err(Error::invalid("prompt tracks have different lengths"));
            }
            if len >= steps {
                return Err(Error::invalid(format!(
                    "prompt covers {len} steps but the piece only has {steps}"
                )));
            }
            for (h, p) in history.iter_mut().zip(prompt) {
                h.extend_from_slice(p);
            }
        }
        self.check_tracks(instruments, &history, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx_input = blend(codes, beta, &mut rng);
        let segs = self.config.head_segments();
        for tau in history[0].len()..steps {
            let view = SegmentView {
                ctx_input: ctx_input.clone(),
                timing,
                instruments,
                history: &history,
                steps: tau + 1,
            };
            let mut g = Graph::new(&self.params);
            let (logits, _) = self.build(&mut g, std::slice::from_ref(&view));
            let lv = g.value(logits);
            let mut next = Vec::with_capacity(n);
            for track in 0..n {
                let row = lv.row(track * (tau + 1) + tau);
                let mut codes = [0usize; CODES_PER_GROUPING];
                for (k, &(off, size)) in segs.iter().enumerate() {
                    let slice = row.slice(ndarray::s![off..off + size]).to_vec();
                    codes[k] = nucleus_sample(&slice, sampling, &mut rng);
                }
                next.push(CodeGrouping::from_array(codes));
            }
            for (h, gr) in history.iter_mut().zip(next) {
                h.push(gr);
            }
        }
        Ok(history)
    }

    fn check_segment(&self, s: &PriorSegment) -> Result<()> {
        if s.mix.iter().any(|r| r.len() != self.config.mix_dim) {
            return Err(Error::LengthMismatch {
                what: "mixture code dimension",
                expected: self.config.mix_dim,
                found: s.mix.iter().map(|r| r.len()).find(|&l| l != self.config.mix_dim).unwrap_or(0),
            });
        }
        self.check_context(&s.mix_matrix(self.config.mix_dim), &s.timing, 0.0)?;
        if s.groupings.iter().any(|g| g.len() != s.steps()) {
            return Err(Error::invalid("every track needs one grouping per step"));
        }
        self.check_tracks(&s.instruments, &s.groupings, s.steps())
    }

    fn batch_graph<'g>(
        &self,
        g: &mut Graph<'g>,
        batch: &[&PriorSegment],
        betas: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let views: Vec<SegmentView<'_>> = batch
            .iter()
            .zip(betas)
            .map(|(s, &beta)| SegmentView {
                ctx_input: blend(&s.mix_matrix(self.config.mix_dim), beta, rng),
                timing: &s.timing,
                instruments: &s.instruments,
                history: &s.groupings,
                steps: s.steps(),
            })
            .collect();
        let (logits, _) = self.build(g, &views);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for s in batch {
            let w = 1.0 / (CODES_PER_GROUPING * s.tracks() * s.steps() * batch.len()) as f64;
            for track in &s.groupings {
                for gr in track {
                    targets.push(gr.to_array().to_vec());
                    weights.push(w);
                }
            }
        }
        g.cross_entropy(logits, targets, self.config.head_segments(), weights)
    }

    /// Batch NLL under explicit parameters; noise drawn from `seed`.
    pub fn loss_with(
        &self,
        params: &ParamStore,
        batch: &[&PriorSegment],
        beta: f64,
        seed: u64,
        want_grads: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        for s in batch {
            self.check_segment(s)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(params);
        let loss = self.batch_graph(&mut g, batch, &vec![beta; batch.len()], &mut rng);
        let grads = want_grads.then(|| g.backward(loss));
        Ok((g.scalar(loss), grads))
    }

    /// Mean per-segment NLL in evaluation mode.
    pub fn nll(&self, segments: &[PriorSegment], beta: f64, seed: u64) -> Result<f64> {
        if segments.is_empty() {
            return Err(Error::Empty("evaluation segments"));
        }
        let mut total = 0.0;
        for (i, s) in segments.iter().enumerate() {
            let (l, _) = self.loss_with(&self.params, &[s], beta, seed.wrapping_add(i as u64), false)?;
            total += l;
        }
        Ok(total / segments.len() as f64)
    }

    /// Teacher-forced training; returns the model and the loss of every step.
    pub fn train(segments: &[PriorSegment], config: PriorConfig, train: &PriorTrainConfig) -> Result<(Prior, Vec<f64>)> {
        if segments.is_empty() {
            return Err(Error::Empty("prior training corpus"));
        }
        if train.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if let Some(b) = train.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::invalid(format!("beta must be in [0, 1], got {b}")));
            }
        }
        let mut prior = Prior::new(config, train.seed)?;
        for s in segments {
            prior.check_segment(s)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
        let mut opt = Adam::new(&prior.params);
        let schedule = LrSchedule {
            start: train.lr_start,
            end: train.lr_end,
            steps: train.steps,
        };
        let mut order: Vec<usize> = (0..segments.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(train.steps);
        for step in 0..train.steps {
            let mut batch = Vec::with_capacity(train.batch_size);
            while batch.len() < train.batch_size.min(segments.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&segments[order[cursor]]);
                cursor += 1;
            }
            let betas: Vec<f64> = batch
                .iter()
                .map(|_| train.beta.unwrap_or_else(|| rng.random::<f64>()))
                .collect();
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (loss, grads) = {
                let mut g = if prior.config.dropout > 0.0 {
                    Graph::training(&prior.params, dropout_rng)
                } else {
                    Graph::new(&prior.params)
                };
                let loss = prior.batch_graph(&mut g, &batch, &betas, &mut rng);
                (g.scalar(loss), g.backward(loss))
            };
            opt.step(&mut prior.params, &grads, schedule.at(step));
            if step % 100 == 0 {
                log::debug!("prior step {step} loss {loss:.5}");
            }
            losses.push(loss);
            if train.target_loss.is_some_and(|t| loss < t) {
                break;
            }
        }
        Ok((prior, losses))
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container::new(
            "prior",
            serde_json::to_value(&self.config)?,
            self.params.export(),
        ))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "prior" {
            return Err(Error::Checkpoint(format!("expected a prior checkpoint, found {}", c.kind)));
        }
        let config: PriorConfig = serde_json::from_value(c.metadata.clone())?;
        let mut prior = Prior::new(config, 0)?;
        prior.params.import(&c.arrays)?;
        Ok(prior)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, "prior")?)
    }
}
