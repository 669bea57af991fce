//! Minimal reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar loss with
//! respect to every parameter touched. Parameters live in a [`ParamStore`] and
//! are referenced, never copied, by the graph.

mod attention;
mod gradcheck;
mod optim;

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use attention::{AttentionGroup, AttentionSpec};
pub use gradcheck::{gradient_check, GradCheck};
pub use optim::{Adam, LrSchedule};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named learnable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// `(name, shape, row-major data)` for serialization.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, m)| (n.clone(), m.shape().to_vec(), m.iter().copied().collect()))
            .collect()
    }

    /// Overwrites values from exported arrays; names and shapes must match exactly.
    pub fn import(&mut self, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> crate::Result<()> {
        for (name, shape, data) in arrays {
            let Some(id) = self.id(name) else {
                continue;
            };
            let m = &mut self.values[id.0];
            if m.shape() != shape.as_slice() || data.len() != m.len() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name}: shape {shape:?} does not match model {:?}",
                    m.shape()
                )));
            }
            for (dst, &src) in m.iter_mut().zip(data) {
                *dst = src;
            }
        }
        for name in &self.names {
            if !arrays.iter().any(|(n, _, _)| n == name) {
                return Err(crate::Error::Checkpoint(format!("missing parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Dense layer `x · W + b`, `W` initialized `N(0, 1/fan_in)`, `b` zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.normal(format!("{name}.w"), fan_in, fan_out, std, rng),
            b: store.zeros(format!("{name}.b"), 1, fan_out),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNormParams {
            gamma: store.ones(format!("{name}.gamma"), 1, width),
            beta: store.zeros(format!("{name}.beta"), 1, width),
        }
    }
}

/// Row gather table for a 1-D convolution over `batch` sequences of `len`
/// rows each; returns the table and the output length per sequence.
pub fn conv_table(batch: usize, len: usize, kernel: usize, stride: usize, pad: usize) -> (Vec<Vec<Option<usize>>>, usize) {
    let out_len = (len + 2 * pad - kernel) / stride + 1;
    let mut table = Vec::with_capacity(batch * out_len);
    for b in 0..batch {
        for o in 0..out_len {
            table.push(
                (0..kernel)
                    .map(|j| {
                        let pos = (o * stride + j) as isize - pad as isize;
                        (pos >= 0 && (pos as usize) < len).then(|| b * len + pos as usize)
                    })
                    .collect(),
            );
        }
    }
    (table, out_len)
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Unfold {
        src: Var,
        table: Vec<Vec<Option<usize>>>,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    MeanRows {
        src: Var,
        group: usize,
    },
    Attention(Box<attention::AttentionNode>),
    StraightThrough(Var),
    Mse(Var, Var),
    BceLogits {
        logits: Var,
        targets: Mat,
        pos_weight: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Mat,
        targets: Vec<Vec<usize>>,
        segments: Vec<(usize, usize)>,
        weights: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Value,
    op: Op,
}

/// Attention-matrix bookkeeping for shape audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Largest query count of any score matrix built.
    pub max_queries: usize,
    /// Largest key count of any score matrix built.
    pub max_keys: usize,
    pub matrices: usize,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    stats: AttentionStats,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph (dropout disabled).
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout_rng: None,
            stats: AttentionStats::default(),
        }
    }

    /// Training-mode graph: dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Graph {
            dropout_rng: Some(rng),
            ..Graph::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn attention_stats(&self) -> AttentionStats {
        self.stats
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// `x · W + b` with `W: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn dense(&mut self, x: Var, layer: Linear) -> Var {
        self.linear(x, layer.w, layer.b)
    }

    pub fn norm(&mut self, x: Var, ln: LayerNormParams) -> Var {
        self.layer_norm(x, ln.gamma, ln.beta)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = vec![0.0; rows];
        for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Builds each output row as the concatenation of the listed source rows
    /// (`None` contributes zeros). With one entry per row this is a row gather.
    pub fn unfold(&mut self, src: Var, table: Vec<Vec<Option<usize>>>) -> Var {
        let sv = self.value(src);
        let cols = sv.ncols();
        let k = table.first().map_or(0, |r| r.len());
        let mut value = Mat::zeros((table.len(), k * cols));
        for (r, entries) in table.iter().enumerate() {
            debug_assert_eq!(entries.len(), k);
            for (j, e) in entries.iter().enumerate() {
                if let Some(i) = e {
                    value.slice_mut(s![r, j * cols..(j + 1) * cols]).assign(&sv.row(*i));
                }
            }
        }
        self.push(value, Op::Unfold { src, table })
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        self.unfold(src, rows.iter().map(|&r| vec![Some(r)]).collect())
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.len(), rows * cols, "reshape size mismatch");
        let data: Vec<f64> = sv.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("shape checked");
        self.push(value, Op::Reshape(src))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.value(src).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { src, start })
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn mean_rows(&mut self, src: Var, group: usize) -> Var {
        let sv = self.value(src);
        let (rows, cols) = sv.dim();
        assert_eq!(rows % group, 0);
        let mut value = Mat::zeros((rows / group, cols));
        for r in 0..rows {
            let mut dst = value.row_mut(r / group);
            dst.scaled_add(1.0 / group as f64, &sv.row(r));
        }
        self.push(value, Op::MeanRows { src, group })
    }

    /// Value is `code`, gradient flows to `src` unchanged.
    pub fn straight_through(&mut self, src: Var, code: Mat) -> Var {
        assert_eq!(self.value(src).dim(), code.dim());
        self.push(code, Op::StraightThrough(src))
    }

    /// Randomly zeroes entries with probability `p` and rescales the rest;
    /// identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let dim = self.value(x).dim();
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Mat::from_shape_fn(dim, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Mean squared difference (1 × 1).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a) - self.value(b);
        let v = d.iter().map(|x| x * x).sum::<f64>() / d.len().max(1) as f64;
        self.push(Mat::from_elem((1, 1), v), Op::Mse(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), v), Op::Sum(a))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` (1 × 1),
    /// with positive cells weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat, pos_weight: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        let mut total = 0.0;
        Zip::from(lv).and(&targets).for_each(|&x, &t| {
            total += pos_weight * t * softplus(-x) + (1.0 - t) * softplus(x);
        });
        let v = total / lv.len().max(1) as f64;
        self.push(
            Mat::from_elem((1, 1), v),
            Op::BceLogits {
                logits,
                targets,
                pos_weight,
            },
        )
    }

    /// Weighted categorical negative log-likelihood over column segments.
    ///
    /// `segments[k] = (offset, size)` selects the logits of head `k`;
    /// `targets[r][k]` is the class of row `r` for head `k`. The result is
    /// `Σ_r weights[r] · Σ_k −log softmax(row r, segment k)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Vec<usize>>,
        segments: Vec<(usize, usize)>,
        weights: Vec<f64>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let mut probs = Mat::zeros(lv.dim());
        let mut total = 0.0;
        for r in 0..lv.nrows() {
            for (k, &(off, size)) in segments.iter().enumerate() {
                let row = lv.slice(s![r, off..off + size]);
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut z = 0.0;
                for (j, v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[[r, off + j]] = e;
                    z += e;
                }
                let log_z = max + z.ln();
                probs.slice_mut(s![r, off..off + size]).mapv_inplace(|e| e / z);
                let t = targets[r][k];
                assert!(t < size, "target {t} outside head of size {size}");
                total += weights[r] * (log_z - lv[[r, off + t]]);
            }
        }
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                segments,
                weights,
            },
        )
    }

    /// Gradient of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            grads: (0..self.params.len()).map(|_| None).collect(),
        };
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut out.grads[id.0], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g * *f),
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(
                        &mut grads[gamma.0],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gv;
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] / n * (n * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Unfold { src, table } => {
                    let (rows, cols) = self.value(*src).dim();
                    let mut gs = Mat::zeros((rows, cols));
                    for (r, entries) in table.iter().enumerate() {
                        for (j, e) in entries.iter().enumerate() {
                            if let Some(i) = e {
                                let mut dst = gs.row_mut(*i);
                                dst += &g.slice(s![r, j * cols..(j + 1) * cols]);
                            }
                        }
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Reshape(src) => {
                    let dim = self.value(*src).dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut grads[src.0], Mat::from_shape_vec(dim, data).expect("same size"));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SliceCols { src, start } => {
                    let mut gs = Mat::zeros(self.value(*src).dim());
                    gs.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[src.0], gs);
                }
                Op::MeanRows { src, group } => {
                    let (rows, cols) = self.value(*src).dim();
                    let mut gs = Mat::zeros((rows, cols));
                    for r in 0..rows {
                        gs.row_mut(r).scaled_add(1.0 / *group as f64, &g.row(r / group));
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Attention(node) => node.backward(self, &g, &mut grads),
                Op::StraightThrough(src) => accumulate(&mut grads[src.0], g),
                Op::Mse(a, b) => {
                    let d = self.value(*a) - self.value(*b);
                    let f = 2.0 * g[[0, 0]] / d.len().max(1) as f64;
                    let ga = d * f;
                    accumulate(&mut grads[b.0], -&ga);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let dim = self.value(*a).dim();
                    accumulate(&mut grads[a.0], Mat::from_elem(dim, g[[0, 0]]));
                }
                Op::BceLogits {
                    logits,
                    targets,
                    pos_weight,
                } => {
                    let lv = self.value(*logits);
                    let f = g[[0, 0]] / lv.len().max(1) as f64;
                    let mut gl = Mat::zeros(lv.dim());
                    Zip::from(&mut gl).and(lv).and(targets).for_each(|o, &x, &t| {
                        let s = sigmoid(x);
                        *o = ((1.0 - t) * s - pos_weight * t * (1.0 - s)) * f;
                    });
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    segments,
                    weights,
                } => {
                    let up = g[[0, 0]];
                    let mut gl = Mat::zeros(probs.dim());
                    for r in 0..probs.nrows() {
                        let w = weights[r] * up;
                        for (k, &(off, size)) in segments.iter().enumerate() {
                            for j in 0..size {
                                gl[[r, off + j]] = w * probs[[r, off + j]];
                            }
                            gl[[r, off + targets[r][k]]] -= w;
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        out
    }
}
