use ndarray::{s, Axis};

use super::{accumulate, Graph, Mat, Op, ParamId, Var};

/// One independent attention problem: the listed query rows attend to the
/// listed key/value rows. Positions drive the causal mask and relative bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    pub query_pos: Vec<i64>,
    pub key_pos: Vec<i64>,
}

impl AttentionGroup {
    /// Rows are their own positions, in order.
    pub fn sequential(queries: Vec<usize>, keys: Vec<usize>) -> Self {
        let query_pos = (0..queries.len() as i64).collect();
        let key_pos = (0..keys.len() as i64).collect();
        AttentionGroup {
            queries,
            keys,
            query_pos,
            key_pos,
        }
    }
}

/// Multi-head scaled dot-product attention over a set of row groups.
///
/// Query rows that belong to no group produce zeros. With `causal`, a query
/// may only see keys whose position is not after its own. The optional bias
/// parameter (`heads × (2·max_distance + 1)`) adds a learned scalar per head
/// and clipped relative distance `key_pos − query_pos`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    pub max_distance: usize,
    pub groups: Vec<AttentionGroup>,
}

pub(super) struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    spec: AttentionSpec,
    probs: Vec<Mat>,
}

impl AttentionSpec {
    fn bucket(&self, qp: i64, kp: i64) -> usize {
        let m = self.max_distance as i64;
        ((kp - qp).clamp(-m, m) + m) as usize
    }

    fn masked(&self, qp: i64, kp: i64) -> bool {
        self.causal && kp > qp
    }
}

impl Graph<'_> {
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<ParamId>, spec: AttentionSpec) -> Var {
        let bias = bias.map(|b| self.param(b));
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        assert_eq!(d % spec.heads, 0, "model width must divide into heads");
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias_v = bias.map(|b| self.value(b));
        if let Some(b) = bias_v {
            assert_eq!(b.dim(), (spec.heads, 2 * spec.max_distance + 1));
        }
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(spec.groups.len() * spec.heads);
        let mut stats = self.stats;
        for group in &spec.groups {
            let qg = qv.select(Axis(0), &group.queries);
            let kg = kv.select(Axis(0), &group.keys);
            let vg = vv.select(Axis(0), &group.keys);
            stats.max_queries = stats.max_queries.max(group.queries.len());
            stats.max_keys = stats.max_keys.max(group.keys.len());
            stats.matrices += spec.heads;
            for h in 0..spec.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = qg.slice(cols).dot(&kg.slice(cols).t()) * scale;
                for (i, &qp) in group.query_pos.iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, &kp) in group.key_pos.iter().enumerate() {
                        if spec.masked(qp, kp) {
                            scores[[i, j]] = f64::NEG_INFINITY;
                            continue;
                        }
                        if let Some(b) = bias_v {
                            scores[[i, j]] += b[[h, spec.bucket(qp, kp)]];
                        }
                        max = max.max(scores[[i, j]]);
                    }
                    let mut z = 0.0;
                    for j in 0..group.keys.len() {
                        let e = if scores[[i, j]] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[[i, j]] - max).exp()
                        };
                        scores[[i, j]] = e;
                        z += e;
                    }
                    if z > 0.0 {
                        scores.row_mut(i).mapv_inplace(|e| e / z);
                    }
                }
                let o = scores.dot(&vg.slice(cols));
                for (i, &r) in group.queries.iter().enumerate() {
                    out.slice_mut(s![r, h * dh..(h + 1) * dh]).assign(&o.row(i));
                }
                probs.push(scores);
            }
        }
        self.stats = stats;
        let node = AttentionNode {
            q,
            k,
            v,
            bias,
            spec,
            probs,
        };
        self.push(out, Op::Attention(Box::new(node)))
    }
}

impl AttentionNode {
    pub(super) fn backward(&self, graph: &Graph<'_>, g: &Mat, grads: &mut [Option<Mat>]) {
        let qv = graph.value(self.q);
        let kv = graph.value(self.k);
        let vv = graph.value(self.v);
        let d = qv.ncols();
        let heads = self.spec.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        let mut dbias = self.bias.map(|b| Mat::zeros(graph.value(b).dim()));
        for (gi, group) in self.spec.groups.iter().enumerate() {
            let qg = qv.select(Axis(0), &group.queries);
            let kg = kv.select(Axis(0), &group.keys);
            let vg = vv.select(Axis(0), &group.keys);
            let dout = g.select(Axis(0), &group.queries);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &self.probs[gi * heads + h];
                let do_h = dout.slice(cols);
                let dp = do_h.dot(&vg.slice(cols).t());
                let dvg = p.t().dot(&do_h);
                let mut ds = p * &dp;
                for i in 0..ds.nrows() {
                    let row_sum: f64 = ds.row(i).sum();
                    for j in 0..ds.ncols() {
                        ds[[i, j]] -= p[[i, j]] * row_sum;
                    }
                }
                if let Some(db) = dbias.as_mut() {
                    for (i, &qp) in group.query_pos.iter().enumerate() {
                        for (j, &kp) in group.key_pos.iter().enumerate() {
                            if !self.spec.masked(qp, kp) {
                                db[[h, self.spec.bucket(qp, kp)]] += ds[[i, j]];
                            }
                        }
                    }
                }
                let dqg = ds.dot(&kg.slice(cols)) * scale;
                let dkg = ds.t().dot(&qg.slice(cols)) * scale;
                for (i, &r) in group.queries.iter().enumerate() {
                    let mut dst = dq.slice_mut(s![r, h * dh..(h + 1) * dh]);
                    dst += &dqg.row(i);
                }
                for (j, &r) in group.keys.iter().enumerate() {
                    let mut dst = dk.slice_mut(s![r, h * dh..(h + 1) * dh]);
                    dst += &dkg.row(j);
                    let mut dst = dv.slice_mut(s![r, h * dh..(h + 1) * dh]);
                    dst += &dvg.row(j);
                }
            }
        }
        accumulate(&mut grads[self.q.0], dq);
        accumulate(&mut grads[self.k.0], dk);
        accumulate(&mut grads[self.v.0], dv);
        if let (Some(b), Some(db)) = (self.bias, dbias) {
            accumulate(&mut grads[b.0], db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gradient_check, ParamStore};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(causal: bool) -> AttentionSpec {
        AttentionSpec {
            heads: 2,
            causal,
            max_distance: 2,
            groups: vec![
                AttentionGroup::sequential(vec![0, 1, 2], vec![0, 1, 2]),
                AttentionGroup {
                    queries: vec![3, 4],
                    keys: vec![4, 3, 0],
                    query_pos: vec![0, 1],
                    key_pos: vec![1, 0, 2],
                },
            ],
        }
    }

    #[test]
    fn causal_first_row_copies_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.normal("x", 5, 4, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let out = g.attention(xv, xv, xv, None, spec(true));
        let o = g.value(out);
        assert_eq!(o.row(0), store.get(x).row(0));
        let stats = g.attention_stats();
        assert_eq!((stats.max_queries, stats.max_keys, stats.matrices), (3, 3, 4));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for causal in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let q = store.normal("q", 5, 4, 1.0, &mut rng);
            let k = store.normal("k", 5, 4, 1.0, &mut rng);
            let v = store.normal("v", 5, 4, 1.0, &mut rng);
            let b = store.normal("b", 2, 5, 0.5, &mut rng);
            let w = store.normal("w", 5, 4, 1.0, &mut rng);
            let report = gradient_check(
                &mut store,
                |store, want| {
                    let mut g = Graph::new(store);
                    let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
                    let o = g.attention(qv, kv, vv, Some(b), spec(causal));
                    let wv = g.param(w);
                    let y = g.mul(o, wv);
                    let loss = g.sum(y);
                    (g.scalar(loss), want.then(|| g.backward(loss)))
                },
                1e-5,
                usize::MAX,
                2,
            );
            assert!(report.max_rel_error < 1e-6, "causal={causal}: {report:?}");
        }
    }
}
