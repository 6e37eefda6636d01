//! Minimal reverse-mode tape over 2-D row-major tensors.
//!
//! The operator set is fixed to what the encoder-decoder needs: embedding
//! gather, addition, affine maps, layer norm, ReLU, multi-head attention and
//! dropout. Parameters are not copied into the tape; leaf nodes point into
//! the flat parameter vector, and their gradients land in a flat buffer with
//! the same layout.

use rand::Rng;

use super::scalar::{gemm, Scalar, View, ViewMut};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<F> {
    Owned(Vec<F>),
    Param(usize),
}

enum Op<F> {
    Leaf,
    Embed { table: NodeId, ids: Vec<u32> },
    AddRows { x: NodeId, rows_of: NodeId },
    Add(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    LinearT { x: NodeId, w: NodeId },
    LayerNorm { x: NodeId, g: NodeId, b: NodeId, xhat: Vec<F>, rstd: Vec<F> },
    Relu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<F> },
    Dropout { x: NodeId, mask: Vec<F> },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Value<F>,
    op: Op<F>,
}

pub struct Graph<'p, F: Scalar> {
    params: &'p [F],
    nodes: Vec<Node<F>>,
}

fn slot<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    pgrads: &'a mut [F],
    id: NodeId,
) -> &'a mut [F] {
    let n = &nodes[id.0];
    let len = n.rows * n.cols;
    match n.value {
        Value::Param(off) => &mut pgrads[off..off + len],
        Value::Owned(_) => grads[id.0].get_or_insert_with(|| vec![F::zero(); len]),
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p [F]) -> Self {
        Graph { params, nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        let n = &self.nodes[id.0];
        match &n.value {
            Value::Owned(v) => v,
            Value::Param(off) => &self.params[*off..*off + n.rows * n.cols],
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value: Value::Owned(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> NodeId {
        assert!(offset + rows * cols <= self.params.len());
        self.nodes.push(Node { rows, cols, value: Value::Param(offset), op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Rows `ids` of `table`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (vocab, d) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < vocab, "embedding id out of range");
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(ids.len(), d, out, Op::Embed { table, ids: ids.to_vec() })
    }

    /// `x + rows_of[..x.rows]`, used for position tables.
    pub fn add_rows(&mut self, x: NodeId, rows_of: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let (m, d2) = self.shape(rows_of);
        assert!(n <= m && d == d2);
        let out = self.value(x).iter().zip(self.value(rows_of)).map(|(&a, &b)| a + b).collect();
        self.push(n, d, out, Op::AddRows { x, rows_of })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let (n, d) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(n, d, out, Op::Add(a, b))
    }

    /// `x · w + b` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (n, i) = self.shape(x);
        let (i2, o) = self.shape(w);
        assert_eq!(i, i2);
        let mut out = match b {
            Some(b) => {
                assert_eq!(self.shape(b), (1, o));
                self.value(b).repeat(n)
            }
            None => vec![F::zero(); n * o],
        };
        gemm(
            F::one(),
            View::new(self.value(x), n, i),
            View::new(self.value(w), i, o),
            F::one(),
            ViewMut::new(&mut out, n, o),
        );
        self.push(n, o, out, Op::Linear { x, w, b })
    }

    /// `x · wᵀ` with `w` stored `[out, in]` (tied output projection).
    pub fn linear_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (n, i) = self.shape(x);
        let (o, i2) = self.shape(w);
        assert_eq!(i, i2);
        let mut out = vec![F::zero(); n * o];
        gemm(
            F::one(),
            View::new(self.value(x), n, i),
            View::new(self.value(w), o, i).t(),
            F::zero(),
            ViewMut::new(&mut out, n, o),
        );
        self.push(n, o, out, Op::LinearT { x, w })
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let xs = self.value(x);
        let (gs, bs) = (self.value(g), self.value(b));
        let eps = F::of(LN_EPS);
        let inv_d = F::one() / F::of(d as f64);
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xs.chunks_exact(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * gs[j] + bs[j]);
            }
        }
        self.push(n, d, out, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Which inputs of every ReLU node are positive, in node order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.value(x).iter().map(|&v| v > F::zero()));
            }
        }
        out
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        self.push(n, d, out, Op::Relu(x))
    }

    /// Scaled dot-product attention over `heads` column blocks. Queries
    /// `[n, d]`, keys and values `[m, d]`. With `causal`, query `i` sees
    /// keys `0..=i` only.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        assert_eq!(self.shape(v), (m, d));
        assert_eq!(d, dk);
        assert!(d % heads == 0);
        assert!(!causal || n <= m);
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut probs = vec![F::zero(); heads * n * m];
        let mut out = vec![F::zero(); n * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                scale,
                View::new(qv, n, d).cols(h * dh, dh),
                View::new(kv, m, d).cols(h * dh, dh).t(),
                F::zero(),
                ViewMut::new(p, n, m),
            );
            for (i, row) in p.chunks_exact_mut(m).enumerate() {
                let visible = if causal { i + 1 } else { m };
                softmax_prefix(row, visible);
            }
            gemm(
                F::one(),
                View::new(p, n, m),
                View::new(vv, m, d).cols(h * dh, dh),
                F::zero(),
                ViewMut::new(&mut out, n, d).cols(h * dh, dh),
            );
        }
        self.push(n, d, out, Op::Attention { q, k, v, heads, probs })
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let (n, d) = self.shape(x);
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..n * d).map(|_| if rng.gen_bool(p) { F::zero() } else { keep }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        self.push(n, d, out, Op::Dropout { x, mask })
    }

    /// Backpropagate `root_grad` (same shape as `root`) through the tape,
    /// accumulating parameter gradients into `pgrads`.
    pub fn backward(&self, root: NodeId, root_grad: Vec<F>, pgrads: &mut [F]) {
        assert_eq!(pgrads.len(), self.params.len());
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(root_grad.len(), self.value(root).len());
        grads[root.0] = Some(root_grad);
        let nodes = &self.nodes;

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let (n, d) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Embed { table, ids } => {
                    let t = slot(nodes, &mut grads, pgrads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut t[id as usize * d..(id as usize + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                }
                Op::AddRows { x, rows_of } => {
                    add_into(slot(nodes, &mut grads, pgrads, *x), &g);
                    add_into(&mut slot(nodes, &mut grads, pgrads, *rows_of)[..n * d], &g);
                }
                Op::Add(a, b) => {
                    add_into(slot(nodes, &mut grads, pgrads, *a), &g);
                    add_into(slot(nodes, &mut grads, pgrads, *b), &g);
                }
                Op::Linear { x, w, b } => {
                    let (_, inp) = self.shape(*x);
                    if let Some(b) = b {
                        let gb = slot(nodes, &mut grads, pgrads, *b);
                        for row in g.chunks_exact(d) {
                            add_into(gb, row);
                        }
                    }
                    let gw = slot(nodes, &mut grads, pgrads, *w);
                    gemm(
                        F::one(),
                        View::new(self.value(*x), n, inp).t(),
                        View::new(&g, n, d),
                        F::one(),
                        ViewMut::new(gw, inp, d),
                    );
                    let gx = slot(nodes, &mut grads, pgrads, *x);
                    gemm(
                        F::one(),
                        View::new(&g, n, d),
                        View::new(self.value(*w), inp, d).t(),
                        F::one(),
                        ViewMut::new(gx, n, inp),
                    );
                }
                Op::LinearT { x, w } => {
                    let (_, inp) = self.shape(*x);
                    let gw = slot(nodes, &mut grads, pgrads, *w);
                    gemm(
                        F::one(),
                        View::new(&g, n, d).t(),
                        View::new(self.value(*x), n, inp),
                        F::one(),
                        ViewMut::new(gw, d, inp),
                    );
                    let gx = slot(nodes, &mut grads, pgrads, *x);
                    gemm(
                        F::one(),
                        View::new(&g, n, d),
                        View::new(self.value(*w), d, inp),
                        F::one(),
                        ViewMut::new(gx, n, inp),
                    );
                }
                Op::LayerNorm { x, g: gamma, b: beta, xhat, rstd } => {
                    let gamma_v = self.value(*gamma);
                    {
                        let gg = slot(nodes, &mut grads, pgrads, *gamma);
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let gb = slot(nodes, &mut grads, pgrads, *beta);
                        for row in g.chunks_exact(d) {
                            add_into(gb, row);
                        }
                    }
                    let inv_d = F::one() / F::of(d as f64);
                    let gx = slot(nodes, &mut grads, pgrads, *x);
                    for r in 0..n {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = F::zero();
                        let mut mean_dhh = F::zero();
                        for j in 0..d {
                            let dh = grow[j] * gamma_v[j];
                            mean_dh += dh;
                            mean_dhh += dh * hrow[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dhh = mean_dhh * inv_d;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gamma_v[j];
                            dst[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = slot(nodes, &mut grads, pgrads, *x);
                    for j in 0..g.len() {
                        if xv[j] > F::zero() {
                            gx[j] += g[j];
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = slot(nodes, &mut grads, pgrads, *x);
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (m, _) = self.shape(*k);
                    let dh = d / heads;
                    let scale = F::one() / F::of(dh as f64).sqrt();
                    let mut dp = vec![F::zero(); n * m];
                    for h in 0..*heads {
                        let p = &probs[h * n * m..(h + 1) * n * m];
                        let go = View::new(&g, n, d).cols(h * dh, dh);
                        gemm(
                            F::one(),
                            go,
                            View::new(self.value(*v), m, d).cols(h * dh, dh).t(),
                            F::zero(),
                            ViewMut::new(&mut dp, n, m),
                        );
                        {
                            let gv = slot(nodes, &mut grads, pgrads, *v);
                            gemm(
                                F::one(),
                                View::new(p, n, m).t(),
                                go,
                                F::one(),
                                ViewMut::new(gv, m, d).cols(h * dh, dh),
                            );
                        }
                        // dS = P ⊙ (dP - rowsum(dP ⊙ P)); masked entries have P = 0.
                        for (prow, drow) in p.chunks_exact(m).zip(dp.chunks_exact_mut(m)) {
                            let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        {
                            let gq = slot(nodes, &mut grads, pgrads, *q);
                            gemm(
                                scale,
                                View::new(&dp, n, m),
                                View::new(self.value(*k), m, d).cols(h * dh, dh),
                                F::one(),
                                ViewMut::new(gq, n, d).cols(h * dh, dh),
                            );
                        }
                        {
                            let gk = slot(nodes, &mut grads, pgrads, *k);
                            gemm(
                                scale,
                                View::new(&dp, n, m).t(),
                                View::new(self.value(*q), n, d).cols(h * dh, dh),
                                F::one(),
                                ViewMut::new(gk, m, d).cols(h * dh, dh),
                            );
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// In-place softmax over `row[..visible]`; the rest is zeroed.
pub(crate) fn softmax_prefix<F: Scalar>(row: &mut [F], visible: usize) {
    let max = row[..visible].iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row[..visible].iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    for x in row[..visible].iter_mut() {
        *x = *x * inv;
    }
    for x in row[visible..].iter_mut() {
        *x = F::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of one scalar objective `sum(out ⊙ w)`.
    fn check<B>(params: &[f64], build: B)
    where
        B: Fn(&mut Graph<'_, f64>) -> NodeId,
    {
        let weights = |len: usize| -> Vec<f64> { (0..len).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect() };
        let objective = |p: &[f64]| -> f64 {
            let mut g = Graph::new(p);
            let out = build(&mut g);
            let w = weights(g.value(out).len());
            g.value(out).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new(params);
        let out = build(&mut g);
        let w = weights(g.value(out).len());
        let mut grads = vec![0.0; params.len()];
        g.backward(out, w, &mut grads);
        let h = 1e-5;
        let mut p = params.to_vec();
        for i in 0..params.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = objective(&p);
            p[i] = orig - h;
            let down = objective(&p);
            p[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grads[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: analytic {} vs fd {fd}",
                grads[i]
            );
        }
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_relu_layer_norm_gradients() {
        // x [3,4] | w [4,5] | b [1,5] | gamma [1,5] | beta [1,5]
        let params = random(12 + 20 + 5 + 5 + 5, 1);
        check(&params, |g| {
            let x = g.param(0, 3, 4);
            let w = g.param(12, 4, 5);
            let b = g.param(32, 1, 5);
            let y = g.linear(x, w, Some(b));
            let y = g.relu(y);
            let ga = g.param(37, 1, 5);
            let be = g.param(42, 1, 5);
            g.layer_norm(y, ga, be)
        });
    }

    #[test]
    fn embedding_tied_projection_and_rows() {
        // table [6,4] | pos [5,4]
        let params = random(24 + 20, 2);
        check(&params, |g| {
            let t = g.param(0, 6, 4);
            let pos = g.param(24, 5, 4);
            let e = g.embed(t, &[1, 3, 1]);
            let e = g.add_rows(e, pos);
            let e2 = g.add(e, e);
            g.linear_t(e2, t)
        });
    }

    #[test]
    fn attention_gradients_causal_and_cross() {
        // x [4,6] | y [3,6] | wq, wk, wv [6,6]
        let params = random(24 + 18 + 3 * 36, 3);
        for causal in [false, true] {
            check(&params, |g| {
                let x = g.param(0, 4, 6);
                let wq = g.param(42, 6, 6);
                let wk = g.param(78, 6, 6);
                let wv = g.param(114, 6, 6);
                let q = g.linear(x, wq, None);
                let k = g.linear(x, wk, None);
                let v = g.linear(x, wv, None);
                g.attention(q, k, v, 2, causal)
            });
        }
        check(&params, |g| {
            let x = g.param(0, 4, 6);
            let y = g.param(24, 3, 6);
            let wq = g.param(42, 6, 6);
            let wk = g.param(78, 6, 6);
            let wv = g.param(114, 6, 6);
            let q = g.linear(y, wq, None);
            let k = g.linear(x, wk, None);
            let v = g.linear(x, wv, None);
            g.attention(q, k, v, 3, false)
        });
    }

    #[test]
    fn dropout_gradient_uses_mask() {
        let params = random(12, 4);
        let mut g = Graph::new(&params);
        let x = g.param(0, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = g.dropout(x, 0.5, &mut rng);
        let out = g.value(y).to_vec();
        let mut grads = vec![0.0; 12];
        g.backward(y, vec![1.0; 12], &mut grads);
        for i in 0..12 {
            if out[i] == 0.0 {
                assert_eq!(grads[i], 0.0);
            } else {
                assert!((grads[i] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_prefix_masks_tail() {
        let mut row = vec![1.0f64, 2.0, 3.0, 100.0];
        softmax_prefix(&mut row, 3);
        assert_eq!(row[3], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
