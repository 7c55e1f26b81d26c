//! Matrix-level reverse-mode differentiation.
//!
//! Every node holds a 2-D array. Sequence ops (attention, convolution,
//! recurrence) treat the rows as `batch * seq` positions, sample-major.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Var = usize;

const RMS_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + b` where row `i` of `a` gets row `i % b.nrows()` of `b`.
    AddTiled(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    /// Per sample: `na` rows of `a` followed by `nb` rows of `b`.
    Interleave {
        a: Var,
        b: Var,
        na: usize,
        nb: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    /// Depthwise causal convolution; row `j` of `w` multiplies the input `j` steps back.
    Conv {
        x: Var,
        w: Var,
        seq: usize,
    },
    /// Gated outer-product recurrence; `states` holds every `S_t`.
    Recurrence {
        q: Var,
        k: Var,
        v: Var,
        a: Var,
        heads: usize,
        seq: usize,
        states: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0.get_mut(v).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    /// Softmax probabilities saved by an attention node, laid out `[b][h][i][j]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let period = bv.nrows();
        assert!(
            period > 0 && self.value(a).nrows() % period == 0,
            "add_tiled: row counts"
        );
        let mut v = self.value(a).clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            row += &bv.row(i % period);
        }
        self.push(v, Op::AddTiled(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// `x / rms(x) * gain`, row-wise; `gain` is `1 x d`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let g = self.value(gain).row(0).to_owned();
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.nrows());
        for mut row in out.axis_iter_mut(Axis(0)) {
            let inv = 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt();
            inv_rms.push(inv);
            Zip::from(&mut row).and(&g).for_each(|r, &g| *r *= inv * g);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn interleave(&mut self, a: Var, b: Var, na: usize, nb: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let batch = av.nrows() / na.max(1);
        assert_eq!(av.nrows(), batch * na, "interleave: rows of a");
        assert_eq!(bv.nrows(), batch * nb, "interleave: rows of b");
        let seq = na + nb;
        let mut out = Array2::zeros((batch * seq, av.ncols()));
        for s in 0..batch {
            out.slice_mut(s![s * seq..s * seq + na, ..])
                .assign(&av.slice(s![s * na..(s + 1) * na, ..]));
            out.slice_mut(s![s * seq + na..(s + 1) * seq, ..])
                .assign(&bv.slice(s![s * nb..(s + 1) * nb, ..]));
        }
        self.push(out, Op::Interleave { a, b, na, nb }, &[a, b])
    }

    /// Causal multi-head softmax attention with scale `1/sqrt(dh)`. Keys with
    /// `key_mask[j] == false` are hidden; a query with no visible key outputs zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert!(rows % seq == 0 && d % heads == 0, "attention: shapes");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), seq, "attention: key mask length");
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let rs = s![b * seq..(b + 1) * seq, h * dh..(h + 1) * dh];
                let qh = qv.slice(rs);
                let kh = kv.slice(rs);
                let vh = vv.slice(rs);
                let scores = qh.dot(&kh.t());
                let base = (b * heads + h) * seq * seq;
                let mut p = Array2::<f64>::zeros((seq, seq));
                for i in 0..seq {
                    let visible = |j: usize| key_mask.is_none_or(|m| m[j]);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if visible(j) {
                            max = max.max(scores[[i, j]] * scale);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        if visible(j) {
                            let e = (scores[[i, j]] * scale - max).exp();
                            p[[i, j]] = e;
                            z += e;
                        }
                    }
                    for j in 0..=i {
                        p[[i, j]] /= z;
                        probs[base + i * seq + j] = p[[i, j]];
                    }
                }
                out.slice_mut(rs).assign(&p.dot(&vh));
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn causal_conv(&mut self, x: Var, w: Var, seq: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let rows = xv.nrows();
        assert!(
            rows % seq == 0 && wv.ncols() == xv.ncols(),
            "causal_conv: shapes"
        );
        let mut out = Array2::zeros(xv.dim());
        for b in 0..rows / seq {
            for t in 0..seq {
                let mut o = out.row_mut(b * seq + t);
                for j in 0..wv.nrows().min(t + 1) {
                    Zip::from(&mut o)
                        .and(&wv.row(j))
                        .and(&xv.row(b * seq + t - j))
                        .for_each(|o, &w, &x| *o += w * x);
                }
            }
        }
        self.push(out, Op::Conv { x, w, seq }, &[x, w])
    }

    /// `S_t = a_t S_{t-1} + v_t k_t^T`, `y_t = S_t q_t / sqrt(dh)` per head,
    /// with `a` holding one decay per (position, head).
    pub fn recurrence(&mut self, q: Var, k: Var, v: Var, a: Var, heads: usize, seq: usize) -> Var {
        let (qv, kv, vv, av) = (self.value(q), self.value(k), self.value(v), self.value(a));
        let (rows, d) = qv.dim();
        assert!(
            rows % seq == 0 && d % heads == 0 && av.dim() == (rows, heads),
            "recurrence: shapes"
        );
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq;
        let mut out = Array2::zeros((rows, d));
        let mut states = vec![0.0; batch * heads * seq * dh * dh];
        let mut state = vec![0.0; dh * dh];
        for b in 0..batch {
            for h in 0..heads {
                state.iter_mut().for_each(|x| *x = 0.0);
                for t in 0..seq {
                    let r = b * seq + t;
                    let decay = av[[r, h]];
                    let (qr, kr, vr) = (qv.row(r), kv.row(r), vv.row(r));
                    for i in 0..dh {
                        let vi = vr[h * dh + i];
                        let mut acc = 0.0;
                        for j in 0..dh {
                            let sij = decay * state[i * dh + j] + vi * kr[h * dh + j];
                            state[i * dh + j] = sij;
                            acc += sij * qr[h * dh + j];
                        }
                        out[[r, h * dh + i]] = acc * scale;
                    }
                    let off = ((b * heads + h) * seq + t) * dh * dh;
                    states[off..off + dh * dh].copy_from_slice(&state);
                }
            }
        }
        self.push(
            out,
            Op::Recurrence {
                q,
                k,
                v,
                a,
                heads,
                seq,
                states,
            },
            &[q, k, v, a],
        )
    }

    /// Propagates the seed gradients back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(
                g.dim(),
                self.nodes[v].value.dim(),
                "seed shape for node {v}"
            );
            top = top.max(v + 1);
            accumulate(&mut grads, v, g);
        }
        for id in (0..top).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    fn backprop_node(&self, id: Var, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.wants(b) {
                    accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::AddTiled(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let period = self.value(b).nrows();
                    let mut gb = Array2::zeros(self.value(b).dim());
                    for (i, row) in g.axis_iter(Axis(0)).enumerate() {
                        let mut t = gb.row_mut(i % period);
                        t += &row;
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g * self.value(b));
                }
                if self.wants(b) {
                    accumulate(grads, b, g * self.value(a));
                }
            }
            &Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= y * (1.0 - y));
                accumulate(grads, a, ga);
            }
            &Op::Silu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(a)).for_each(|g, &x| {
                    let s = sigmoid(x);
                    *g *= s * (1.0 + x * (1.0 - s));
                });
                accumulate(grads, a, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => self.backprop_rms(*x, *gain, inv_rms, g, grads),
            Op::Gather { table, ids } => {
                let mut gt = Array2::zeros(self.value(*table).dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &g.row(i);
                }
                accumulate(grads, *table, gt);
            }
            &Op::Interleave { a, b, na, nb } => {
                let seq = na + nb;
                let batch = g.nrows() / seq;
                let d = g.ncols();
                if self.wants(a) {
                    let mut ga = Array2::zeros((batch * na, d));
                    for s in 0..batch {
                        ga.slice_mut(s![s * na..(s + 1) * na, ..])
                            .assign(&g.slice(s![s * seq..s * seq + na, ..]));
                    }
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = Array2::zeros((batch * nb, d));
                    for s in 0..batch {
                        gb.slice_mut(s![s * nb..(s + 1) * nb, ..])
                            .assign(&g.slice(s![s * seq + na..(s + 1) * seq, ..]));
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => self.backprop_attention([*q, *k, *v], *heads, *seq, probs, g, grads),
            &Op::Conv { x, w, seq } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let batch = xv.nrows() / seq;
                let mut gx = Array2::zeros(xv.dim());
                let mut gw = Array2::zeros(wv.dim());
                for b in 0..batch {
                    for t in 0..seq {
                        let go = g.row(b * seq + t);
                        for j in 0..wv.nrows().min(t + 1) {
                            let src = b * seq + t - j;
                            Zip::from(gx.row_mut(src))
                                .and(&wv.row(j))
                                .and(&go)
                                .for_each(|gx, &w, &go| *gx += w * go);
                            Zip::from(gw.row_mut(j))
                                .and(&xv.row(src))
                                .and(&go)
                                .for_each(|gw, &x, &go| *gw += x * go);
                        }
                    }
                }
                if self.wants(x) {
                    accumulate(grads, x, gx);
                }
                if self.wants(w) {
                    accumulate(grads, w, gw);
                }
            }
            Op::Recurrence {
                q,
                k,
                v,
                a,
                heads,
                seq,
                states,
            } => self.backprop_recurrence([*q, *k, *v, *a], *heads, *seq, states, g, grads),
        }
    }

    fn backprop_rms(
        &self,
        x: Var,
        gain: Var,
        inv_rms: &[f64],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let xv = self.value(x);
        let gn = self.value(gain).row(0);
        let d = xv.ncols() as f64;
        if self.wants(x) {
            let mut gx = Array2::zeros(xv.dim());
            for (r, mut out) in gx.axis_iter_mut(Axis(0)).enumerate() {
                let inv = inv_rms[r];
                let (xr, gr) = (xv.row(r), g.row(r));
                // y = x * inv * gain;  dy/dx = inv * gain - x * inv^3 * (x . (gain * g)) / d
                let dot: f64 = xr.iter().zip(gr).zip(gn).map(|((x, g), w)| x * g * w).sum();
                let c = inv * inv * inv * dot / d;
                Zip::from(&mut out)
                    .and(&xr)
                    .and(&gr)
                    .and(&gn)
                    .for_each(|o, &x, &g, &w| *o = inv * w * g - c * x);
            }
            accumulate(grads, x, gx);
        }
        if self.wants(gain) {
            let mut gg = Array2::zeros((1, xv.ncols()));
            for (r, (xr, gr)) in xv.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))).enumerate() {
                let inv = inv_rms[r];
                Zip::from(gg.row_mut(0))
                    .and(&xr)
                    .and(&gr)
                    .for_each(|o, &x, &g| *o += x * inv * g);
            }
            accumulate(grads, gain, gg);
        }
    }

    fn backprop_attention(
        &self,
        [q, k, v]: [Var; 3],
        heads: usize,
        seq: usize,
        probs: &[f64],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Array2::zeros((rows, d));
        let mut gk = Array2::zeros((rows, d));
        let mut gv = Array2::zeros((rows, d));
        for b in 0..rows / seq {
            for h in 0..heads {
                let rs = s![b * seq..(b + 1) * seq, h * dh..(h + 1) * dh];
                let base = (b * heads + h) * seq * seq;
                let p = ArrayView2::from_shape((seq, seq), &probs[base..base + seq * seq]).unwrap();
                let go = g.slice(rs);
                gv.slice_mut(rs).assign(&p.t().dot(&go));
                let dp = go.dot(&vv.slice(rs).t());
                let mut ds = Array2::<f64>::zeros((seq, seq));
                for i in 0..seq {
                    let dot: f64 = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                    }
                }
                gq.slice_mut(rs).assign(&ds.dot(&kv.slice(rs)));
                gk.slice_mut(rs).assign(&ds.t().dot(&qv.slice(rs)));
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                accumulate(grads, var, grad);
            }
        }
    }

    fn backprop_recurrence(
        &self,
        [q, k, v, a]: [Var; 4],
        heads: usize,
        seq: usize,
        states: &[f64],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let (qv, kv, vv, av) = (self.value(q), self.value(k), self.value(v), self.value(a));
        let (rows, d) = qv.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Array2::zeros((rows, d));
        let mut gk = Array2::zeros((rows, d));
        let mut gv = Array2::zeros((rows, d));
        let mut ga = Array2::zeros((rows, heads));
        // carry = a_{t+1} * dL/dS_{t+1} propagated into S_t
        let mut carry = vec![0.0; dh * dh];
        for b in 0..rows / seq {
            for h in 0..heads {
                carry.iter_mut().for_each(|x| *x = 0.0);
                for t in (0..seq).rev() {
                    let r = b * seq + t;
                    let off = ((b * heads + h) * seq + t) * dh * dh;
                    let st = &states[off..off + dh * dh];
                    let (qr, kr, vr, gr) = (qv.row(r), kv.row(r), vv.row(r), g.row(r));
                    // G = carry + scale * dy q^T
                    for i in 0..dh {
                        let gy = gr[h * dh + i] * scale;
                        for j in 0..dh {
                            carry[i * dh + j] += gy * qr[h * dh + j];
                        }
                    }
                    for j in 0..dh {
                        let mut acc = 0.0;
                        for i in 0..dh {
                            acc += st[i * dh + j] * gr[h * dh + i];
                        }
                        gq[[r, h * dh + j]] = acc * scale;
                    }
                    for i in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..dh {
                            acc += carry[i * dh + j] * kr[h * dh + j];
                        }
                        gv[[r, h * dh + i]] = acc;
                    }
                    for j in 0..dh {
                        let mut acc = 0.0;
                        for i in 0..dh {
                            acc += carry[i * dh + j] * vr[h * dh + i];
                        }
                        gk[[r, h * dh + j]] = acc;
                    }
                    if t > 0 {
                        let prev = &states[off - dh * dh..off];
                        ga[[r, h]] = carry.iter().zip(prev).map(|(c, s)| c * s).sum();
                    }
                    let decay = av[[r, h]];
                    carry.iter_mut().for_each(|c| *c *= decay);
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv), (a, ga)] {
            if self.wants(var) {
                accumulate(grads, var, grad);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0) * scale)
    }

    /// Builds a graph from leaf values and returns (tape, leaves, output).
    type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

    /// Loss = sum(out * probe); compares tape gradients of every leaf with central differences.
    fn check(leaves: Vec<Array2<f64>>, build: &Build, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = run(&leaves);
        let probe = random(
            &mut rng,
            tape.value(out).nrows(),
            tape.value(out).ncols(),
            1.0,
        );
        let grads = tape.backward(vec![(out, probe.clone())]);
        let loss = |vals: &[Array2<f64>]| {
            let (t, _, o) = run(vals);
            (t.value(o) * &probe).sum()
        };
        let h = 1e-6;
        for (li, &var) in vars.iter().enumerate() {
            let analytic = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(leaves[li].dim()));
            for idx in 0..leaves[li].len() {
                let (r, c) = (idx / leaves[li].ncols(), idx % leaves[li].ncols());
                let mut plus = leaves.clone();
                plus[li][[r, c]] += h;
                let mut minus = leaves.clone();
                minus[li][[r, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = analytic[[r, c]];
                let tol = 1e-6 * (1.0 + fd.abs().max(an.abs()));
                assert!(
                    (fd - an).abs() <= tol,
                    "leaf {li} [{r},{c}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            random(&mut rng, 4, 3, 1.0),
            random(&mut rng, 3, 5, 1.0),
            random(&mut rng, 1, 5, 1.0),
        ];
        check(
            leaves,
            &|t, v| {
                let m = t.matmul(v[0], v[1]);
                let a = t.add_tiled(m, v[2]);
                let s = t.sigmoid(a);
                let u = t.silu(m);
                let p = t.mul(s, u);
                t.add(p, a)
            },
            2,
        );
    }

    #[test]
    fn norm_gather_interleave_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            random(&mut rng, 4, 3, 1.0),
            random(&mut rng, 5, 3, 1.0),
            random(&mut rng, 1, 3, 1.0),
            random(&mut rng, 5, 3, 1.0),
        ];
        check(
            leaves,
            &|t, v| {
                let e = t.gather(v[1], &[4, 0, 4, 2, 1, 0]);
                let x = t.interleave(v[0], e, 2, 3);
                let x = t.add_tiled(x, v[3]);
                t.rms_norm(x, v[2])
            },
            4,
        );
    }

    #[test]
    fn attention_grads_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves: Vec<_> = (0..3).map(|_| random(&mut rng, 8, 4, 1.5)).collect();
        check(
            leaves.clone(),
            &|t, v| t.attention(v[0], v[1], v[2], 2, 4, None),
            6,
        );
        check(
            leaves,
            &|t, v| t.attention(v[0], v[1], v[2], 2, 4, Some(&[false, true, false, true])),
            7,
        );
    }

    #[test]
    fn conv_and_recurrence_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 10, 4, 1.0);
        let w = random(&mut rng, 4, 4, 1.0);
        check(vec![x, w], &|t, v| t.causal_conv(v[0], v[1], 5), 9);

        let leaves = vec![
            random(&mut rng, 10, 4, 1.0),
            random(&mut rng, 10, 4, 1.0),
            random(&mut rng, 10, 4, 1.0),
            random(&mut rng, 10, 2, 2.0),
        ];
        check(
            leaves,
            &|t, v| {
                let a = t.sigmoid(v[3]);
                t.recurrence(v[0], v[1], v[2], a, 2, 5)
            },
            10,
        );
    }

    #[test]
    fn masked_query_without_keys_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::ones((3, 2)), false);
        let o = tape.attention(x, x, x, 1, 3, Some(&[false, true, true]));
        assert_eq!(tape.value(o).row(0).sum(), 0.0);
        assert!((tape.value(o).row(1).sum() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::ones((2, 2)), false);
        let b = tape.leaf(Array2::ones((2, 2)), true);
        let c = tape.matmul(a, b);
        let grads = tape.backward(vec![(c, Array2::ones((2, 2)))]);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &Array2::from_elem((2, 2), 2.0));
    }
}
