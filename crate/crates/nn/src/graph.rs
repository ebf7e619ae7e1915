//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built per forward pass. Every operation evaluates eagerly
//! and appends a node; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every parameter that contributed to the output.

use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Real, View, ViewMut};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a batched multi-head attention call. Queries are laid out
/// `[batch * q_len, width]`, keys/values `[batch * kv_len, width]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

/// Geometry of a 2-D convolution over `[batch * height * width, channels]`
/// feature maps (NHWC, flattened).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Value<T> {
    Owned(Matrix<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    MulConst(Var, Matrix<T>),
    Exp(Var),
    Relu(Var),
    AddPos { x: Var, pos: Var },
    Tile { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Im2Col { x: Var, geom: ConvGeom },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatSeq { parts: Vec<(Var, usize)>, batch: usize },
    SliceSeq { x: Var, seq: usize, start: usize },
    MaskedL1 { pred: Var, target: Matrix<T>, weights: Vec<T>, denom: T },
    Kl { mu: Var, logvar: Var },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    params: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient for `id`, or `None` if the parameter did not reach the output.
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient entry `(r, c)` of parameter `id`, zero when absent.
    pub fn entry(&self, id: ParamId, r: usize, c: usize) -> T {
        self.get(id).map_or(T::zero(), |g| g.get(r, c))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.all_finite())
    }

    /// Global L2 norm over every gradient tensor.
    pub fn global_norm(&self) -> T {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// `x · w + b` with `w` of shape `[in, out]` and `b` of shape `[1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        assert_eq!(i, wi, "linear: input width {i} vs weight rows {wi}");
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b);
                assert_eq!(bias.shape(), (1, o), "linear: bias shape");
                let mut data = Vec::with_capacity(n * o);
                for _ in 0..n {
                    data.extend_from_slice(bias.data());
                }
                Matrix::from_vec(n, o, data)
            }
            None => Matrix::zeros(n, o),
        };
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            n,
            i,
            o,
            T::one(),
            View::rows(self.value(x).data(), 0, i),
            View::rows(self.value(w).data(), 0, o),
            beta,
            ViewMut::rows(out.data_mut(), 0, o),
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Matrix<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), c.shape(), "mul_const: shape mismatch");
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Matrix::from_vec(vx.rows(), vx.cols(), data);
        let ng = self.needs(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let ng = self.needs(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Adds `pos` (`[period, d]`) to every consecutive block of `period` rows of `x`.
    pub fn add_pos(&mut self, x: Var, pos: Var) -> Var {
        let (vx, vp) = (self.value(x), self.value(pos));
        let (period, d) = vp.shape();
        assert_eq!(vx.cols(), d, "add_pos: width mismatch");
        assert_eq!(vx.rows() % period, 0, "add_pos: rows not a multiple of period");
        let mut out = vx.clone();
        for r in 0..vx.rows() {
            for (o, &p) in out.row_mut(r).iter_mut().zip(vp.row(r % period)) {
                *o += p;
            }
        }
        let ng = self.needs(x) || self.needs(pos);
        self.push(out, Op::AddPos { x, pos }, ng)
    }

    /// Repeats all rows of `x` `times` times (sample-major batch broadcast).
    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.len() * times);
        for _ in 0..times {
            data.extend_from_slice(vx.data());
        }
        let out = Matrix::from_vec(vx.rows() * times, vx.cols(), data);
        let ng = self.needs(x);
        self.push(out, Op::Tile { x }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, d), "layer_norm: gamma shape");
        let mut out = Matrix::zeros(n, d);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let dn = T::lit(d as f64);
        for r in 0..n {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            let o = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                o[c] = h * g.data()[c] + b.data()[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    /// `key_mask[b * kv_len + j] == true` excludes key `j` of sample `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        key_mask: Option<Vec<bool>>,
    ) -> Var {
        let AttnGeom { batch, q_len, kv_len, heads } = geom;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        assert_eq!(vq.rows(), batch * q_len, "attention: query rows");
        assert_eq!(vk.shape(), (batch * kv_len, d), "attention: key shape");
        assert_eq!(vv.shape(), (batch * kv_len, d), "attention: value shape");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        if let Some(m) = &key_mask {
            assert_eq!(m.len(), batch * kv_len, "attention: mask length");
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let block = q_len * kv_len;
        let mut probs = vec![T::zero(); batch * heads * block];
        let mut out = Matrix::zeros(batch * q_len, d);
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * block;
                let p = &mut probs[p_off..p_off + block];
                gemm(
                    q_len,
                    dh,
                    kv_len,
                    scale,
                    View { data: vq.data(), off: b * q_len * d + h * dh, rs: d, cs: 1 },
                    View { data: vk.data(), off: b * kv_len * d + h * dh, rs: 1, cs: d },
                    T::zero(),
                    ViewMut::rows(p, 0, kv_len),
                );
                for i in 0..q_len {
                    let row = &mut p[i * kv_len..(i + 1) * kv_len];
                    softmax_row(row, key_mask.as_deref().map(|m| &m[b * kv_len..(b + 1) * kv_len]));
                }
                gemm(
                    q_len,
                    kv_len,
                    dh,
                    T::one(),
                    View::rows(p, 0, kv_len),
                    View { data: vv.data(), off: b * kv_len * d + h * dh, rs: d, cs: 1 },
                    T::zero(),
                    ViewMut { data: out.data_mut(), off: b * q_len * d + h * dh, rs: d, cs: 1 },
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, geom, probs }, ng)
    }

    /// Unfolds convolution patches: `[B*H*W, C]` to `[B*Ho*Wo, k*k*C]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        assert_eq!(
            vx.shape(),
            (geom.batch * geom.height * geom.width, geom.channels),
            "im2col: input shape"
        );
        let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let mut out = Matrix::zeros(geom.batch * ho * wo, pl);
        for_each_patch(&geom, |orow, col, irow| {
            let c = geom.channels;
            out.data_mut()[orow * pl + col..orow * pl + col + c]
                .copy_from_slice(&vx.data()[irow * c..irow * c + c]);
        });
        let ng = self.needs(x);
        self.push(out, Op::Im2Col { x, geom }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut start = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols: row mismatch");
            let c = vp.cols();
            for r in 0..rows {
                out.row_mut(r)[start..start + c].copy_from_slice(vp.row(r));
            }
            start += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(vx.rows(), len);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Interleaves per-sample token blocks: part `i` holds `len_i` rows per
    /// sample; the result holds `sum(len_i)` rows per sample.
    pub fn concat_seq(&mut self, parts: &[(Var, usize)], batch: usize) -> Var {
        let d = self.shape(parts[0].0).1;
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Matrix::zeros(batch * total, d);
        for b in 0..batch {
            let mut row = b * total;
            for &(p, len) in parts {
                let vp = self.value(p);
                assert_eq!(vp.shape(), (batch * len, d), "concat_seq: part shape");
                out.data_mut()[row * d..(row + len) * d]
                    .copy_from_slice(&vp.data()[b * len * d..(b + 1) * len * d]);
                row += len;
            }
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(out, Op::ConcatSeq { parts: parts.to_vec(), batch }, ng)
    }

    /// Rows `start..start+len` of every `seq`-row sample block.
    pub fn slice_seq(&mut self, x: Var, seq: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        assert_eq!(vx.rows() % seq, 0, "slice_seq: rows not a multiple of seq");
        assert!(start + len <= seq, "slice_seq out of range");
        let batch = vx.rows() / seq;
        let mut out = Matrix::zeros(batch * len, d);
        for b in 0..batch {
            let src = (b * seq + start) * d;
            out.data_mut()[b * len * d..(b + 1) * len * d]
                .copy_from_slice(&vx.data()[src..src + len * d]);
        }
        let ng = self.needs(x);
        self.push(out, Op::SliceSeq { x, seq, start }, ng)
    }

    /// Mean absolute error over rows with nonzero weight:
    /// `sum_r w_r sum_c |pred - target| / (sum_r w_r * cols)`.
    pub fn masked_l1(&mut self, pred: Var, target: Matrix<T>, row_weights: Vec<T>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "masked_l1: shape mismatch");
        assert_eq!(row_weights.len(), vp.rows(), "masked_l1: weight length");
        let wsum: T = row_weights.iter().copied().sum();
        let denom = wsum * T::lit(vp.cols() as f64);
        let mut acc = T::zero();
        for r in 0..vp.rows() {
            let w = row_weights[r];
            if w == T::zero() {
                continue;
            }
            let s: T = vp.row(r).iter().zip(target.row(r)).map(|(&a, &b)| (a - b).abs()).sum();
            acc += w * s;
        }
        let loss = if denom > T::zero() { acc / denom } else { T::zero() };
        let ng = self.needs(pred);
        self.push(
            Matrix::scalar(loss),
            Op::MaskedL1 { pred, target, weights: row_weights, denom },
            ng,
        )
    }

    /// KL divergence to the standard normal, summed over latent dimensions
    /// and averaged over rows.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Var {
        let (vm, vl) = (self.value(mu), self.value(logvar));
        assert_eq!(vm.shape(), vl.shape(), "kl: shape mismatch");
        let half = T::lit(0.5);
        let mut acc = T::zero();
        for (&m, &l) in vm.data().iter().zip(vl.data()) {
            acc += -half * (T::one() + l - m * m - l.exp());
        }
        let loss = acc / T::lit(vm.rows().max(1) as f64);
        let ng = self.needs(mu) || self.needs(logvar);
        self.push(Matrix::scalar(loss), Op::Kl { mu, logvar }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.shape(output), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Matrix<T>>> = (0..self.store.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Value::Param(id) = node.value {
                accumulate(&mut param_grads[id.0], dy);
                continue;
            }
            self.backprop_node(Var(i), &node.op, &dy, &mut grads);
        }
        Grads { params: param_grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix<T>>], v: Var) -> &'g mut Matrix<T> {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn backprop_node(&self, y: Var, op: &Op<T>, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, i) = self.shape(*x);
                let o = self.shape(*w).1;
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let gx = self.slot(grads, *x);
                    gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        View::rows(dy.data(), 0, o),
                        View::trans(wv, 0, o),
                        T::one(),
                        ViewMut::rows(gx.data_mut(), 0, i),
                    );
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let gw = self.slot(grads, *w);
                    gemm(
                        i,
                        n,
                        o,
                        T::one(),
                        View::trans(xv, 0, i),
                        View::rows(dy.data(), 0, o),
                        T::one(),
                        ViewMut::rows(gw.data_mut(), 0, o),
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = self.slot(grads, *b);
                        for r in 0..n {
                            for (g, &d) in gb.data_mut().iter_mut().zip(dy.row(r)) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        self.slot(grads, *v).add_assign(dy);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    let g = self.slot(grads, *x);
                    for (g, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *g += *s * d;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if self.needs(*x) {
                    let g = self.slot(grads, *x);
                    for ((g, &d), &c) in g.data_mut().iter_mut().zip(dy.data()).zip(c.data()) {
                        *g += d * c;
                    }
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let yv = self.value(y).data();
                    let g = self.slot(grads, *x);
                    for ((g, &d), &e) in g.data_mut().iter_mut().zip(dy.data()).zip(yv) {
                        *g += d * e;
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let yv = self.value(y).data();
                    let g = self.slot(grads, *x);
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(dy.data()).zip(yv) {
                        if o > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::AddPos { x, pos } => {
                if self.needs(*x) {
                    self.slot(grads, *x).add_assign(dy);
                }
                if self.needs(*pos) {
                    let period = self.shape(*pos).0;
                    let gp = self.slot(grads, *pos);
                    for r in 0..dy.rows() {
                        for (g, &d) in gp.row_mut(r % period).iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Tile { x } => {
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    let n = gx.len();
                    for (k, &d) in dy.data().iter().enumerate() {
                        gx.data_mut()[k % n] += d;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = dy.shape();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = self.slot(grads, *gamma);
                    for r in 0..n {
                        for c in 0..d {
                            gg.data_mut()[c] += dy.get(r, c) * xhat[r * d + c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = self.slot(grads, *beta);
                    for r in 0..n {
                        for (g, &v) in gb.data_mut().iter_mut().zip(dy.row(r)) {
                            *g += v;
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    let dn = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let v = dy.get(r, c) * gv[c];
                            dxhat[c] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + c];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        let row = gx.row_mut(r);
                        for c in 0..d {
                            row[c] += inv_std[r] * (dxhat[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.backprop_attention(*q, *k, *v, geom, probs, dy, grads);
            }
            Op::Im2Col { x, geom } => {
                if self.needs(*x) {
                    let pl = geom.patch_len();
                    let c = geom.channels;
                    let gx = self.slot(grads, *x);
                    for_each_patch(geom, |orow, col, irow| {
                        let src = &dy.data()[orow * pl + col..orow * pl + col + c];
                        for (g, &d) in gx.data_mut()[irow * c..irow * c + c].iter_mut().zip(src) {
                            *g += d;
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for r in 0..dy.rows() {
                            for (g, &d) in gp.row_mut(r).iter_mut().zip(&dy.row(r)[start..start + c]) {
                                *g += d;
                            }
                        }
                    }
                    start += c;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let len = dy.cols();
                    let gx = self.slot(grads, *x);
                    for r in 0..dy.rows() {
                        for (g, &d) in gx.row_mut(r)[*start..*start + len].iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::ConcatSeq { parts, batch } => {
                let d = dy.cols();
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for b in 0..*batch {
                            let src = (b * total + offset) * d;
                            for (g, &v) in gp.data_mut()[b * len * d..(b + 1) * len * d]
                                .iter_mut()
                                .zip(&dy.data()[src..src + len * d])
                            {
                                *g += v;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceSeq { x, seq, start } => {
                if self.needs(*x) {
                    let d = dy.cols();
                    let len = dy.rows() / (self.shape(*x).0 / seq);
                    let batch = self.shape(*x).0 / seq;
                    let gx = self.slot(grads, *x);
                    for b in 0..batch {
                        let dst = (b * seq + start) * d;
                        for (g, &v) in gx.data_mut()[dst..dst + len * d]
                            .iter_mut()
                            .zip(&dy.data()[b * len * d..(b + 1) * len * d])
                        {
                            *g += v;
                        }
                    }
                }
            }
            Op::MaskedL1 { pred, target, weights, denom } => {
                if self.needs(*pred) && *denom > T::zero() {
                    let s = dy.item() / *denom;
                    let pv = self.value(*pred);
                    let gp = self.slot(grads, *pred);
                    for r in 0..pv.rows() {
                        let w = weights[r];
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..pv.cols() {
                            let diff = pv.get(r, c) - target.get(r, c);
                            let sign = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            gp.data_mut()[r * pv.cols() + c] += s * w * sign;
                        }
                    }
                }
            }
            Op::Kl { mu, logvar } => {
                let rows = T::lit(self.shape(*mu).0.max(1) as f64);
                let s = dy.item() / rows;
                if self.needs(*mu) {
                    let mv = self.value(*mu).data();
                    let gm = self.slot(grads, *mu);
                    for (g, &m) in gm.data_mut().iter_mut().zip(mv) {
                        *g += s * m;
                    }
                }
                if self.needs(*logvar) {
                    let lv = self.value(*logvar).data();
                    let gl = self.slot(grads, *logvar);
                    let half = T::lit(0.5);
                    for (g, &l) in gl.data_mut().iter_mut().zip(lv) {
                        *g += s * half * (l.exp() - T::one());
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeom,
        probs: &[T],
        dy: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let AttnGeom { batch, q_len, kv_len, heads } = *geom;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let block = q_len * kv_len;
        let mut gq = Matrix::zeros(batch * q_len, d);
        let mut gk = Matrix::zeros(batch * kv_len, d);
        let mut gv = Matrix::zeros(batch * kv_len, d);
        let mut dp = vec![T::zero(); block];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * block..(b * heads + h + 1) * block];
                let q_off = b * q_len * d + h * dh;
                let kv_off = b * kv_len * d + h * dh;
                // dV = P^T dO
                gemm(
                    kv_len,
                    q_len,
                    dh,
                    T::one(),
                    View::trans(p, 0, kv_len),
                    View { data: dy.data(), off: q_off, rs: d, cs: 1 },
                    T::one(),
                    ViewMut { data: gv.data_mut(), off: kv_off, rs: d, cs: 1 },
                );
                // dP = dO V^T
                gemm(
                    q_len,
                    dh,
                    kv_len,
                    T::one(),
                    View { data: dy.data(), off: q_off, rs: d, cs: 1 },
                    View { data: vv.data(), off: kv_off, rs: 1, cs: d },
                    T::zero(),
                    ViewMut::rows(&mut dp, 0, kv_len),
                );
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..q_len {
                    let pr = &p[i * kv_len..(i + 1) * kv_len];
                    let dr = &mut dp[i * kv_len..(i + 1) * kv_len];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dQ = scale * dS K ; dK = scale * dS^T Q
                gemm(
                    q_len,
                    kv_len,
                    dh,
                    scale,
                    View::rows(&dp, 0, kv_len),
                    View { data: vk.data(), off: kv_off, rs: d, cs: 1 },
                    T::one(),
                    ViewMut { data: gq.data_mut(), off: q_off, rs: d, cs: 1 },
                );
                gemm(
                    kv_len,
                    q_len,
                    dh,
                    scale,
                    View::trans(&dp, 0, kv_len),
                    View { data: vq.data(), off: q_off, rs: d, cs: 1 },
                    T::one(),
                    ViewMut { data: gk.data_mut(), off: kv_off, rs: d, cs: 1 },
                );
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                self.slot(grads, var).add_assign(&g);
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Softmax in place; masked entries get probability zero. A row with every
/// key masked becomes all zeros.
fn softmax_row<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    let masked = |j: usize| mask.is_some_and(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if !masked(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if masked(j) { T::zero() } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Calls `f(out_row, col_offset, in_row)` for every in-bounds tap.
fn for_each_patch(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    for b in 0..geom.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = (b * ho + oy) * wo + ox;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let irow = (b * geom.height + iy as usize) * geom.width + ix as usize;
                        f(orow, (ky * geom.kernel + kx) * geom.channels, irow);
                    }
                }
            }
        }
    }
}
