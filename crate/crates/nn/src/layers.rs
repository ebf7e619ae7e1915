//! Parameterised building blocks. Each layer owns only [`ParamId`]s; the
//! values live in a [`ParamStore`] and forward passes run on a [`Graph`].

use rand::Rng;

use crate::graph::{AttnGeom, ConvGeom, Graph, Var};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(d_in)` init for weight and bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), d_in, d_out, bound, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, d_out, bound, rng);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, d, T::one()));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, d));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, T::lit(1e-5))
    }
}

/// Perceptron with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i != last {
                x = g.relu(x);
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        xkv: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let geom = AttnGeom { batch, q_len, kv_len, heads: self.heads };
        let a = g.attention(q, k, v, geom, key_mask);
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), &[d, ff, d], rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        batch: usize,
        len: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, batch, len, len, key_mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Pre-norm transformer decoder block: self-attention over the queries,
/// cross-attention into `memory`, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: Mlp,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), &[d, ff, d], rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        memory: Var,
        batch: usize,
        q_len: usize,
        mem_len: usize,
    ) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, batch, q_len, q_len, None);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, batch, q_len, mem_len, None);
        let x = g.add(x, c);
        let h = self.ln3.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Square-kernel convolution followed by ReLU, via patch unfolding.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::new(store, name, kernel * kernel * c_in, c_out, rng);
        ConvBlock { lin, kernel, stride, pad }
    }

    /// Returns the activation and its spatial size `(h, w)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let geom = ConvGeom {
            batch,
            height,
            width,
            channels: self.lin.d_in / (self.kernel * self.kernel),
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = g.im2col(x, geom);
        let y = self.lin.forward(g, cols);
        (g.relu(y), geom.out_height(), geom.out_width())
    }

    pub fn out_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.pad - self.kernel) / self.stride + 1,
            (width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}
