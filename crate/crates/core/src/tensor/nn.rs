//! Parameterised building blocks on top of [`Graph`].
//!
//! Linear maps are initialised uniform(±1/√fan_in); positional and CLS
//! embeddings use normal(0, 0.02); layer-norm gains start at one.

use super::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

/// Everything a forward pass needs besides the layer definitions.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub store: &'a ParamStore,
    pub training: bool,
    pub dropout: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, training: bool, dropout: f64, rng: &'a mut dyn RngCore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            training,
            dropout,
            rng,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        let (rate, training) = (self.dropout, self.training);
        self.graph.dropout(x, rate, training, &mut *self.rng)
    }
}

pub fn uniform_tensor(rng: &mut dyn RngCore, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

pub fn normal_tensor(rng: &mut dyn RngCore, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_tensor(rng, &[fan_in, fan_out], bound));
        let b = store.add(format!("{name}.b"), uniform_tensor(rng, &[1, fan_out], bound));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.graph.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d]));
        Self { gain, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        cx.graph.layer_norm(x, g, b)
    }
}

/// Two-layer GELU MLP with dropout on the hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.gelu(h)?;
        let h = cx.drop(h)?;
        self.fc2.forward(cx, h)
    }
}

/// Multi-head attention with separate bias-free `d×d` projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

/// Output of [`MultiHeadAttention::forward`]: the projected result and the
/// attention node (whose weights can be read back from the graph).
pub struct AttentionOut {
    pub out: Var,
    pub attn: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut mk = |suffix: &str| store.add(format!("{name}.{suffix}"), uniform_tensor(rng, &[d, d], bound));
        Ok(Self {
            wq: mk("wq"),
            wk: mk("wk"),
            wv: mk("wv"),
            wo: mk("wo"),
            heads,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, query: Var, keys: Var, values: Var) -> Result<AttentionOut> {
        let (wq, wk, wv, wo) = (cx.p(self.wq), cx.p(self.wk), cx.p(self.wv), cx.p(self.wo));
        let q = cx.graph.matmul(query, wq)?;
        let k = cx.graph.matmul(keys, wk)?;
        let v = cx.graph.matmul(values, wv)?;
        let attn = cx.graph.attention(q, k, v, self.heads)?;
        let out = cx.graph.matmul(attn, wo)?;
        Ok(AttentionOut { out, attn })
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, d, rng),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, h, h)?.out;
        let a = cx.drop(a)?;
        let x = cx.graph.add(x, a)?;
        let h = self.ln2.forward(cx, x)?;
        let m = self.mlp.forward(cx, h)?;
        let m = cx.drop(m)?;
        cx.graph.add(x, m)
    }
}

/// Single-direction LSTM; gate order is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        let bx = 1.0 / (d_in as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let wx = store.add(format!("{name}.wx"), uniform_tensor(rng, &[d_in, 4 * hidden], bx));
        let wh = store.add(format!("{name}.wh"), uniform_tensor(rng, &[hidden, 4 * hidden], bh));
        let b = store.add(format!("{name}.b"), uniform_tensor(rng, &[1, 4 * hidden], bh));
        Self { wx, wh, b, hidden }
    }

    /// Run over the rows of `x` (forwards, or backwards when `reverse`) and
    /// return the final hidden state `[1 × hidden]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, reverse: bool) -> Result<Var> {
        let (wx, wh, b) = (cx.p(self.wx), cx.p(self.wh), cx.p(self.b));
        let steps = cx.graph.value(x).rows();
        let xw = cx.graph.linear(x, wx, b)?;
        let h = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let mut z = cx.graph.slice_rows(xw, t, t + 1)?;
            if let Some((hp, _)) = state {
                let rec = cx.graph.matmul(hp, wh)?;
                z = cx.graph.add(z, rec)?;
            }
            let i = cx.graph.slice_cols(z, 0, h)?;
            let i = cx.graph.sigmoid(i)?;
            let f = cx.graph.slice_cols(z, h, 2 * h)?;
            let f = cx.graph.sigmoid(f)?;
            let gg = cx.graph.slice_cols(z, 2 * h, 3 * h)?;
            let gg = cx.graph.tanh(gg)?;
            let o = cx.graph.slice_cols(z, 3 * h, 4 * h)?;
            let o = cx.graph.sigmoid(o)?;
            let ig = cx.graph.mul(i, gg)?;
            let c = match state {
                Some((_, cp)) => {
                    let fc = cx.graph.mul(f, cp)?;
                    cx.graph.add(fc, ig)?
                }
                None => ig,
            };
            let tc = cx.graph.tanh(c)?;
            let hn = cx.graph.mul(o, tc)?;
            state = Some((hn, c));
        }
        Ok(state.expect("at least one step").0)
    }
}
