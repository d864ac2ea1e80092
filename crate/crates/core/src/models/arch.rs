//! Per-kind parameter layout and forward pass.

use super::encoders::{lag_input, web_input, PriceEncoder, TextEncoder, WebEncoder};
use super::{input_tensor, Forward, ForwardOptions, ModelConfig, ModelInput, ModelKind, Result};
use crate::tensor::nn::{Ctx, LayerNorm, Linear, Lstm, Mlp, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use rand::RngCore;

#[derive(Debug, Clone)]
pub(super) enum Arch {
    Gated(Box<Gated>),
    PriceTx(Box<PriceTx>),
    TextOnly(Box<TextOnly>),
    PriceWeb(Box<PriceWeb>),
    EarlyFusion(Box<EarlyFusion>),
    BiLstm(Box<BiLstm>),
    MulT(Box<MulT>),
    Tfn(Box<Tfn>),
}

impl Arch {
    pub fn build(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(match c.kind {
            k if k.is_gated() => Arch::Gated(Box::new(Gated::new(c, s, rng)?)),
            ModelKind::PriceTxS => Arch::PriceTx(Box::new(PriceTx::new(c, s, rng)?)),
            ModelKind::TextOnly => Arch::TextOnly(Box::new(TextOnly::new(c, s, rng))),
            ModelKind::PriceWeb => Arch::PriceWeb(Box::new(PriceWeb::new(c, s, rng)?)),
            ModelKind::EarlyFusion => Arch::EarlyFusion(Box::new(EarlyFusion::new(c, s, rng))),
            ModelKind::BiLstmFusion => Arch::BiLstm(Box::new(BiLstm::new(c, s, rng))),
            ModelKind::MulTLite => Arch::MulT(Box::new(MulT::new(c, s, rng)?)),
            ModelKind::Tfn => Arch::Tfn(Box::new(Tfn::new(c, s, rng)?)),
            _ => unreachable!("gated kinds handled above"),
        })
    }

    pub fn head_input_width(&self) -> usize {
        match self {
            Arch::Gated(m) => m.head.fc1.fan_in,
            Arch::PriceTx(m) => m.head.fc1.fan_in,
            Arch::TextOnly(m) => m.head.fc1.fan_in,
            Arch::PriceWeb(m) => m.head.fc1.fan_in,
            Arch::EarlyFusion(m) => m.head.fc1.fan_in,
            Arch::BiLstm(m) => m.head.fc1.fan_in,
            Arch::MulT(m) => m.head.fc1.fan_in,
            Arch::Tfn(m) => m.head.fc1.fan_in,
        }
    }

    pub fn forward(&self, c: &ModelConfig, cx: &mut Ctx, x: &ModelInput, opts: ForwardOptions) -> Result<Forward> {
        match self {
            Arch::Gated(m) => m.forward(c, cx, x, opts),
            Arch::PriceTx(m) => m.forward(cx, x),
            Arch::TextOnly(m) => m.forward(cx, x),
            Arch::PriceWeb(m) => m.forward(cx, x),
            Arch::EarlyFusion(m) => m.forward(c, cx, x),
            Arch::BiLstm(m) => m.forward(c, cx, x),
            Arch::MulT(m) => m.forward(cx, x),
            Arch::Tfn(m) => m.forward(cx, x),
        }
    }
}

fn plain(logit: Var, taps: Vec<(&'static str, Var)>) -> Forward {
    Forward {
        logit,
        gate: None,
        attention: None,
        taps,
    }
}

#[derive(Debug, Clone)]
enum GateKind {
    /// Learned gate over the joint context, one value per channel.
    Mlp { fc1: Linear, fc2: Linear },
    /// `exp(−λ·τ/60)`.
    Fixed { lambda: f64 },
    /// `σ(a·τ/60 + b)` with learned scalars.
    Learned { a: ParamId, b: ParamId },
    /// Full context inside the cut-off, none beyond it.
    Hard { cut: f64 },
}

/// Price-grounded text attention with a gate on the grounded context.
#[derive(Debug, Clone)]
pub(super) struct Gated {
    price: PriceEncoder,
    text: TextEncoder,
    web: WebEncoder,
    cross: MultiHeadAttention,
    ln_c: LayerNorm,
    gate: GateKind,
    ln_head: LayerNorm,
    head: Mlp,
}

impl Gated {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        let price = PriceEncoder::new(s, c, rng)?;
        let text = TextEncoder::new(s, c, rng);
        let web = WebEncoder::new(s, c, false, rng);
        let cross = MultiHeadAttention::new(s, "cross", c.d, c.heads, rng)?;
        let ln_c = LayerNorm::new(s, "cross.ln", c.d);
        let gate = match c.kind {
            ModelKind::Cgcma => GateKind::Mlp {
                fc1: Linear::new(s, "gate.fc1", 3 * c.d + c.d_w + 1, c.gate_hidden, rng),
                fc2: Linear::new(s, "gate.fc2", c.gate_hidden, c.d, rng),
            },
            ModelKind::FixedDecay => GateKind::Fixed { lambda: c.lambda },
            ModelKind::LearnedDecay => GateKind::Learned {
                a: s.add("decay.a", Tensor::scalar(-1.0)),
                b: s.add("decay.b", Tensor::scalar(1.0)),
            },
            ModelKind::HardFilter => GateKind::Hard { cut: c.tau_cut },
            k => unreachable!("{k} is not gated"),
        };
        let width = c.d + c.d_w;
        Ok(Self {
            price,
            text,
            web,
            cross,
            ln_c,
            gate,
            ln_head: LayerNorm::new(s, "head.ln", width),
            head: Mlp::new(s, "head", width, 2 * width, 1, rng),
        })
    }

    fn forward(&self, c: &ModelConfig, cx: &mut Ctx, x: &ModelInput, opts: ForwardOptions) -> Result<Forward> {
        let p = self.price.forward(cx, x.window)?;
        let h_t = self.text.forward(cx, x.embedding)?;
        let h_w = self.web.forward(cx, x.web, x.tau)?;
        let grounded = self.cross.forward(cx, h_t, p.tokens, p.tokens)?;
        let h_c = if opts.zero_context {
            cx.graph.constant(Tensor::zeros(&[1, c.d]))
        } else {
            self.ln_c.forward(cx, grounded.out)?
        };

        let g = match (opts.gate_override, &self.gate) {
            (Some(v), _) => cx.graph.constant(Tensor::full(&[1, c.d], v)),
            (None, GateKind::Mlp { fc1, fc2 }) => {
                let lag = lag_input(cx, x.tau)?;
                let z = cx.graph.concat_cols(&[p.summary, h_c, h_t, h_w, lag])?;
                let z = fc1.forward(cx, z)?;
                let z = cx.graph.gelu(z)?;
                let z = fc2.forward(cx, z)?;
                cx.graph.sigmoid(z)?
            }
            (None, GateKind::Fixed { lambda }) => {
                cx.graph.constant(Tensor::scalar((-lambda * x.tau / 60.0).exp()))
            }
            (None, GateKind::Learned { a, b }) => {
                let (a, b) = (cx.p(*a), cx.p(*b));
                let lag = lag_input(cx, x.tau)?;
                let z = cx.graph.mul(a, lag)?;
                let z = cx.graph.add(z, b)?;
                cx.graph.sigmoid(z)?
            }
            (None, GateKind::Hard { cut }) => {
                let open = if x.tau <= *cut { 1.0 } else { 0.0 };
                cx.graph.constant(Tensor::scalar(open))
            }
        };
        let gated = if cx.graph.value(g).numel() == 1 {
            cx.graph.mul_scalar(h_c, g)?
        } else {
            cx.graph.mul(g, h_c)?
        };
        let h_f = cx.graph.add(p.summary, gated)?;
        let z = cx.graph.concat_cols(&[h_f, h_w])?;
        let z = self.ln_head.forward(cx, z)?;
        let logit = self.head.forward(cx, z)?;
        Ok(Forward {
            logit,
            gate: Some(g),
            attention: Some(grounded.attn),
            taps: vec![("h_p", p.summary), ("h_t", h_t), ("h_w", h_w), ("h_c", h_c), ("h_f", h_f)],
        })
    }
}

/// Price transformer alone.
#[derive(Debug, Clone)]
pub(super) struct PriceTx {
    price: PriceEncoder,
    head: Mlp,
}

impl PriceTx {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Self {
            price: PriceEncoder::new(s, c, rng)?,
            head: Mlp::new(s, "head", c.d + 1, 2 * c.d, 1, rng),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let p = self.price.forward(cx, x.window)?;
        let lag = lag_input(cx, x.tau)?;
        let z = cx.graph.concat_cols(&[p.summary, lag])?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("h_p", p.summary)]))
    }
}

/// Text embedding alone.
#[derive(Debug, Clone)]
pub(super) struct TextOnly {
    text: TextEncoder,
    head: Mlp,
}

impl TextOnly {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Self {
        Self {
            text: TextEncoder::new(s, c, rng),
            head: Mlp::new(s, "head", c.d + 1, 2 * c.d, 1, rng),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let h_t = self.text.forward(cx, x.embedding)?;
        let lag = lag_input(cx, x.tau)?;
        let z = cx.graph.concat_cols(&[h_t, lag])?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("h_t", h_t)]))
    }
}

/// Price transformer plus web scalars, no text.
#[derive(Debug, Clone)]
pub(super) struct PriceWeb {
    price: PriceEncoder,
    web: WebEncoder,
    ln_head: LayerNorm,
    head: Mlp,
}

impl PriceWeb {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        let width = c.d + c.d_w;
        Ok(Self {
            price: PriceEncoder::new(s, c, rng)?,
            web: WebEncoder::new(s, c, true, rng),
            ln_head: LayerNorm::new(s, "head.ln", width),
            head: Mlp::new(s, "head", width, 2 * width, 1, rng),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let p = self.price.forward(cx, x.window)?;
        let h_w = self.web.forward(cx, x.web, x.tau)?;
        let z = cx.graph.concat_cols(&[p.summary, h_w])?;
        let z = self.ln_head.forward(cx, z)?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("h_p", p.summary), ("h_w", h_w)]))
    }
}

/// Raw concatenation of pooled price features, embedding and web scalars.
#[derive(Debug, Clone)]
pub(super) struct EarlyFusion {
    head: Mlp,
}

impl EarlyFusion {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Self {
        let width = 2 * c.price_features + c.embed_dim + c.web_dim + 1;
        Self {
            head: Mlp::new(s, "head", width, 2 * c.d, 1, rng),
        }
    }

    fn forward(&self, c: &ModelConfig, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let w = cx.graph.input(input_tensor(x.window, c.lookback, c.price_features)?);
        let mean = cx.graph.mean_rows(w)?;
        let last = cx.graph.slice_rows(w, c.lookback - 1, c.lookback)?;
        let e = cx.graph.input(input_tensor(x.embedding, 1, c.embed_dim)?);
        let web = web_input(cx, x.web, x.tau, true)?;
        let z = cx.graph.concat_cols(&[mean, last, e, web])?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("z", z)]))
    }
}

/// Bidirectional LSTM over prices, concatenated with text and web codes.
#[derive(Debug, Clone)]
pub(super) struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
    text: TextEncoder,
    web: WebEncoder,
    ln_head: LayerNorm,
    head: Mlp,
}

impl BiLstm {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Self {
        let width = 2 * c.lstm_hidden + c.d + c.d_w;
        Self {
            fwd: Lstm::new(s, "lstm.fwd", c.price_features, c.lstm_hidden, rng),
            bwd: Lstm::new(s, "lstm.bwd", c.price_features, c.lstm_hidden, rng),
            text: TextEncoder::new(s, c, rng),
            web: WebEncoder::new(s, c, true, rng),
            ln_head: LayerNorm::new(s, "head.ln", width),
            head: Mlp::new(s, "head", width, 2 * c.d, 1, rng),
        }
    }

    fn forward(&self, c: &ModelConfig, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let w = cx.graph.input(input_tensor(x.window, c.lookback, c.price_features)?);
        let hf = self.fwd.forward(cx, w, false)?;
        let hb = self.bwd.forward(cx, w, true)?;
        let h_t = self.text.forward(cx, x.embedding)?;
        let h_w = self.web.forward(cx, x.web, x.tau)?;
        let z = cx.graph.concat_cols(&[hf, hb, h_t, h_w])?;
        let z = self.ln_head.forward(cx, z)?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("h_t", h_t), ("h_w", h_w)]))
    }
}

/// Two-way cross-modal attention between price tokens and the
/// (text, web) token pair, mean-pooled on both sides.
#[derive(Debug, Clone)]
pub(super) struct MulT {
    price: PriceEncoder,
    text: TextEncoder,
    web_proj: Linear,
    t2p: MultiHeadAttention,
    p2t: MultiHeadAttention,
    ln_t: LayerNorm,
    ln_p: LayerNorm,
    head: Mlp,
}

impl MulT {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Self {
            price: PriceEncoder::new(s, c, rng)?,
            text: TextEncoder::new(s, c, rng),
            web_proj: Linear::new(s, "web.proj", c.web_dim + 1, c.d, rng),
            t2p: MultiHeadAttention::new(s, "t2p", c.d, c.heads, rng)?,
            p2t: MultiHeadAttention::new(s, "p2t", c.d, c.heads, rng)?,
            ln_t: LayerNorm::new(s, "t2p.ln", c.d),
            ln_p: LayerNorm::new(s, "p2t.ln", c.d),
            head: Mlp::new(s, "head", 2 * c.d, 2 * c.d, 1, rng),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let p = self.price.forward(cx, x.window)?;
        let h_t = self.text.forward(cx, x.embedding)?;
        let web = web_input(cx, x.web, x.tau, true)?;
        let w = self.web_proj.forward(cx, web)?;
        let side = cx.graph.concat_rows(&[h_t, w])?;

        let a = self.t2p.forward(cx, side, p.tokens, p.tokens)?;
        let t = cx.graph.add(side, a.out)?;
        let t = self.ln_t.forward(cx, t)?;
        let t = cx.graph.mean_rows(t)?;

        let b = self.p2t.forward(cx, p.tokens, side, side)?;
        let q = cx.graph.add(p.tokens, b.out)?;
        let q = self.ln_p.forward(cx, q)?;
        let q = cx.graph.mean_rows(q)?;

        let z = cx.graph.concat_cols(&[t, q])?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("h_t", h_t)]))
    }
}

/// Tensor fusion: outer product of `[h_p; 1]` and `[h_t; h_w; 1]`.
#[derive(Debug, Clone)]
pub(super) struct Tfn {
    price: PriceEncoder,
    text: TextEncoder,
    web: WebEncoder,
    head: Mlp,
}

impl Tfn {
    fn new(c: &ModelConfig, s: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        let width = (c.d + 1) * (c.d + c.d_w + 1);
        Ok(Self {
            price: PriceEncoder::new(s, c, rng)?,
            text: TextEncoder::new(s, c, rng),
            web: WebEncoder::new(s, c, true, rng),
            head: Mlp::new(s, "head", width, c.gate_hidden, 1, rng),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: &ModelInput) -> Result<Forward> {
        let p = self.price.forward(cx, x.window)?;
        let h_t = self.text.forward(cx, x.embedding)?;
        let h_w = self.web.forward(cx, x.web, x.tau)?;
        let one = cx.graph.constant(Tensor::scalar(1.0));
        let a = cx.graph.concat_cols(&[p.summary, one])?;
        let b = cx.graph.concat_cols(&[h_t, h_w, one])?;
        let z = cx.graph.outer(a, b)?;
        let logit = self.head.forward(cx, z)?;
        Ok(plain(logit, vec![("h_p", p.summary), ("h_t", h_t), ("h_w", h_w), ("fused", z)]))
    }
}
