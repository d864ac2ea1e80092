//! Modality encoders shared by the gated model and the baselines.

use super::{input_tensor, ModelConfig, Result};
use crate::tensor::nn::{normal_tensor, Ctx, EncoderLayer, LayerNorm, Linear, Mlp};
use crate::tensor::{ParamId, ParamStore, Var};
use rand::RngCore;

/// Transformer over the price window with a learned summary token.
#[derive(Debug, Clone)]
pub(super) struct PriceEncoder {
    proj: Linear,
    pos: ParamId,
    cls: ParamId,
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
    lookback: usize,
    features: usize,
}

pub(super) struct PriceCodes {
    /// Summary row `[1 × d]`.
    pub summary: Var,
    /// Per-bar states `[L × d]`.
    pub tokens: Var,
}

impl PriceEncoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let proj = Linear::new(store, "price.proj", c.price_features, c.d, rng);
        let pos = store.add("price.pos", normal_tensor(rng, &[c.lookback, c.d], 0.02));
        let cls = store.add("price.cls", normal_tensor(rng, &[1, c.d], 0.02));
        let layers = (0..c.layers)
            .map(|i| EncoderLayer::new(store, &format!("price.layer{i}"), c.d, c.heads, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let ln = LayerNorm::new(store, "price.ln", c.d);
        Ok(Self {
            proj,
            pos,
            cls,
            layers,
            ln,
            lookback: c.lookback,
            features: c.price_features,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, window: &[f64]) -> Result<PriceCodes> {
        let x = cx.graph.input(input_tensor(window, self.lookback, self.features)?);
        let e = self.proj.forward(cx, x)?;
        let pos = cx.p(self.pos);
        let e = cx.graph.add(e, pos)?;
        let cls = cx.p(self.cls);
        let mut z = cx.graph.concat_rows(&[cls, e])?;
        z = cx.drop(z)?;
        for layer in &self.layers {
            z = layer.forward(cx, z)?;
        }
        let z = self.ln.forward(cx, z)?;
        Ok(PriceCodes {
            summary: cx.graph.slice_rows(z, 0, 1)?,
            tokens: cx.graph.slice_rows(z, 1, self.lookback + 1)?,
        })
    }
}

/// Projection of the frozen sentence embedding into model width.
#[derive(Debug, Clone)]
pub(super) struct TextEncoder {
    proj: Linear,
    ln: LayerNorm,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        Self {
            proj: Linear::new(store, "text.proj", c.embed_dim, c.d, rng),
            ln: LayerNorm::new(store, "text.ln", c.d),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, embedding: &[f64]) -> Result<Var> {
        let x = cx.graph.input(input_tensor(embedding, 1, embedding.len())?);
        let h = self.proj.forward(cx, x)?;
        Ok(self.ln.forward(cx, h)?)
    }
}

/// Small MLP over the web scalars, optionally with the lag appended.
#[derive(Debug, Clone)]
pub(super) struct WebEncoder {
    mlp: Mlp,
    with_lag: bool,
}

impl WebEncoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, with_lag: bool, rng: &mut dyn RngCore) -> Self {
        let d_in = c.web_dim + usize::from(with_lag);
        Self {
            mlp: Mlp::new(store, "web", d_in, c.gate_hidden, c.d_w, rng),
            with_lag,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, web: &[f64], tau: f64) -> Result<Var> {
        let x = web_input(cx, web, tau, self.with_lag)?;
        Ok(self.mlp.forward(cx, x)?)
    }
}

/// `[web]` or `[web; τ/60]` as a row input.
pub(super) fn web_input(cx: &mut Ctx, web: &[f64], tau: f64, with_lag: bool) -> Result<Var> {
    let mut v = web.to_vec();
    if with_lag {
        v.push(tau / 60.0);
    }
    let n = v.len();
    Ok(cx.graph.input(input_tensor(&v, 1, n)?))
}

pub(super) fn lag_input(cx: &mut Ctx, tau: f64) -> Result<Var> {
    Ok(cx.graph.input(input_tensor(&[tau / 60.0], 1, 1)?))
}
