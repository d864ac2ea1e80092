//! The gated cross-modal model, its lag controls and the baseline zoo,
//! all behind one forward interface.
//!
//! Every model sees the same per-sample input: an `L × 16` price window,
//! the 384-dim text embedding, the normalised web scalars and the lag in
//! minutes. Baselines receive the lag as an extra web feature `τ/60`.

mod arch;
mod checkpoint;
mod encoders;

pub use checkpoint::{Checkpoint, NamedTensor};

use crate::tensor::nn::Ctx;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use arch::Arch;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    PriceTxS,
    TextOnly,
    PriceWeb,
    EarlyFusion,
    BiLstmFusion,
    MulTLite,
    Tfn,
    Cgcma,
    FixedDecay,
    LearnedDecay,
    HardFilter,
}

impl ModelKind {
    pub const ALL: [ModelKind; 11] = [
        ModelKind::PriceTxS,
        ModelKind::TextOnly,
        ModelKind::PriceWeb,
        ModelKind::EarlyFusion,
        ModelKind::BiLstmFusion,
        ModelKind::MulTLite,
        ModelKind::Tfn,
        ModelKind::Cgcma,
        ModelKind::FixedDecay,
        ModelKind::LearnedDecay,
        ModelKind::HardFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PriceTxS => "price_tx",
            ModelKind::TextOnly => "text_only",
            ModelKind::PriceWeb => "price_web",
            ModelKind::EarlyFusion => "early_fusion",
            ModelKind::BiLstmFusion => "bilstm",
            ModelKind::MulTLite => "mult",
            ModelKind::Tfn => "tfn",
            ModelKind::Cgcma => "cgcma",
            ModelKind::FixedDecay => "fixed_decay",
            ModelKind::LearnedDecay => "learned_decay",
            ModelKind::HardFilter => "hard_filter",
        }
    }

    /// Kinds that share the grounding path and differ only in the gate.
    pub fn is_gated(self) -> bool {
        matches!(
            self,
            ModelKind::Cgcma | ModelKind::FixedDecay | ModelKind::LearnedDecay | ModelKind::HardFilter
        )
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, ModelKind::PriceTxS | ModelKind::PriceWeb)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "price_tx_s" | "pricetx_s" | "pricetxs" => "price_tx",
            "bilstm_fusion" => "bilstm",
            "mult_lite" => "mult",
            other => other,
        };
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub gate_hidden: usize,
    pub d_w: usize,
    /// Decay rate per hour for the fixed-decay control.
    pub lambda: f64,
    /// Inclusive lag cut-off (minutes) for the hard filter.
    pub tau_cut: f64,
    pub lookback: usize,
    pub price_features: usize,
    pub embed_dim: usize,
    pub web_dim: usize,
    /// Per-direction hidden size of the BiLSTM baseline.
    pub lstm_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cgcma,
            d: 32,
            heads: 4,
            layers: 2,
            dropout: 0.3,
            gate_hidden: 32,
            d_w: 16,
            lambda: 1.0,
            tau_cut: 60.0,
            lookback: 64,
            price_features: 16,
            embed_dim: 384,
            web_dim: 13,
            lstm_hidden: 48,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.d_w * 2 != self.gate_hidden || self.d_w == 0 {
            return bad(format!(
                "d_w ({}) must be half the gate hidden width ({})",
                self.d_w, self.gate_hidden
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("decay rate {} must be non-negative", self.lambda));
        }
        if self.layers == 0 || self.lookback == 0 || self.price_features == 0 {
            return bad("layers, lookback and price_features must be positive".into());
        }
        if self.embed_dim == 0 || self.web_dim == 0 || self.lstm_hidden == 0 {
            return bad("embedding, web and lstm widths must be positive".into());
        }
        Ok(())
    }
}

/// One sample as the models consume it.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// `lookback × price_features`, row-major.
    pub window: &'a [f64],
    pub embedding: &'a [f64],
    /// Normalised web scalars.
    pub web: &'a [f64],
    /// Lag in minutes.
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    /// Replace the gate with this constant (gated kinds only).
    pub gate_override: Option<f64>,
    /// Zero the grounded context before gating and fusion.
    pub zero_context: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logit: f64,
    pub probability: f64,
    pub gate_mean: Option<f64>,
    pub gate: Option<Vec<f64>>,
    /// Cross-attention weights over the price tokens, averaged over heads.
    pub attention: Option<Vec<f64>>,
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub logit: Var,
    pub gate: Option<Var>,
    pub attention: Option<Var>,
    /// Named intermediates for inspection (`h_p`, `h_c`, `h_f`, ...).
    pub taps: Vec<(&'static str, Var)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    arch: Arch,
}

impl Model {
    /// Build with parameters initialised from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let arch = Arch::build(&config, &mut store, &mut rng)?;
        Ok(Self { config, store, arch })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Width of the prediction head's input.
    pub fn head_input_width(&self) -> usize {
        self.arch.head_input_width()
    }

    fn check_input(&self, x: &ModelInput) -> Result<()> {
        let c = &self.config;
        let want = c.lookback * c.price_features;
        if x.window.len() != want {
            return Err(ModelError::Input(format!(
                "price window has {} values, expected {} ({}×{})",
                x.window.len(),
                want,
                c.lookback,
                c.price_features
            )));
        }
        if x.embedding.len() != c.embed_dim {
            return Err(ModelError::Input(format!(
                "embedding has length {}, expected {}",
                x.embedding.len(),
                c.embed_dim
            )));
        }
        if x.web.len() != c.web_dim {
            return Err(ModelError::Input(format!(
                "web vector has length {}, expected {}",
                x.web.len(),
                c.web_dim
            )));
        }
        if !(x.tau >= 0.0 && x.tau.is_finite()) {
            return Err(ModelError::Input(format!("lag {} must be finite and non-negative", x.tau)));
        }
        Ok(())
    }

    /// Record the forward pass on `cx.graph`.
    pub fn forward(&self, cx: &mut Ctx, x: &ModelInput, opts: ForwardOptions) -> Result<Forward> {
        self.check_input(x)?;
        self.arch.forward(&self.config, cx, x, opts)
    }

    /// Inference (or a stochastic training-mode pass when `opts.training`).
    pub fn predict(&self, x: &ModelInput, opts: ForwardOptions, rng: &mut dyn RngCore) -> Result<ForwardOutput> {
        let mut cx = Ctx::new(&self.store, opts.training, self.config.dropout, rng);
        let f = self.forward(&mut cx, x, opts)?;
        Ok(read_output(&cx.graph, &f))
    }

    /// Deterministic inference pass.
    pub fn infer(&self, x: &ModelInput) -> Result<ForwardOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.predict(x, ForwardOptions::eval(), &mut rng)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.to_model()
    }
}

pub fn read_output(g: &Graph, f: &Forward) -> ForwardOutput {
    let logit = g.value(f.logit).item();
    let gate = f.gate.map(|v| g.value(v).data().to_vec());
    let attention = f.attention.and_then(|v| {
        let (heads, w) = g.attention_weights(v)?;
        let nk = w.len() / heads;
        Some((0..nk).map(|j| (0..heads).map(|h| w[h * nk + j]).sum::<f64>() / heads as f64).collect())
    });
    ForwardOutput {
        logit,
        probability: crate::tensor::sigmoid(logit),
        gate_mean: gate.as_ref().map(|g| g.iter().sum::<f64>() / g.len() as f64),
        gate,
        attention,
    }
}

/// The tensor for an input slice, shaped `rows × cols`.
pub(crate) fn input_tensor(data: &[f64], rows: usize, cols: usize) -> Result<Tensor> {
    Ok(Tensor::matrix(rows, cols, data.to_vec())?)
}
