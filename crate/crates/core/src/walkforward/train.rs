//! Training one model on one fold.

use super::{FoldSpec, Result, WalkError};
use crate::data::{Dataset, WebNorm};
use crate::metrics::{auc, PredictionRow};
use crate::models::{read_output, ForwardOptions, Model, ModelConfig, ModelInput};
use crate::tensor::nn::Ctx;
use crate::tensor::{AdamW, AdamWConfig, ParamGrads};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Drives batch order and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            patience: 7,
            batch: 64,
            lr: 1e-3,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(WalkError::Train("epochs and batch must be positive".into()));
        }
        if self.patience >= self.epochs {
            return Err(WalkError::Train(format!(
                "patience ({}) must be below the epoch budget ({})",
                self.patience, self.epochs
            )));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(WalkError::Train("lr must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter on a maximised metric. Only strict improvements reset
/// it; an undefined metric counts as no improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, metric: Option<f64>) -> StopDecision {
        self.epoch += 1;
        match (metric, self.best) {
            (Some(m), None) => self.improve(m),
            (Some(m), Some(b)) if m > b => self.improve(m),
            _ => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
        }
    }

    fn improve(&mut self, m: f64) -> StopDecision {
        self.best = Some(m);
        self.best_epoch = self.epoch;
        self.stale = 0;
        StopDecision::Improved
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best metric (0 before any).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: Model,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

#[derive(Debug, Clone)]
pub enum FoldOutcome {
    Trained(Box<TrainedFold>),
    Skipped { reason: String },
}

/// Featurised, normalised inputs for one index range.
#[derive(Debug, Clone)]
pub struct FoldData<'a> {
    pub ids: Vec<u64>,
    pub times: Vec<i64>,
    pub windows: Vec<Vec<f64>>,
    pub embeddings: Vec<&'a [f64]>,
    pub web: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub labels: Vec<u8>,
    pub returns: Vec<f64>,
}

impl<'a> FoldData<'a> {
    pub fn build(ds: &'a Dataset, range: Range<usize>, norm: &WebNorm) -> Self {
        let n = range.len();
        let mut d = Self {
            ids: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            windows: Vec::with_capacity(n),
            embeddings: Vec::with_capacity(n),
            web: Vec::with_capacity(n),
            tau: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
        };
        for i in range {
            let s = &ds.samples[i];
            let snap = ds.snapshot(i);
            d.ids.push(s.id);
            d.times.push(s.time);
            d.windows.push(ds.window(i));
            d.embeddings.push(&snap.embedding);
            d.web.push(norm.apply(&snap.scalars));
            d.tau.push(s.tau as f64);
            d.labels.push(s.label);
            d.returns.push(s.future_return);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input(&self, i: usize) -> ModelInput<'_> {
        ModelInput {
            window: &self.windows[i],
            embedding: self.embeddings[i],
            web: &self.web[i],
            tau: self.tau[i],
        }
    }

    fn single_class(&self) -> bool {
        self.labels.iter().all(|&y| y == self.labels[0])
    }
}

/// Fit on `train`, checkpoint on `val` AUC.
pub fn fit(model_cfg: &ModelConfig, cfg: &TrainConfig, train: &FoldData, val: &FoldData) -> Result<TrainedFold> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone())?;
    let mut opt = AdamW::new(cfg.adamw(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = ParamGrads::zeros_like(&model.store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.store.clone();
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            grads.fill_zero();
            for &i in batch {
                let mut cx = Ctx::new(&model.store, true, model_cfg.dropout, &mut rng);
                let f = model.forward(&mut cx, &train.input(i), ForwardOptions::train())?;
                let loss = cx.graph.bce_with_logits(f.logit, train.labels[i] as f64)?;
                loss_sum += cx.graph.value(loss).item();
                cx.graph.backward(loss)?.accumulate_into(&mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.store, &grads)?;
        }
        let probs = (0..val.len())
            .map(|i| Ok(model.infer(&val.input(i))?.probability))
            .collect::<Result<Vec<f64>>>()?;
        let val_auc = auc(&probs, &val.labels);
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc,
        });
        match stopper.observe(val_auc) {
            StopDecision::Improved => best = model.store.clone(),
            StopDecision::Stop => break,
            StopDecision::Continue => {}
        }
    }
    model.store = best;
    Ok(TrainedFold {
        model,
        best_epoch: stopper.best_epoch(),
        best_val_auc: stopper.best().unwrap_or(f64::NAN),
        curve,
    })
}

/// Train from scratch on one fold with web normalisation fitted on its
/// training split.
pub fn train_fold(ds: &Dataset, fold: &FoldSpec, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<FoldOutcome> {
    let norm = WebNorm::fit_range(ds, fold.train.clone())?;
    let train = FoldData::build(ds, fold.train.clone(), &norm);
    let val = FoldData::build(ds, fold.val.clone(), &norm);
    train_on(model_cfg, cfg, &train, &val)
}

pub(crate) fn train_on(model_cfg: &ModelConfig, cfg: &TrainConfig, train: &FoldData, val: &FoldData) -> Result<FoldOutcome> {
    if train.is_empty() || train.single_class() {
        return Ok(FoldOutcome::Skipped {
            reason: "training split has a single class".into(),
        });
    }
    if val.is_empty() || val.single_class() {
        return Ok(FoldOutcome::Skipped {
            reason: "validation split has a single class; AUC undefined".into(),
        });
    }
    Ok(FoldOutcome::Trained(Box::new(fit(model_cfg, cfg, train, val)?)))
}

/// Test-split predictions and the mean gate activation (gated kinds).
pub fn predict_fold(model: &Model, test: &FoldData, fold: usize, seed: u64) -> Result<(Vec<PredictionRow>, Option<f64>)> {
    let mut rows = Vec::with_capacity(test.len());
    let mut gate_sum = 0.0;
    let mut gated = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..test.len() {
        let mut cx = Ctx::new(&model.store, false, 0.0, &mut rng);
        let f = model.forward(&mut cx, &test.input(i), ForwardOptions::eval())?;
        let out = read_output(&cx.graph, &f);
        if let Some(g) = out.gate_mean {
            gate_sum += g;
            gated += 1;
        }
        rows.push(PredictionRow {
            sample_id: test.ids[i],
            fold,
            seed,
            model: model.kind().name().to_string(),
            probability: out.probability,
            label: test.labels[i],
            future_return: test.returns[i],
            tau_lag: test.tau[i],
        });
    }
    Ok((rows, (gated > 0).then(|| gate_sum / gated as f64)))
}
