//! Optimization loop, early stopping on validation CCC, and split evaluation.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, NarrativeClip, Partition, Split};
use crate::error::{Error, Result};
use crate::metrics::{ccc, mean, EvalReport};
use crate::models::{ClipInputs, Model};
use crate::tensor::{Graph, ParamGrads, ParamStore, RngState, Tensor};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ATTEND_AFFECT_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Wall-clock limit in seconds; checked between epochs.
    pub time_budget: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 50,
            patience: 5,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            time_budget: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) || self.patience == 0 {
            return Err(Error::Config(
                "learning rate must be non-negative, clip norm and patience positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("moment decay rates must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-clip training loss; absent for the initial evaluation.
    pub train_loss: Option<f64>,
    pub val_ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Epoch 0 is the untrained model.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ccc: f64,
    pub stop_reason: String,
    pub train_targets: Vec<String>,
    pub val_targets: Vec<String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

/// Adaptive-moment optimizer state, one pair of buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// A clip's model inputs and window-aligned gold standard.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub target: String,
    pub inputs: ClipInputs,
    pub gold: Vec<f64>,
}

pub fn prepare(model: &Model, clip: &NarrativeClip) -> Result<PreparedClip> {
    let c = &model.config;
    let inputs = ClipInputs::new(&clip.streams, clip.duration, &c.window, &c.modalities)?;
    let gold = clip.gold_windows(c.window.tau)?.values;
    if gold.len() != inputs.n_windows {
        return Err(Error::Data(format!(
            "clip {}: {} gold windows for {} input windows",
            clip.id,
            gold.len(),
            inputs.n_windows
        )));
    }
    Ok(PreparedClip {
        id: clip.id.clone(),
        target: clip.target.clone(),
        inputs,
        gold,
    })
}

pub fn prepare_all(model: &Model, clips: &[&NarrativeClip]) -> Result<Vec<PreparedClip>> {
    clips.iter().map(|c| prepare(model, c)).collect()
}

/// Runs `f` on a pool capped by `ATTEND_AFFECT_THREADS` when it is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Mean-squared error of a clip and its parameter gradients. Dropout is
/// active only when `rng` is given.
pub fn loss_and_grads(model: &Model, clip: &PreparedClip, rng: Option<RngState>) -> Result<(f64, ParamGrads)> {
    let mut g = match rng {
        Some(r) => Graph::train(&model.params, r),
        None => Graph::with_grads(&model.params),
    };
    let pred = model.forward(&mut g, &clip.inputs)?;
    let target = g.constant(Tensor::new(vec![clip.gold.len(), 1], clip.gold.clone())?);
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).item().expect("mse is scalar");
    g.backward(loss)?;
    Ok((value, g.into_param_grads()))
}

/// Eval-mode MSE on one clip.
pub fn clip_loss(model: &Model, clip: &PreparedClip) -> Result<f64> {
    let pred = model.predict(&clip.inputs)?;
    Ok(pred.values.iter().zip(&clip.gold).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / clip.gold.len().max(1) as f64)
}

/// One optimizer step on one clip; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    clip: &PreparedClip,
    cfg: &TrainConfig,
    rng: Option<RngState>,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_grads(model, clip, rng)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} on clip {}", clip.id)));
    }
    let norm = grads.l2_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm} on clip {}", clip.id)));
    }
    if norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / norm);
    }
    adam.step(&mut model.params, &grads, cfg);
    Ok(loss)
}

/// Per-clip CCC of eval-mode predictions against the gold standard.
pub fn clip_cccs(model: &Model, clips: &[PreparedClip]) -> Result<Vec<f64>> {
    with_thread_cap(|| {
        clips
            .par_iter()
            .map(|c| {
                let pred = model.predict(&c.inputs)?;
                ccc(&pred.values, &c.gold)
            })
            .collect()
    })
}

/// Trains on `train` and keeps the parameters of the best validation epoch.
///
/// No provenance checks; see [`train`] for the split-aware entry point.
pub fn fit(model: &mut Model, train: &[PreparedClip], val: &[PreparedClip], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(&model.params);
    let initial = mean(&clip_cccs(model, val)?);
    let mut history = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: None,
            val_ccc: initial,
        }],
        best_epoch: 0,
        best_val_ccc: initial,
        stop_reason: format!("reached {} epochs", cfg.max_epochs),
        train_targets: sorted_targets(train),
        val_targets: sorted_targets(val),
        checkpoint: None,
    };
    let mut best = model.params.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        if let Some(budget) = cfg.time_budget {
            if start.elapsed().as_secs_f64() >= budget {
                history.stop_reason = format!("time budget of {budget}s spent after {} epochs", epoch - 1);
                break;
            }
        }
        RngState::with_stream(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let rng = RngState::with_stream(cfg.seed ^ 0x5eed_d509, (epoch * train.len() + step) as u64);
            total += train_step(model, &mut adam, &train[i], cfg, Some(rng))
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
        }
        let val_ccc = mean(&clip_cccs(model, val)?);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(total / train.len() as f64),
            val_ccc,
        });
        if val_ccc > history.best_val_ccc {
            history.best_val_ccc = val_ccc;
            history.best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stop_reason = format!("no validation improvement for {} epochs", cfg.patience);
                break;
            }
        }
    }
    model.params = best;
    Ok(history)
}

fn sorted_targets(clips: &[PreparedClip]) -> Vec<String> {
    clips.iter().map(|c| c.target.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Trains on the split's training targets, selecting on its validation
/// targets. Test clips are never read.
pub fn train(model: &mut Model, corpus: &Corpus, split: &Split, cfg: &TrainConfig) -> Result<TrainHistory> {
    split.check_disjoint()?;
    let train_clips = split.clips(corpus, Partition::Train);
    let val_clips = split.clips(corpus, Partition::Val);
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    for c in train_clips.iter().chain(&val_clips) {
        assert!(!test.contains(c.target.as_str()), "clip {} of test target {} reached training", c.id, c.target);
    }
    let train = prepare_all(model, &train_clips)?;
    let val = prepare_all(model, &val_clips)?;
    fit(model, &train, &val, cfg)
}

/// Table-style report for the clips of one partition.
///
/// With a training history, fails when any evaluated target was trained on.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    split: &Split,
    partition: Partition,
    history: Option<&TrainHistory>,
) -> Result<EvalReport> {
    let clips = split.clips(corpus, partition);
    if let Some(h) = history {
        if partition != Partition::Train {
            if let Some(c) = clips.iter().find(|c| h.train_targets.contains(&c.target)) {
                return Err(Error::Data(format!(
                    "target {} of clip {} was used for training and cannot be evaluated as {partition}",
                    c.target, c.id
                )));
            }
        }
    }
    let mut report = evaluate_clips(model, &clips, &partition.to_string())?;
    report.notes.push(format!("corpus: {}", corpus.provenance()));
    Ok(report)
}

pub fn evaluate_clips(model: &Model, clips: &[&NarrativeClip], split_name: &str) -> Result<EvalReport> {
    let prepared = prepare_all(model, clips)?;
    let values = clip_cccs(model, &prepared)?;
    EvalReport::new(
        split_name,
        model.kind().name(),
        &model.config.modalities.to_string(),
        prepared.iter().map(|c| c.id.clone()).collect(),
        values,
    )
}
