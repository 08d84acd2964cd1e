//! AdamW with cosine annealing and validation-driven early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{argmax, predict_all, ConfusionMatrix, F1Average};
use crate::model::{loss, AdFormer, ModelConfig, ParamStore};
use crate::numerics::{Tape, Tensor};
use crate::scalar::Scalar;
use crate::signal::Segment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub selection: F1Average,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 15,
            batch_size: 512,
            lr_max: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 41,
            grad_clip: None,
            selection: F1Average::Macro,
        }
    }
}

impl TrainConfig {
    /// Default schedule with laptop-sized batches.
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max and lr_max > 0, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / t_max))`.
pub fn cosine_lr(t: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t_max == 0 {
        return lr_max;
    }
    let frac = t.min(t_max) as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(store: &ParamStore<T>, c: &TrainConfig) -> Self {
        Self::new(store, c.beta1, c.beta2, c.eps, c.weight_decay)
    }

    /// One update from the gradients held in `store`. Parameters without a
    /// gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for p in store.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let decay = T::one() - lr * T::lit(self.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let theta = p.value.data_mut();
            match &p.grad {
                Some(g) => {
                    for (((t, m), v), &g) in theta
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *t = *t * decay - lr * mh / (vh.sqrt() + eps);
                    }
                }
                None => {
                    for (t, (m, v)) in theta.iter_mut().zip(m.data_mut().iter_mut().zip(v.data_mut())) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                        *t = *t * decay - lr * update;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Single-step convenience wrapper around [`AdamW::step`].
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamW<T>, lr: f64) -> Result<()> {
    state.step(store, lr)
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a validation score. Only strict improvements reset
/// it, so the earliest epoch of a plateau stays the best one.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_score: f64,
    /// 1-based epoch of `best_score`; 0 before any observation.
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            return StopDecision::Improved;
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
}

/// Tab-separated history with a header row.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_f1\tlr\n");
    for r in history {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:e}", r.epoch, r.train_loss, r.val_f1, r.lr);
    }
    s
}

/// Mean loss over `batch` and the matching mean gradient, written into the
/// store's accumulators. Samples run on separate tapes in parallel; their
/// gradients are summed in batch order so the result does not depend on
/// scheduling. `augment_seed` selects training mode: sample `i` then draws
/// its augmentation from stream `i` of that seed.
pub fn batch_gradients<T: Scalar>(
    model: &mut AdFormer<T>,
    batch: &[&Segment<T>],
    augment_seed: Option<u64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let m = &*model;
    let per: Vec<(f64, Vec<Option<Tensor<T>>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seg)| {
            let tape = Tape::new();
            let bound = m.store.bind(&tape, true);
            let mut rng = augment_seed.map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                r.set_stream(i as u64);
                r
            });
            let out = m.forward(
                &tape,
                &bound,
                &seg.data,
                rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
            )?;
            let l = loss(out.logits, seg.label)?;
            let value = l.item().to_f64_lossy();
            let mut grads = l.backward()?;
            let g = bound.vars().iter().map(|&v| grads.take(v)).collect();
            Ok((value, g))
        })
        .collect::<Result<_>>()?;
    let scale = T::one() / T::from_usize_lossy(batch.len());
    let mut total = 0.0;
    model.store.zero_grad();
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
    for (value, grads) in per {
        total += value;
        for (a, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                match a {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                    None => *a = Some(g),
                }
            }
        }
    }
    for (p, g) in model.store.iter_mut().zip(acc) {
        p.grad = g.map(|g| g.map(|v| v * scale));
    }
    Ok(total / batch.len() as f64)
}

/// Sample-level F1 of `model` on `segments` (evaluation mode).
pub fn sample_f1<T: Scalar>(model: &AdFormer<T>, segments: &[&Segment<T>], average: F1Average) -> Result<f64> {
    let probs = predict_all(model, segments)?;
    let cm = ConfusionMatrix::from_pairs(
        model.config.classes,
        segments.iter().zip(&probs).map(|(s, p)| (s.label, argmax(p))),
    );
    Ok(average.score(&cm))
}

/// Sample-level accuracy in evaluation mode.
pub fn sample_accuracy<T: Scalar>(model: &AdFormer<T>, segments: &[&Segment<T>]) -> Result<f64> {
    let probs = predict_all(model, segments)?;
    let cm = ConfusionMatrix::from_pairs(
        model.config.classes,
        segments.iter().zip(&probs).map(|(s, p)| (s.label, argmax(p))),
    );
    Ok(cm.accuracy())
}

/// Trained model (restored to its best validation epoch) with its history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: AdFormer<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
}

/// Full training run: seeded init and shuffling, epoch-level cosine
/// schedule, early stopping on validation F1.
pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[&Segment<T>],
    val_set: &[&Segment<T>],
) -> Result<TrainOutcome<T>> {
    train_with(model_config, config, train_set, val_set, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with<T: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[&Segment<T>],
    val_set: &[&Segment<T>],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "empty split: {} training and {} validation segments",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut model = AdFormer::new(model_config.clone(), config.seed)?;
    let mut opt = AdamW::from_config(&model.store, config);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.store.snapshot();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let augment = model_config.augmentation.is_enabled();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let lr = cosine_lr(epoch - 1, config.max_epochs, config.lr_max, config.lr_min);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Segment<T>> = chunk.iter().map(|&i| train_set[i]).collect();
            // distinct augmentation seed per (run, epoch, batch)
            let aug_seed = augment.then(|| {
                model_config.augmentation.rng_seed
                    ^ config.seed.rotate_left(17)
                    ^ ((epoch as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            });
            let l = batch_gradients(&mut model, &batch, aug_seed)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("training loss became {l} at epoch {epoch}")));
            }
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut model.store, c);
            }
            opt.step(&mut model.store, lr)?;
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
        }
        let val_f1 = sample_f1(&model, val_set, config.selection)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_f1,
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val_f1 {:.4} lr {:.2e}",
            rec.train_loss,
            rec.val_f1,
            lr
        );
        on_epoch(&rec);
        history.push(rec);
        match stopper.observe(epoch, val_f1) {
            StopDecision::Improved => best = model.store.snapshot(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    model.store.restore(best);
    model.store.zero_grad();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: stopper.best_epoch,
        best_val_f1: stopper.best_score,
        stopped_early,
    })
}
