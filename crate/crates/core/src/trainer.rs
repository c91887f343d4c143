//! Mini-batch training: multitask meta-training, the brute-force
//! fine-tuning oracle `f(S)`, loss evaluation and checkpoints.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::linearize::ByteCursor;
use crate::model::{accumulate_loss_gradient, check_len, sample_loss, ModelConfig, ParamVector, Sample};
use crate::taskgen::Corpus;
use crate::{GradexError, Result, TaskId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GXCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training stops after this many consecutive non-improving epochs.
    /// `0` disables early stopping: all epochs run and the final
    /// parameters are returned.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// L2 penalty `wd/2 |w - init|^2` pulling weights toward the start point.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 0.01,
            batch_size: 16,
            max_epochs: 50,
            early_stop_patience: 3,
            seed: 0,
            optimizer: Optimizer::Adam,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults for oracle fine-tuning: plain SGD, which keeps fine-tuned
    /// weights close to the start point.
    pub fn fine_tune() -> Self {
        TrainConfig {
            step_size: 0.03,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(GradexError::InvalidConfig("step_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(GradexError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(GradexError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ParamVector,
    /// Training loss of `params`.
    pub final_train_loss: f64,
    /// Validation loss after every epoch run.
    pub val_loss_curve: Vec<f64>,
    pub epochs_run: usize,
    /// Epoch (1-based) whose parameters were returned; `0` for the start point.
    pub best_epoch: usize,
    /// Training forward passes: `epochs_run * train samples`.
    pub forward_passes: u64,
    /// Forward passes spent on loss evaluation (validation, final train loss).
    pub eval_passes: u64,
}

/// Mean per-sample loss.
pub fn eval_loss(model: &ModelConfig, params: &ParamVector, data: &[Sample]) -> Result<f64> {
    eval_loss_refs(model, params, data.iter())
}

fn eval_loss_refs<'a>(model: &ModelConfig, params: &ParamVector, data: impl Iterator<Item = &'a Sample>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in data {
        total += sample_loss(model, params, s)?;
        count += 1;
    }
    if count == 0 {
        return Err(GradexError::EmptyData("evaluation data"));
    }
    Ok(total / count as f64)
}

/// `||x - theta_star|| / ||theta_star||`.
pub fn relative_distance(x: &ParamVector, theta_star: &ParamVector) -> Result<f64> {
    check_len("parameter vector", theta_star.len(), x.len())?;
    let norm = theta_star.norm();
    if norm == 0.0 {
        return Err(GradexError::ZeroNorm("theta_star"));
    }
    Ok(x.sub(theta_star)?.norm() / norm)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Mini-batch training from `init`, early stopping on the mean loss over `val`
/// and returning the best parameters seen (the start point included).
pub fn fit(model: &ModelConfig, init: &ParamVector, train: &[&Sample], val: &[&Sample], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_len("parameter vector", model.param_count(), init.len())?;
    if train.is_empty() {
        return Err(GradexError::EmptyData("training data"));
    }
    if val.is_empty() {
        return Err(GradexError::EmptyData("validation data"));
    }
    let p = init.len();
    let mut params = init.as_slice().to_vec();
    let mut best_params = init.clone();
    let mut best_val = eval_loss_refs(model, init, val.iter().copied())?;
    let mut eval_passes = val.len() as u64;
    let mut best_epoch = 0;
    let mut curve = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState {
        m: vec![0.0; p],
        v: vec![0.0; p],
        t: 0,
    };
    let mut grad = vec![0.0; p];

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += accumulate_loss_gradient(model, &params, train[i], scale, &mut grad)?;
            }
            if cfg.weight_decay > 0.0 {
                for ((g, w), w0) in grad.iter_mut().zip(&params).zip(init.as_slice()) {
                    *g += cfg.weight_decay * (w - w0);
                }
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (w, g) in params.iter_mut().zip(&grad) {
                        *w -= cfg.step_size * g;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let bc1 = 1.0 - ADAM_BETA1.powi(adam.t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(adam.t);
                    for (((w, g), m), v) in params.iter_mut().zip(&grad).zip(&mut adam.m).zip(&mut adam.v) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= cfg.step_size * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() || params.iter().any(|w| !w.is_finite()) {
            return Err(GradexError::Diverged { epoch, loss: train_loss });
        }
        let current = ParamVector::from_vec_unchecked(params.clone());
        let val_loss = eval_loss_refs(model, &current, val.iter().copied())?;
        eval_passes += val.len() as u64;
        if !val_loss.is_finite() {
            return Err(GradexError::Diverged { epoch, loss: val_loss });
        }
        curve.push(val_loss);
        if cfg.early_stop_patience == 0 {
            best_val = val_loss;
            best_params = current;
            best_epoch = epoch;
        } else if val_loss < best_val {
            best_val = val_loss;
            best_params = current;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let final_train_loss = eval_loss_refs(model, &best_params, train.iter().copied())?;
    eval_passes += train.len() as u64;
    let epochs_run = curve.len();
    Ok(FitResult {
        params: best_params,
        final_train_loss,
        val_loss_curve: curve,
        epochs_run,
        best_epoch,
        forward_passes: (epochs_run * train.len()) as u64,
        eval_passes,
    })
}

/// Multitask training on the union of every source and target training set,
/// early-stopped on the union of their validation sets.
pub fn meta_train(model: &ModelConfig, init: &ParamVector, corpus: &Corpus, cfg: &TrainConfig) -> Result<FitResult> {
    let all = || std::iter::once(&corpus.target).chain(&corpus.tasks);
    let train: Vec<&Sample> = all().flat_map(|t| &t.train).collect();
    let val: Vec<&Sample> = all().flat_map(|t| &t.val).collect();
    fit(model, init, &train, &val, cfg)
}

/// Outcome of one oracle fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    /// `f(S)`: target validation loss of the returned parameters.
    pub loss: f64,
    /// `||theta_S - theta0|| / ||theta0||`, when `theta0` is nonzero.
    pub relative_distance: Option<f64>,
    pub fit: FitResult,
}

/// The fine-tuning oracle `f(S)`: trains from `theta0` on the samples of `S`
/// together with the target training set, stopping when the target
/// validation loss stops decreasing.
pub fn true_f(
    model: &ModelConfig,
    theta0: &ParamVector,
    subset: &BTreeSet<TaskId>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<FineTuneOutcome> {
    corpus.check_subset(subset)?;
    let mut train: Vec<&Sample> = corpus.target.train.iter().collect();
    for &t in subset {
        train.extend(&corpus.task(t).expect("checked").train);
    }
    let val: Vec<&Sample> = corpus.target.val.iter().collect();
    let fit = fit(model, theta0, &train, &val, cfg)?;
    let loss = if fit.best_epoch == 0 {
        eval_loss(model, theta0, &corpus.target.val)?
    } else {
        fit.val_loss_curve[fit.best_epoch - 1]
    };
    let relative_distance = relative_distance(&fit.params, theta0).ok();
    Ok(FineTuneOutcome {
        loss,
        relative_distance,
        fit,
    })
}

/// Checkpoint header and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub config_digest: Digest,
    pub corpus_digest: Digest,
}

impl Checkpoint {
    /// Layout: magic, version (u32), p (u64), config digest, corpus digest,
    /// then `p` little-endian f64 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(84 + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.config_digest);
        buf.extend_from_slice(&self.corpus_digest);
        for v in self.params.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes, "checkpoint");
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(GradexError::format("checkpoint", "bad magic"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(GradexError::format("checkpoint", format!("unsupported version {version}")));
        }
        let p = cur.u64()? as usize;
        let config_digest: Digest = cur.take(32)?.try_into().expect("32 bytes");
        let corpus_digest: Digest = cur.take(32)?.try_into().expect("32 bytes");
        if cur.remaining() != 8 * p {
            return Err(GradexError::format("checkpoint", "parameter section length does not match header"));
        }
        let values = cur
            .take(8 * p)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Checkpoint {
            params: ParamVector::new(values)?,
            config_digest,
            corpus_digest,
        })
    }
}
