//! SGD training with plateau decay and early stopping, plus direct gradient
//! descent on per-image logit grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_points, encode_target, Activation, CodecParams, DecodeParams};
use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, HeatmapRole, KeypointSet};
use crate::loss::{evaluate, LossConfig, Reduction};
use crate::model::{Gradients, ModelSpec, ModelState, Planes};
use crate::scalar::Scalar;
use crate::synth::{mix_seed, DatasetManifest, Sample, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    /// Epochs without validation improvement before the learning rate decays.
    pub stagnation_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: 0.01,
            weight_decay: 0.0005,
            batch_size: 4,
            lr_decay: 0.9,
            stagnation_patience: 3,
            early_stop_patience: 10,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.stagnation_patience == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return fail("batch_size, patience values and max_epochs must be >= 1");
        }
        Ok(())
    }
}

/// Learning-rate decay on validation stagnation, and the early-stop decision.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    base_lr: f64,
    decay: f64,
    stagnation_patience: usize,
    early_stop_patience: usize,
    best: Option<f64>,
    since_best: usize,
    since_decay: usize,
    decays: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauStep {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            base_lr: cfg.lr,
            decay: cfg.lr_decay,
            stagnation_patience: cfg.stagnation_patience,
            early_stop_patience: cfg.early_stop_patience,
            best: None,
            since_best: 0,
            since_decay: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.decay.powi(self.decays)
    }

    pub fn decays(&self) -> usize {
        self.decays as usize
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauStep {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.since_best = 0;
            self.since_decay = 0;
            return PlateauStep {
                improved: true,
                decayed: false,
                stop: false,
            };
        }
        self.since_best += 1;
        self.since_decay += 1;
        let decayed = self.since_decay >= self.stagnation_patience;
        if decayed {
            self.decays += 1;
            self.since_decay = 0;
        }
        PlateauStep {
            improved: false,
            decayed,
            stop: self.since_best >= self.early_stop_patience,
        }
    }
}

/// `theta <- theta (1 - lr wd) - lr g`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: f64, weight_decay: f64) {
    let shrink = T::from_f64_lossy(1.0 - lr * weight_decay);
    let lr = T::from_f64_lossy(lr);
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p * shrink - lr * g;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.records[self.best_epoch].val_loss
    }

    /// Everything except wall-clock times, which vary between runs.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.best_epoch == other.best_epoch
            && self.stop_reason == other.stop_reason
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }

    /// Deterministic per-epoch log.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,best\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                u8::from(r.epoch == self.best_epoch)
            );
        }
        out
    }

    pub fn timing_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "epoch {} done at {:.3}s", r.epoch, r.wall_time_s);
        }
        out
    }
}

struct Prepared<T> {
    image: Planes<T>,
    target: Heatmap<T>,
    n: usize,
}

fn prepare<T: Scalar>(samples: &[Sample], codec: &CodecParams) -> Result<Vec<Prepared<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                image: s.image.cast(),
                target: encode_target(&s.sparse_labels, s.height(), s.width(), codec)?,
                n: s.sparse_labels.len(),
            })
        })
        .collect()
}

fn mean_loss<T: Scalar>(state: &ModelState<T>, data: &[Prepared<T>], loss: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for d in data {
        let (out, _) = state.forward(&d.image)?;
        total += evaluate(&d.target, &out, d.n, loss)?.total.to_f64_lossy();
    }
    Ok(total / data.len().max(1) as f64)
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
/// Wall-clock times; kept out of the CSV so that file is reproducible.
pub const TIMING_FILE: &str = "train_timing.txt";

/// Trains on in-memory samples; returns the best-validation state.
///
/// When `out_dir` is given, the best checkpoint and the logs are written there.
pub fn train_on<T: Scalar>(
    train: &[Sample],
    val: &[Sample],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    codec: &CodecParams,
    out_dir: Option<&Path>,
) -> Result<(ModelState<T>, TrainLog)> {
    cfg.validate()?;
    codec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training needs non-empty train and val splits".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let train_data = prepare::<T>(train, codec)?;
    let val_data = prepare::<T>(val, codec)?;

    let mut state = ModelState::<T>::init(spec, cfg.seed)?;
    let mut best_state = state.clone();
    let mut schedule = PlateauSchedule::new(cfg);
    let mut records = Vec::new();
    let mut best_epoch = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let started = Instant::now();
    let diverged = |epoch: usize, step: usize| Error::Diverged {
        epoch,
        step,
        loss: cfg.loss.variant.name().to_string(),
    };

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));

        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::zeros(state.parameter_count());
            for &i in batch {
                let d = &train_data[i];
                let (out, acts) = state.forward(&d.image)?;
                let loss = evaluate(&d.target, &out, d.n, &cfg.loss)?;
                if !loss.total.is_finite() || loss.grad.values().iter().any(|g| !g.is_finite()) {
                    return Err(diverged(epoch, step));
                }
                epoch_loss += loss.total.to_f64_lossy();
                grads.add_assign(&state.backward(&acts, &loss.grad)?);
            }
            grads.scale(T::one() / T::from_usize(batch.len()).expect("batch size fits"));
            sgd_step(state.params_mut(), &grads.values, lr, cfg.weight_decay);
            if state.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged(epoch, step));
            }
        }
        let train_loss = epoch_loss / train_data.len() as f64;
        let val_loss = mean_loss(&state, &val_data, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, order.len().div_ceil(cfg.batch_size)));
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        let step = schedule.observe(val_loss);
        if step.improved {
            best_epoch = epoch;
            best_state = state.clone();
            if let Some(dir) = out_dir {
                best_state.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        if step.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let log = TrainLog {
        records,
        best_epoch,
        stop_reason,
    };
    if let Some(dir) = out_dir {
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(TRAIN_LOG_FILE, log.to_csv())?;
        write(TIMING_FILE, log.timing_text())?;
    }
    Ok((best_state, log))
}

/// Loads the train and val splits of a dataset and runs [`train_on`].
pub fn train<T: Scalar>(
    manifest: &DatasetManifest,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    codec: &CodecParams,
    out_dir: &Path,
) -> Result<(ModelState<T>, TrainLog)> {
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    train_on(&train, &val, spec, cfg, codec, Some(out_dir))
}

/// Runs the model and decodes every image.
///
/// With identity activation the raw output is read as the heatmap itself
/// (MSE-family training regresses the target directly).
pub fn predict<T: Scalar>(state: &ModelState<T>, samples: &[Sample], decode: &DecodeParams) -> Result<Vec<KeypointSet>> {
    samples
        .iter()
        .map(|s| {
            let (out, _) = state.forward(&s.image.cast())?;
            let out = match decode.activation {
                Activation::Identity => out.with_role(HeatmapRole::Probability),
                Activation::Sigmoid => out,
            };
            decode_points(&out, decode)
        })
        .collect()
}

/// Gradient descent on one logit grid; returns the final grid and the loss
/// before every step (plus the final loss).
///
/// Every pixel is its own parameter, so the per-pixel objective is used
/// (`reduction = sum`) whatever `loss.reduction` says.
pub fn optimize_logits<T: Scalar>(
    target: &Heatmap<T>,
    n: usize,
    init: Heatmap<T>,
    loss: &LossConfig,
    steps: usize,
    step_size: f64,
) -> Result<(Heatmap<T>, Vec<f64>)> {
    let cfg = LossConfig {
        reduction: Reduction::Sum,
        ..*loss
    };
    let step = T::from_f64_lossy(step_size);
    let mut logits = init.with_role(HeatmapRole::Logit);
    let mut history = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let out = evaluate(target, &logits, n, &cfg)?;
        history.push(out.total.to_f64_lossy());
        if i == steps {
            break;
        }
        for (x, g) in logits.values_mut().iter_mut().zip(out.grad.values()) {
            *x -= step * *g;
        }
        if logits.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                epoch: 0,
                step: i,
                loss: cfg.variant.name().to_string(),
            });
        }
    }
    Ok((logits, history))
}

/// Optimizes a zero-initialized logit grid per sample against its sparse-label target.
pub fn direct_logit_optimize<T: Scalar>(
    samples: &[Sample],
    loss: &LossConfig,
    codec: &CodecParams,
    steps: usize,
    step_size: f64,
) -> Result<Vec<Heatmap<T>>> {
    samples
        .iter()
        .map(|s| {
            let target = encode_target::<T>(&s.sparse_labels, s.height(), s.width(), codec)?;
            let init = Heatmap::zeros(s.height(), s.width(), HeatmapRole::Logit);
            optimize_logits(&target, s.sparse_labels.len(), init, loss, steps, step_size).map(|(h, _)| h)
        })
        .collect()
}
