//! Training loop, evaluation and best-model selection.
//!
//! All randomness derives from `(seed, epoch)` for shuffling and
//! `(seed, step)` for dropout, so a run resumed from a checkpoint replays the
//! uninterrupted run exactly.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::batch::{PaddedDataset, DEFAULT_PAD_SIGMA};
use crate::data::synth::stream;
use crate::error::{Error, Result};
use crate::mil::predict;
use crate::model::{accuracy, Model, ModelConfig, Output};
use crate::nn::Mode;
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub train_ratio: f64,
    pub pad_sigma: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 128,
            eval_batch_size: 1,
            epochs: 30,
            train_ratio: 0.5,
            pad_sigma: DEFAULT_PAD_SIGMA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio)));
        }
        if !(self.pad_sigma >= 0.0 && self.pad_sigma.is_finite()) {
            return Err(Error::Config(format!("pad_sigma must be >= 0, got {}", self.pad_sigma)));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best: Model<f32>,
    pub best_val_accuracy: f64,
    /// 0 until the first evaluation.
    pub best_epoch: usize,
}

impl TrainState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::init(config, seed)?;
        Ok(Self {
            adam: AdamState::new(&model),
            best: model.clone(),
            model,
            epoch: 0,
            step: 0,
            best_val_accuracy: -1.0,
            best_epoch: 0,
        })
    }
}

/// Eval-mode forward over `data` in chunks of `batch_size`.
pub fn evaluate_outputs(model: &Model<f32>, data: &PaddedDataset, batch_size: usize) -> Result<Vec<Output<f32>>> {
    let rows: Vec<usize> = (0..data.len()).collect();
    rows.chunks(batch_size.max(1))
        .map(|chunk| model.forward(&data.batch(chunk), &mut Mode::Eval))
        .collect()
}

/// Eval-mode predictions for every row of `data`.
pub fn predict_all(model: &Model<f32>, data: &PaddedDataset, batch_size: usize) -> Result<Vec<usize>> {
    Ok(evaluate_outputs(model, data, batch_size)?
        .iter()
        .flat_map(|o| predict(&o.topk.o_pred))
        .collect())
}

pub fn evaluate_accuracy(model: &Model<f32>, data: &PaddedDataset, batch_size: usize) -> Result<f64> {
    Ok(accuracy(&predict_all(model, data, batch_size)?, &data.labels))
}

/// Trains until `cfg.epochs` epochs are complete, starting from `state`.
/// `on_epoch` runs after each epoch's evaluation, e.g. to persist a
/// checkpoint; an error from it stops training.
pub fn train<F>(
    mut state: TrainState,
    cfg: &TrainConfig,
    train_set: &PaddedDataset,
    val_set: &PaddedDataset,
    mut on_epoch: F,
) -> Result<(TrainState, Vec<EpochLog>)>
where
    F: FnMut(&TrainState, &EpochLog) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let adam = cfg.adam();
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(&[cfg.seed, 0x5A, epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch::<f32>(chunk);
            let mut rng = stream(&[cfg.seed, 0xD0, state.step]);
            let (loss, grad, _) = state.model.loss_and_grad(&batch, &mut Mode::Train(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: state.step,
                    loss: loss as f64,
                });
            }
            adam_step(&mut state.model, &grad, &mut state.adam, &adam)?;
            state.step += 1;
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        state.epoch = epoch;
        let val_accuracy = evaluate_accuracy(&state.model, val_set, cfg.eval_batch_size)?;
        if val_accuracy > state.best_val_accuracy {
            state.best_val_accuracy = val_accuracy;
            state.best_epoch = epoch;
            state.best = state.model.clone();
        }
        let log = EpochLog {
            epoch,
            step: state.step,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
            best_val_accuracy: state.best_val_accuracy,
            best_epoch: state.best_epoch,
        };
        on_epoch(&state, &log)?;
        logs.push(log);
    }
    Ok((state, logs))
}

/// Serialises logs as JSON lines.
pub fn logs_to_jsonl(logs: &[EpochLog]) -> String {
    logs.iter()
        .map(|l| serde_json::to_string(l).expect("log serialises") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Variant;
    use ndarray::{Array2, Array3};

    fn toy_data(n_img: usize) -> PaddedDataset {
        // the label is encoded in the sign pattern of the first concept
        let dim = 4;
        let n = 3;
        let mut local = Array3::zeros((n_img, n, dim));
        let mut global = Array2::zeros((n_img, dim));
        let mut labels = Vec::new();
        for i in 0..n_img {
            let y = i % 2;
            labels.push(y as i32);
            for d in 0..dim {
                local[[i, 0, d]] = if (d % 2 == 0) == (y == 0) { 1.0 } else { -1.0 };
                local[[i, 1, d]] = ((i * 7 + d) as f32).sin() * 0.3;
                global[[i, d]] = ((i * 3 + d) as f32).cos() * 0.3;
            }
        }
        PaddedDataset {
            global,
            local,
            valid: Array2::from_elem((n_img, n), true),
            labels,
            provenance: (0..n_img as u32).map(|i| (i, i)).collect(),
            source: vec![vec![Some(0), Some(1), Some(2)]; n_img],
        }
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            classes: 2,
            slots: 3,
            k: 1,
            variant: Variant::Ours,
            ..ModelConfig::for_features(4, 2)
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            eval_batch_size: 3,
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let data = toy_data(8);
        let state = TrainState::new(model_cfg(), 0).unwrap();
        let (state, logs) = train(state, &quick_cfg(40), &data, &data, |_, _| Ok(())).unwrap();
        assert_eq!(logs.len(), 40);
        assert!(logs.last().unwrap().train_loss < logs[0].train_loss);
        assert_eq!(evaluate_accuracy(&state.best, &data, 1).unwrap(), state.best_val_accuracy);
        let max = logs.iter().map(|l| l.val_accuracy).fold(0.0, f64::max);
        assert_eq!(state.best_val_accuracy, max);
    }

    #[test]
    fn resuming_matches_uninterrupted_run() {
        let data = toy_data(10);
        let cfg = quick_cfg(6);
        let full = train(TrainState::new(model_cfg(), 1).unwrap(), &cfg, &data, &data, |_, _| Ok(())).unwrap();
        let half = train(
            TrainState::new(model_cfg(), 1).unwrap(),
            &TrainConfig { epochs: 3, ..cfg.clone() },
            &data,
            &data,
            |_, _| Ok(()),
        )
        .unwrap();
        let resumed = train(half.0, &cfg, &data, &data, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.0, full.0);
        assert_eq!(&full.1[3..], &resumed.1[..]);
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(matches!(quick_cfg(0).validate(), Err(Error::Config(_))));
    }

    #[test]
    fn diverging_loss_is_reported() {
        let data = toy_data(4);
        let mut state = TrainState::new(model_cfg(), 0).unwrap();
        state.model.classifier.l3.b[0] = f32::INFINITY;
        let err = train(state, &quick_cfg(1), &data, &data, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 0, .. } | Error::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn log_lines_round_trip() {
        let log = EpochLog {
            epoch: 2,
            step: 9,
            train_loss: 0.5,
            val_accuracy: 0.75,
            best_val_accuracy: 0.75,
            best_epoch: 2,
        };
        let text = logs_to_jsonl(&[log.clone()]);
        assert!(text.ends_with('\n'));
        assert_eq!(serde_json::from_str::<EpochLog>(text.trim()).unwrap(), log);
    }
}
