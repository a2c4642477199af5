//! From-scratch training: shuffled mini-batches, Adam updates, and a
//! best-on-validation snapshot.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CnnModel, Grads, Patch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Fraction of the data held out for validation; the remainder trains.
    pub train_fraction: f32,
    pub val_fraction: f32,
    pub seed: u64,
    /// Random horizontal/vertical mirroring of training patches.
    pub augment_flips: bool,
    /// Stop once validation accuracy reaches this level.
    pub early_stop_val_acc: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            train_fraction: 0.7,
            val_fraction: 0.3,
            seed: 0,
            augment_flips: false,
            early_stop_val_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::parameter("epochs and batch size must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::parameter("learning rate must be positive"));
        }
        if (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-6 {
            return Err(Error::parameter("train and validation fractions must sum to 1"));
        }
        if self.train_fraction <= 0.0 || self.val_fraction <= 0.0 {
            return Err(Error::parameter("both split fractions must be positive"));
        }
        Ok(())
    }
}

/// One epoch's metrics. Losses are mean cross-entropy; accuracies are
/// fractions in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_loss: f32,
    pub val_acc: f32,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Weights from the epoch with the best validation accuracy.
    pub model: CnnModel<f32>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Adam first/second-moment state, one entry per parameter block.
struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: usize,
}

impl AdamState {
    fn new(model: &CnnModel<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model
            .param_blocks()
            .iter()
            .map(|b| vec![0.0; b.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut CnnModel<f32>, grads: &Grads<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (bi, block) in model.param_blocks_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[bi], &mut self.v[bi], &grads.blocks[bi]);
            for i in 0..block.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                block[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Mean loss and accuracy of `model` over labeled patches, without
/// touching the weights.
pub fn evaluate(model: &CnnModel<f32>, patches: &[Patch]) -> Result<(f32, f32)> {
    if patches.is_empty() {
        return Err(Error::parameter("evaluation set must be non-empty"));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for p in patches {
        let label = p
            .label
            .ok_or_else(|| Error::parameter("evaluation patches need labels"))?;
        let probs = model.forward(p)?;
        let truth = label.index();
        loss_sum += -(f64::from(probs[truth]).max(1e-30)).ln();
        let predicted = usize::from(probs[1] >= probs[0]);
        correct += usize::from(predicted == truth);
    }
    Ok((
        (loss_sum / patches.len() as f64) as f32,
        correct as f32 / patches.len() as f32,
    ))
}

/// Trains `model` on labeled patches and returns the snapshot with the
/// best validation accuracy, plus the per-epoch history. Deterministic
/// for a fixed (model, data, config) triple.
pub fn train(model: CnnModel<f32>, patches: &[Patch], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if patches.len() < 20 {
        return Err(Error::training(format!(
            "need at least 20 labeled patches, got {}",
            patches.len()
        )));
    }
    let mut class_seen = [false; 2];
    for p in patches {
        let label = p
            .label
            .ok_or_else(|| Error::training("all training patches need labels"))?;
        class_seen[label.index()] = true;
    }
    if !(class_seen[0] && class_seen[1]) {
        return Err(Error::training("training data must contain both classes"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut rng);
    let val_len = ((patches.len() as f32 * cfg.val_fraction).round() as usize)
        .clamp(1, patches.len() - 1);
    let (train_idx, val_idx) = order.split_at(patches.len() - val_len);
    let mut train_idx = train_idx.to_vec();
    let val_set: Vec<Patch> = val_idx.iter().map(|&i| patches[i].clone()).collect();

    let mut model = model;
    let mut adam = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f32, usize, CnnModel<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<Patch> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment_flips {
                        let (h, v) = (rng.gen::<bool>(), rng.gen::<bool>());
                        patches[i].flipped(h, v)
                    } else {
                        patches[i].clone()
                    }
                })
                .collect();
            // Accuracy is measured with the weights the batch was
            // scored by, i.e. before this update.
            for p in &batch {
                let probs = model.forward(p)?;
                let predicted = usize::from(probs[1] >= probs[0]);
                correct += usize::from(predicted == p.label.expect("validated above").index());
            }
            let (loss, grads) = model.loss_and_grads(&batch)?;
            loss_sum += f64::from(loss) * batch.len() as f64;
            seen += batch.len();
            adam.apply(&mut model, &grads, cfg);
            if !model.params_finite() {
                return Err(Error::training(format!(
                    "parameters diverged at epoch {epoch}"
                )));
            }
        }
        let (val_loss, val_acc) = evaluate(&model, &val_set)?;
        let stats = EpochStats {
            epoch,
            train_loss: (loss_sum / seen as f64) as f32,
            train_acc: correct as f32 / seen as f32,
            val_loss,
            val_acc,
        };
        history.push(stats);
        let improved = match &best {
            Some((acc, _, _)) => val_acc > *acc,
            None => true,
        };
        if improved {
            best = Some((val_acc, epoch, model.clone()));
        }
        if let Some(target) = cfg.early_stop_val_acc {
            if val_acc >= target {
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        model: best_model,
        history,
        best_epoch,
    })
}
