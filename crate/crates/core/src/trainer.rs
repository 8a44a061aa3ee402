//! Per-image training loop: forward, argmax labels, cluster count, dynamic
//! loss, backward and an SGD step, repeated until the number of clusters
//! drops to `min_labels` or `max_iters` iterations have run.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::labels::{count_clusters, LabelMap};
use crate::loss::{total_loss, LossBreakdown, ScheduleKind, WeightSchedule};
use crate::model::{assign_labels, backward, forward, init_model, ModelConfig};
use crate::tensor::{sgd_step, SgdState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub min_labels: usize,
    pub seed: u64,
    pub schedule: WeightSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            learning_rate: 0.1,
            momentum: 0.9,
            min_labels: 3,
            seed: 0,
            schedule: WeightSchedule::with_default_mu(ScheduleKind::Fsf),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(contract("max_iters must be at least 1"));
        }
        if self.min_labels < 1 {
            return Err(contract("min_labels must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    MinLabels,
}

/// One row of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_sim")]
    pub similarity: f64,
    #[serde(rename = "L_con")]
    pub continuity: f64,
    pub mu_eff: f64,
    pub q_prime: usize,
}

impl IterationRecord {
    fn new(iter: usize, loss: &LossBreakdown, q_prime: usize) -> Self {
        Self {
            iter,
            total: loss.total,
            similarity: loss.similarity,
            continuity: loss.continuity,
            mu_eff: loss.effective_weight,
            q_prime,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelMap,
    pub history: Vec<IterationRecord>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
}

impl SegmentationResult {
    pub fn final_record(&self) -> &IterationRecord {
        self.history.last().expect("history is never empty")
    }
}

/// Stop when `q_prime <= min_labels` (checked first) or `iter >= max_iters`.
pub fn should_stop(q_prime: usize, iter: usize, cfg: &TrainConfig) -> Option<StopReason> {
    if q_prime <= cfg.min_labels {
        Some(StopReason::MinLabels)
    } else if iter >= cfg.max_iters {
        Some(StopReason::MaxIters)
    } else {
        None
    }
}

/// Trains a freshly initialized network on a single image and returns the
/// labeling of the last iteration.
pub fn train_image(image: &Tensor, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<SegmentationResult> {
    train_cfg.validate()?;
    let (c, h, w) = image.dims3()?;
    if c != model_cfg.input_channels {
        return Err(contract(format!(
            "image has {c} channels, model expects {}",
            model_cfg.input_channels
        )));
    }
    if h * w < 2 {
        return Err(Error::Degenerate(format!("image {h}x{w} has fewer than 2 pixels")));
    }

    let mut params = init_model(model_cfg, train_cfg.seed)?;
    let sizes: Vec<usize> = params.buffers().iter().map(|b| b.len()).collect();
    let mut sgd = SgdState::new(train_cfg.learning_rate, train_cfg.momentum, sizes)?;
    let mut history = Vec::new();

    for iter in 1.. {
        let (r_prime, cache) = forward(&params, image)?;
        if !r_prime.is_finite() {
            return Err(Error::Divergence {
                iteration: iter,
                what: "response map",
            });
        }
        let labels = assign_labels(&r_prime)?;
        let q_prime = count_clusters(&labels);
        let (loss, grad) = total_loss(&r_prime, &labels, &train_cfg.schedule, q_prime)?;
        if !(loss.total.is_finite() && loss.similarity.is_finite() && loss.continuity.is_finite()) {
            return Err(Error::Divergence {
                iteration: iter,
                what: "loss",
            });
        }
        history.push(IterationRecord::new(iter, &loss, q_prime));

        if let Some(stop_reason) = should_stop(q_prime, iter, train_cfg) {
            return Ok(SegmentationResult {
                labels,
                history,
                iterations_run: iter,
                stop_reason,
            });
        }

        let grads = backward(&cache, &params, &grad)?;
        sgd_step(&mut params.buffers_mut(), &grads.buffers(), &mut sgd)?;
    }
    unreachable!("the loop only exits through should_stop")
}
