//! Dynamically weighted segmentation loss.
//!
//! `L = L_sim + μ′ · L_con`, where `L_sim` is the per-pixel cross-entropy of
//! the normalized response against its own argmax labels, `L_con` is the
//! Manhattan distance between the response vectors of vertically and
//! horizontally adjacent pixels, averaged over neighbour pairs, and `μ′`
//! comes from a [`WeightSchedule`] evaluated at the
//! current number of clusters `q′`:
//!
//! | schedule | `μ′`     |
//! |----------|----------|
//! | Fixed    | `μ`      |
//! | FSF      | `q′ / μ` |
//! | SCF      | `μ / q′` |
//!
//! FSF puts the weight on continuity while many clusters remain and shifts it
//! to similarity as clusters merge. SCF does the opposite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{softmax_cross_entropy, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Fixed,
    /// Feature Similarity Focus: `μ′ = q′ / μ`.
    Fsf,
    /// Spatial Continuity Focus: `μ′ = μ / q′`.
    Scf,
}

impl ScheduleKind {
    /// Recommended base weight for each schedule.
    pub fn default_mu(self) -> f64 {
        match self {
            ScheduleKind::Fixed => 5.0,
            ScheduleKind::Fsf => 15.0,
            ScheduleKind::Scf => 50.0,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Fixed => "fixed",
            ScheduleKind::Fsf => "fsf",
            ScheduleKind::Scf => "scf",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(ScheduleKind::Fixed),
            "fsf" => Ok(ScheduleKind::Fsf),
            "scf" => Ok(ScheduleKind::Scf),
            other => Err(contract(format!(
                "unknown schedule '{other}' (expected fixed, fsf or scf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    kind: ScheduleKind,
    mu: f64,
}

impl WeightSchedule {
    pub fn new(kind: ScheduleKind, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(contract(format!("schedule weight mu must be positive, got {mu}")));
        }
        Ok(Self { kind, mu })
    }

    pub fn with_default_mu(kind: ScheduleKind) -> Self {
        Self {
            kind,
            mu: kind.default_mu(),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// One evaluation of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity: f64,
    pub continuity: f64,
    pub effective_weight: f64,
}

/// Effective continuity weight `μ′` for `q_prime` clusters.
pub fn schedule_weight(schedule: &WeightSchedule, q_prime: usize) -> Result<f64> {
    if q_prime < 1 {
        return Err(contract("q' must be at least 1"));
    }
    let q = q_prime as f64;
    Ok(match schedule.kind {
        ScheduleKind::Fixed => schedule.mu,
        ScheduleKind::Fsf => q / schedule.mu,
        ScheduleKind::Scf => schedule.mu / q,
    })
}

/// L1 distance between the q-channel responses of every vertical and
/// horizontal neighbour pair, averaged over the `(H−1)·W + H·(W−1)` pairs,
/// with its subgradient (`sign(0) = 0`).
pub fn continuity_loss(r_prime: &Tensor) -> Result<(f64, Tensor)> {
    let (q, h, w) = r_prime.dims3()?;
    if h < 2 && w < 2 {
        return Err(Error::Degenerate("continuity loss needs at least two pixels".into()));
    }
    let pairs = (h - 1) * w + h * (w - 1);
    let norm = 1.0 / pairs as f64;
    let data = r_prime.data();
    let n = h * w;
    let mut grad = vec![0.0; q * n];
    let mut sum = 0.0;
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for ch in 0..q {
        let x = &data[ch * n..(ch + 1) * n];
        let g = &mut grad[ch * n..(ch + 1) * n];
        for y in 0..h - 1 {
            for col in 0..w {
                let (a, b) = (y * w + col, (y + 1) * w + col);
                let d = x[b] - x[a];
                sum += d.abs();
                let s = sign(d) * norm;
                g[b] += s;
                g[a] -= s;
            }
        }
        for y in 0..h {
            for col in 0..w - 1 {
                let (a, b) = (y * w + col, y * w + col + 1);
                let d = x[b] - x[a];
                sum += d.abs();
                let s = sign(d) * norm;
                g[b] += s;
                g[a] -= s;
            }
        }
    }
    Ok((sum * norm, Tensor::from_parts(vec![q, h, w], grad)))
}

/// Cross-entropy of `r′` (as logits) against fixed pseudo-labels.
pub fn similarity_loss(r_prime: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    softmax_cross_entropy(r_prime, labels)
}

/// `L_sim + weight · L_con` with an explicit effective weight.
pub fn weighted_loss(r_prime: &Tensor, labels: &LabelMap, effective_weight: f64) -> Result<(LossBreakdown, Tensor)> {
    let (similarity, mut grad) = similarity_loss(r_prime, labels)?;
    let (continuity, grad_con) = continuity_loss(r_prime)?;
    for (g, c) in grad.data_mut().iter_mut().zip(grad_con.data()) {
        *g += effective_weight * c;
    }
    let breakdown = LossBreakdown {
        total: similarity + effective_weight * continuity,
        similarity,
        continuity,
        effective_weight,
    };
    Ok((breakdown, grad))
}

/// Full dynamic loss for one iteration. `μ′` is a constant here: no gradient
/// flows through `q_prime` or the labels.
pub fn total_loss(
    r_prime: &Tensor,
    labels: &LabelMap,
    schedule: &WeightSchedule,
    q_prime: usize,
) -> Result<(LossBreakdown, Tensor)> {
    let weight = schedule_weight(schedule, q_prime)?;
    weighted_loss(r_prime, labels, weight)
}
