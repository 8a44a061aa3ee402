//! Best-match mean IoU for unsupervised segmentation and the BSD500-style
//! All / Fine / Coarse / Mean aggregation over multiple annotations.
//!
//! Each ground-truth segment is scored by the best IoU any predicted cluster
//! achieves against it (clusters may be reused across segments); the image
//! score is the unweighted mean over segments. Ground-truth pixels carrying
//! the map's void label are dropped from both intersections and unions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::labels::LabelMap;

/// `|pred ∩ gt| / |pred ∪ gt|`; 0 when `pred` is empty.
pub fn intersection_over_union(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(contract(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut gt_count = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
        gt_count += g as usize;
    }
    if gt_count == 0 {
        return Err(contract("ground-truth mask is empty"));
    }
    Ok(inter as f64 / union as f64)
}

fn dense_ids(labels: impl Iterator<Item = u32>) -> BTreeMap<u32, usize> {
    let mut ids = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    ids
}

/// Best-match mIOU of a predicted labeling against one annotation.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(contract(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let valid: Vec<(u32, u32)> = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(_, &g)| !gt.is_void(g))
        .map(|(&p, &g)| (p, g))
        .collect();
    if valid.is_empty() {
        return Err(contract("ground truth has no labeled pixels"));
    }
    let gt_ids = dense_ids(valid.iter().map(|&(_, g)| g));
    let pred_ids = dense_ids(valid.iter().map(|&(p, _)| p));
    let (ng, np) = (gt_ids.len(), pred_ids.len());

    let mut joint = vec![0usize; ng * np];
    let mut gt_size = vec![0usize; ng];
    let mut pred_size = vec![0usize; np];
    for (p, g) in &valid {
        let (gi, pi) = (gt_ids[g], pred_ids[p]);
        joint[gi * np + pi] += 1;
        gt_size[gi] += 1;
        pred_size[pi] += 1;
    }

    let mut total = 0.0;
    for gi in 0..ng {
        let best = (0..np)
            .filter(|&pi| joint[gi * np + pi] > 0)
            .map(|pi| {
                let inter = joint[gi * np + pi];
                inter as f64 / (gt_size[gi] + pred_size[pi] - inter) as f64
            })
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / ng as f64)
}

/// Non-empty set of annotations for one image, all the same size.
#[derive(Debug, Clone)]
pub struct GroundTruthSet {
    annotations: Vec<LabelMap>,
}

impl GroundTruthSet {
    pub fn new(annotations: Vec<LabelMap>) -> Result<Self> {
        let first = annotations
            .first()
            .ok_or_else(|| contract("ground-truth set is empty"))?;
        if let Some((i, a)) = annotations.iter().enumerate().find(|(_, a)| a.dims() != first.dims()) {
            return Err(contract(format!(
                "annotation {i} is {:?}, annotation 0 is {:?}",
                a.dims(),
                first.dims()
            )));
        }
        Ok(Self { annotations })
    }

    pub fn annotations(&self) -> &[LabelMap] {
        &self.annotations
    }

    /// Index of the annotation with the most segments (first on ties).
    pub fn finest(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.annotations.iter().enumerate() {
            if a.segment_count() > self.annotations[best].segment_count() {
                best = i;
            }
        }
        best
    }

    /// Index of the annotation with the fewest segments (first on ties).
    pub fn coarsest(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.annotations.iter().enumerate() {
            if a.segment_count() < self.annotations[best].segment_count() {
                best = i;
            }
        }
        best
    }
}

/// Per-image scores under the three annotation-selection rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdScores {
    pub all: f64,
    pub fine: f64,
    pub coarse: f64,
}

pub fn bsd_variants(pred: &LabelMap, gts: &GroundTruthSet) -> Result<BsdScores> {
    let scores = gts
        .annotations
        .iter()
        .map(|gt| mean_iou(pred, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(BsdScores {
        all: scores.iter().sum::<f64>() / scores.len() as f64,
        fine: scores[gts.finest()],
        coarse: scores[gts.coarsest()],
    })
}

/// Dataset-level averages of per-image scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub all: f64,
    pub fine: f64,
    pub coarse: f64,
    /// `(all + fine + coarse) / 3`.
    pub mean: f64,
    pub images: usize,
}

/// Averages per-image scores; `None` when there are none.
pub fn aggregate(scores: &[BsdScores]) -> Option<Aggregate> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let all = scores.iter().map(|s| s.all).sum::<f64>() / n;
    let fine = scores.iter().map(|s| s.fine).sum::<f64>() / n;
    let coarse = scores.iter().map(|s| s.coarse).sum::<f64>() / n;
    Some(Aggregate {
        all,
        fine,
        coarse,
        mean: (all + fine + coarse) / 3.0,
        images: scores.len(),
    })
}
