//! Per-pixel integer label maps, used both for predicted cluster labels and
//! for ground-truth annotations.

use std::collections::BTreeSet;

use crate::error::{contract, Result};

/// An H×W map of integer labels stored row-major.
///
/// `void` marks a reserved label (255 for 8-bit annotations) whose pixels
/// carry no ground truth. Predicted maps never set it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    void: Option<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract(format!("label map must be non-empty, got {height}x{width}")));
        }
        if labels.len() != height * width {
            return Err(contract(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            void: None,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    /// Marks `label` as the void value excluded from evaluation.
    pub fn with_void(mut self, label: u32) -> Self {
        self.void = Some(label);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn void(&self) -> Option<u32> {
        self.void
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn is_void(&self, label: u32) -> bool {
        self.void == Some(label)
    }

    /// Distinct label values present, void included.
    pub fn distinct(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    /// Number of distinct non-void labels, i.e. the number of segments.
    pub fn segment_count(&self) -> usize {
        self.distinct().into_iter().filter(|&l| !self.is_void(l)).count()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Number of distinct label values in the map (q′ for a predicted labeling).
pub fn count_clusters(labels: &LabelMap) -> usize {
    labels.distinct().len()
}
