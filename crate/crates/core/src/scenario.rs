//! Ready-made synthetic scenarios for the controlled studies.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::datagen::{
    balanced_companion, power_law_sizes, ring_centers, subsample_to_sizes, synth_blobs,
    AttributeBlobs, BlobSpec, PowerLawSpec,
};
use crate::error::Result;

/// Overlapping Gaussian blobs with one rare class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobScenario {
    pub dim: usize,
    pub classes: usize,
    /// Training samples per class.
    pub train_counts: Vec<usize>,
    /// Test (and validation) samples per class.
    pub test_per_class: usize,
    pub radius: f64,
    pub spread: f64,
}

impl Default for BlobScenario {
    /// Two-dimensional, three classes, 500/500/10 training samples.
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 3,
            train_counts: vec![500, 500, 10],
            test_per_class: 3000,
            radius: 1.0,
            spread: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl BlobScenario {
    fn blobs(&self, counts: Vec<usize>, seed: u64) -> Result<Dataset> {
        synth_blobs(&BlobSpec {
            dim: self.dim,
            attributes: vec![AttributeBlobs {
                centers: ring_centers(self.classes, self.dim, self.radius),
                spread: self.spread,
                counts,
            }],
            joint_labels: None,
            seed,
        })
    }

    /// Imbalanced training set with balanced validation and test sets drawn
    /// from the same class distributions.
    pub fn generate(&self, seed: u64) -> Result<Split> {
        let balanced = vec![self.test_per_class; self.classes];
        Ok(Split {
            train: self.blobs(self.train_counts.clone(), seed)?,
            val: self.blobs(balanced.clone(), seed ^ 0x7A11_0001)?,
            test: self.blobs(balanced, seed ^ 0x7E57_0002)?,
        })
    }
}

/// Power-law subset of a balanced pool, with its equal-size balanced companion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawScenario {
    pub dim: usize,
    pub classes: usize,
    pub gamma: f64,
    pub n_max: usize,
    pub n_min: usize,
    pub test_per_class: usize,
    pub radius: f64,
    pub spread: f64,
}

impl Default for PowerLawScenario {
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 6,
            gamma: 1.0,
            n_max: 200,
            n_min: 10,
            test_per_class: 1000,
            radius: 1.0,
            spread: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerLawSplit {
    pub sizes: Vec<usize>,
    pub imbalanced: Dataset,
    pub balanced: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl PowerLawScenario {
    pub fn sizes(&self) -> Result<Vec<usize>> {
        power_law_sizes(&PowerLawSpec {
            classes: self.classes,
            gamma: self.gamma,
            n_max: self.n_max,
            n_min: self.n_min,
        })
    }

    fn blobs(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        synth_blobs(&BlobSpec {
            dim: self.dim,
            attributes: vec![AttributeBlobs {
                centers: ring_centers(self.classes, self.dim, self.radius),
                spread: self.spread,
                counts: vec![per_class; self.classes],
            }],
            joint_labels: None,
            seed,
        })
    }

    pub fn generate(&self, seed: u64) -> Result<PowerLawSplit> {
        let sizes = self.sizes()?;
        let pool = self.blobs(self.n_max, seed)?;
        Ok(PowerLawSplit {
            imbalanced: subsample_to_sizes(&pool, 0, &sizes, seed ^ 0x1B_0001)?,
            balanced: balanced_companion(&pool, 0, &sizes, seed ^ 0xBA_0002)?,
            val: self.blobs(self.test_per_class, seed ^ 0x7A11_0003)?,
            test: self.blobs(self.test_per_class, seed ^ 0x7E57_0004)?,
            sizes,
        })
    }
}
