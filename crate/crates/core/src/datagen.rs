//! Synthetic multi-label data and power-law class imbalance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Gaussian class blobs for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeBlobs {
    /// One centre per class, each of the dataset's dimension.
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    /// Exact number of samples per class.
    pub counts: Vec<usize>,
}

/// A sample's feature vector is the sum over attributes of its class centre
/// plus isotropic noise. Labels of different attributes are shuffled
/// independently unless `joint_labels` fixes them row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub attributes: Vec<AttributeBlobs>,
    #[serde(default)]
    pub joint_labels: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<usize> {
        if self.dim == 0 || self.attributes.is_empty() {
            return Err(Error::Config("blob spec needs a dimension and an attribute".into()));
        }
        let mut total = None;
        for (j, a) in self.attributes.iter().enumerate() {
            if a.centers.len() < 2 || a.centers.len() != a.counts.len() {
                return Err(Error::Config(format!(
                    "attribute {j}: need one count per centre and at least 2 classes"
                )));
            }
            if a.centers.iter().any(|c| c.len() != self.dim) {
                return Err(Error::Config(format!("attribute {j}: centre of wrong dimension")));
            }
            for x in 0..a.centers.len() {
                for y in x + 1..a.centers.len() {
                    if a.centers[x] == a.centers[y] {
                        return Err(Error::Config(format!(
                            "attribute {j}: classes {x} and {y} share a centre"
                        )));
                    }
                }
            }
            if !(a.spread > 0.0 && a.spread.is_finite()) {
                return Err(Error::Config(format!("attribute {j}: spread must be positive")));
            }
            let n: usize = a.counts.iter().sum();
            match total {
                None => total = Some(n),
                Some(t) if t != n => {
                    return Err(Error::Config(format!(
                        "attribute {j} has {n} samples, earlier attributes {t}"
                    )))
                }
                _ => {}
            }
        }
        if let Some(rows) = &self.joint_labels {
            if rows.len() != total.unwrap_or(0) {
                return Err(Error::Config("joint label table does not match the counts".into()));
            }
        }
        Ok(total.unwrap_or(0))
    }
}

pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let n = spec.validate()?;
    let class_counts: Vec<usize> = spec.attributes.iter().map(|a| a.centers.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let rows: Vec<Vec<usize>> = match &spec.joint_labels {
        Some(rows) => rows.clone(),
        None => {
            let mut columns = Vec::with_capacity(spec.attributes.len());
            for (j, a) in spec.attributes.iter().enumerate() {
                let mut col: Vec<usize> = a
                    .counts
                    .iter()
                    .enumerate()
                    .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
                    .collect();
                // the first attribute keeps class order so single-label data stays grouped
                if j > 0 {
                    col.shuffle(&mut rng);
                }
                columns.push(col);
            }
            (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
        }
    };

    let mut ds = Dataset::empty(spec.dim, class_counts)?;
    let mut x = vec![0.0; spec.dim];
    for (i, labels) in rows.iter().enumerate() {
        x.iter_mut().for_each(|v| *v = 0.0);
        for (a, &l) in spec.attributes.iter().zip(labels) {
            let centre = a.centers.get(l).ok_or(Error::LabelOutOfRange {
                label: l,
                classes: a.centers.len(),
            })?;
            for (xv, cv) in x.iter_mut().zip(centre) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xv += cv + a.spread * z;
            }
        }
        ds.push(i as u64, &x, labels)?;
    }
    Ok(ds)
}

/// Class sizes following `f(i) = a / (i^γ + b)` for `i = 1..=classes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawSpec {
    pub classes: usize,
    pub gamma: f64,
    pub n_max: usize,
    pub n_min: usize,
}

impl PowerLawSpec {
    /// Solves `f(1) = n_max` and `f(classes) = n_min` for `(a, b)`.
    pub fn solve(&self) -> Result<(f64, f64)> {
        if self.classes < 2 {
            return Err(Error::Config("power law needs at least 2 classes".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.n_min == 0 || self.n_max <= self.n_min {
            return Err(Error::Config(format!(
                "need n_max > n_min > 0, got n_max={} n_min={}",
                self.n_max, self.n_min
            )));
        }
        let (hi, lo) = (self.n_max as f64, self.n_min as f64);
        let c_gamma = (self.classes as f64).powf(self.gamma);
        let b = (lo * c_gamma - hi) / (hi - lo);
        let a = hi * (1.0 + b);
        // every denominator i^γ + b must stay positive
        if 1.0 + b <= 0.0 {
            return Err(Error::Config(format!("infeasible power law: b = {b}")));
        }
        Ok((a, b))
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

pub fn power_law_sizes(spec: &PowerLawSpec) -> Result<Vec<usize>> {
    let (a, b) = spec.solve()?;
    let mut sizes: Vec<usize> = (1..=spec.classes)
        .map(|i| round_half_up(a / ((i as f64).powf(spec.gamma) + b)))
        .collect();
    sizes[0] = spec.n_max;
    sizes[spec.classes - 1] = spec.n_min;
    Ok(sizes)
}

/// Uniform random subsample of `attribute`'s classes down to `sizes`.
/// Retained rows keep their original order.
pub fn subsample_to_sizes(ds: &Dataset, attribute: usize, sizes: &[usize], seed: u64) -> Result<Dataset> {
    if attribute >= ds.num_attributes() {
        return Err(Error::Config(format!("no attribute {attribute}")));
    }
    let groups = ds.indices_by_class(attribute);
    if sizes.len() != groups.len() {
        return Err(Error::Shape(format!(
            "{} sizes for {} classes",
            sizes.len(),
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(sizes.iter().sum());
    for (k, (members, &want)) in groups.iter().zip(sizes).enumerate() {
        if want > members.len() {
            return Err(Error::Config(format!(
                "class {k} has {} samples, {want} requested",
                members.len()
            )));
        }
        keep.extend(members.choose_multiple(&mut rng, want).copied());
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// Equal class sizes summing to `total`; the remainder goes to the lowest class ids.
pub fn balanced_sizes(total: usize, classes: usize) -> Vec<usize> {
    let base = total / classes;
    let extra = total % classes;
    (0..classes).map(|k| base + usize::from(k < extra)).collect()
}

/// Balanced control set with the same total size as `sizes`.
pub fn balanced_companion(ds: &Dataset, attribute: usize, sizes: &[usize], seed: u64) -> Result<Dataset> {
    let total = sizes.iter().sum();
    subsample_to_sizes(ds, attribute, &balanced_sizes(total, sizes.len()), seed)
}

/// Evenly spaced points on a circle of `radius` in the first two coordinates.
pub fn ring_centers(classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            let mut c = vec![0.0; dim];
            c[0] = radius * theta.cos();
            if dim > 1 {
                c[1] = radius * theta.sin();
            }
            c
        })
        .collect()
}
