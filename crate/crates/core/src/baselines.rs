//! Classical imbalanced-learning baselines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::profile::imbalance_measure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    OverSample,
    DownSample,
    CostSensitive,
    ThresholdAdjust,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "over-sample" => Ok(Baseline::OverSample),
            "down-sample" => Ok(Baseline::DownSample),
            "cost-sensitive" => Ok(Baseline::CostSensitive),
            "threshold-adjust" => Ok(Baseline::ThresholdAdjust),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Baseline::None => "none",
            Baseline::OverSample => "over-sample",
            Baseline::DownSample => "down-sample",
            Baseline::CostSensitive => "cost-sensitive",
            Baseline::ThresholdAdjust => "threshold-adjust",
        };
        f.write_str(s)
    }
}

/// Training-set class ratios `r_k = n_k / n`, one vector per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatios(pub Vec<Vec<f64>>);

impl ClassRatios {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Contract("class ratios of an empty dataset".into()));
        }
        let n = ds.len() as f64;
        Ok(Self(
            (0..ds.num_attributes())
                .map(|j| ds.class_sizes(j).iter().map(|&c| c as f64 / n).collect())
                .collect(),
        ))
    }
}

/// `w_k = exp(-r_k)`.
pub fn cost_weights(ratios: &[f64]) -> Vec<f64> {
    ratios.iter().map(|r| (-r).exp()).collect()
}

/// Replicates random members of every smaller class of `target` until all
/// classes match the largest one. Replicas are appended after the originals.
pub fn over_sample(ds: &Dataset, target: usize, seed: u64) -> Result<Dataset> {
    check_target(ds, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = ds.indices_by_class(target);
    let max = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    for (k, members) in groups.iter().enumerate() {
        if members.is_empty() {
            log::warn!("over-sampling: class {k} of attribute {target} is empty, skipped");
            continue;
        }
        for _ in members.len()..max {
            rows.push(members[rng.gen_range(0..members.len())]);
        }
    }
    Ok(ds.select(&rows))
}

/// Keeps a uniform random subset of every class of `target`, sized to the
/// smallest nonempty class. Retained rows keep their original order.
pub fn down_sample(ds: &Dataset, target: usize, seed: u64) -> Result<Dataset> {
    check_target(ds, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = ds.indices_by_class(target);
    let min = groups
        .iter()
        .map(Vec::len)
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    let mut keep = Vec::new();
    for (k, members) in groups.iter().enumerate() {
        if members.is_empty() {
            log::warn!("down-sampling: class {k} of attribute {target} is empty, skipped");
            continue;
        }
        keep.extend(members.choose_multiple(&mut rng, min).copied());
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

fn check_target(ds: &Dataset, target: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot resample an empty dataset".into()));
    }
    if target >= ds.num_attributes() {
        return Err(Error::Config(format!(
            "target attribute {target} but dataset has {}",
            ds.num_attributes()
        )));
    }
    Ok(())
}

/// Multi-label over-sampling. Repeatedly takes the most imbalanced attribute,
/// and among the samples of its smallest class replicates the one whose labels
/// sit in below-maximum classes for the most attributes. Stops once a replica
/// no longer lowers the mean imbalance, or after `max_growth × len` replicas.
pub fn over_sample_multi(ds: &Dataset, seed: u64, max_growth: usize) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot resample an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_attr = ds.num_attributes();
    let mut counts: Vec<Vec<usize>> = (0..n_attr).map(|j| ds.class_sizes(j)).collect();
    let mean_omega = |counts: &[Vec<usize>]| -> f64 {
        counts
            .iter()
            .map(|c| imbalance_measure(c).unwrap_or(0.0))
            .sum::<f64>()
            / counts.len() as f64
    };
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    let mut current = mean_omega(&counts);
    for _ in 0..max_growth * ds.len() {
        let worst = (0..n_attr)
            .map(|j| (imbalance_measure(&counts[j]).unwrap_or(0.0), j))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .expect("at least one attribute");
        if worst.0 == 0.0 {
            break;
        }
        let j = worst.1;
        let smallest = (0..counts[j].len())
            .filter(|&k| counts[j][k] > 0)
            .min_by_key(|&k| (counts[j][k], k))
            .expect("nonempty dataset has a nonempty class");
        let candidates: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i, j) == smallest).collect();
        let score = |i: usize| -> usize {
            (0..n_attr)
                .filter(|&a| {
                    let max = *counts[a].iter().max().unwrap();
                    counts[a][ds.label(i, a)] < max
                })
                .count()
        };
        let best = candidates.iter().map(|&i| score(i)).max().unwrap_or(0);
        let top: Vec<usize> = candidates.into_iter().filter(|&i| score(i) == best).collect();
        let pick = top[rng.gen_range(0..top.len())];
        for (a, c) in counts.iter_mut().enumerate() {
            c[ds.label(pick, a)] += 1;
        }
        let next = mean_omega(&counts);
        if next >= current {
            break;
        }
        current = next;
        rows.push(pick);
    }
    Ok(ds.select(&rows))
}

/// `p̃_k = p_k · exp(-r_k · T)` and its argmax (first index on ties).
pub fn threshold_adjust(scores: &[f64], ratios: &[f64], temperature: u32) -> Result<(Vec<f64>, usize)> {
    if temperature == 0 {
        return Err(Error::Config("threshold-adjustment T must be a positive integer".into()));
    }
    if scores.len() != ratios.len() || scores.is_empty() {
        return Err(Error::Shape(format!(
            "{} scores for {} class ratios",
            scores.len(),
            ratios.len()
        )));
    }
    let t = temperature as f64;
    let adjusted: Vec<f64> = scores
        .iter()
        .zip(ratios)
        .map(|(p, r)| p * (-r * t).exp())
        .collect();
    Ok((adjusted.clone(), argmax(&adjusted)))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}
