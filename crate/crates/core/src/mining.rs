//! Top-κ hard sample mining inside one mini-batch.
//!
//! Class level ranks samples by their score on the minority class `c`:
//! hard positives are the lowest-scored class-`c` samples, hard negatives the
//! highest-scored samples of other classes. Instance level ranks by Euclidean
//! feature distance to an anchor: hard positives are the farthest same-class
//! samples, hard negatives the nearest other-class samples. Ties always go to
//! the lower sample index. All ids are row indices into the current batch.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::feature_distance;
use crate::profile::{AttributeProfile, MIN_MINABLE_COUNT};

/// Default number of hard positives and negatives kept per anchor.
pub const DEFAULT_KAPPA: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Class,
    Instance,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Class => write!(f, "class"),
            Level::Instance => write!(f, "instance"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Level::Class),
            "instance" => Ok(Level::Instance),
            other => Err(Error::Config(format!("unknown CRL level {other:?}"))),
        }
    }
}

/// Which classes provide anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScope {
    #[default]
    Minority,
    All,
}

impl std::fmt::Display for ClassScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassScope::Minority => write!(f, "minority"),
            ClassScope::All => write!(f, "all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardSets {
    pub attribute: usize,
    pub class: usize,
    pub anchor: Option<usize>,
    pub level: Level,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl HardSets {
    /// Attaches an anchor to class-level sets. The anchor is dropped from its
    /// own positives.
    pub fn with_anchor(&self, anchor: usize) -> HardSets {
        HardSets {
            anchor: Some(anchor),
            positives: self
                .positives
                .iter()
                .copied()
                .filter(|&p| p != anchor)
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Target class whose score defines class-level distances.
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub anchor: usize,
    pub other: usize,
    pub class: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSets {
    pub positive: Vec<Pair>,
    pub negative: Vec<Pair>,
}

fn check_kappa(kappa: usize) -> Result<()> {
    if kappa == 0 {
        Err(Error::Config("kappa must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn take_sorted(mut keyed: Vec<(f64, usize)>, descending: bool, kappa: usize) -> Vec<usize> {
    keyed.sort_by(|a, b| {
        let ord = if descending {
            b.0.total_cmp(&a.0)
        } else {
            a.0.total_cmp(&b.0)
        };
        match ord {
            Ordering::Equal => a.1.cmp(&b.1),
            o => o,
        }
    });
    keyed.into_iter().take(kappa).map(|(_, i)| i).collect()
}

/// `scores[i]` is sample `i`'s predicted probability of class `class`.
pub fn mine_class_level(
    scores: &[f64],
    labels: &[usize],
    class: usize,
    attribute: usize,
    kappa: usize,
) -> Result<HardSets> {
    check_kappa(kappa)?;
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        if l == class {
            pos.push((s, i));
        } else {
            neg.push((s, i));
        }
    }
    Ok(HardSets {
        attribute,
        class,
        anchor: None,
        level: Level::Class,
        positives: take_sorted(pos, false, kappa),
        negatives: take_sorted(neg, true, kappa),
    })
}

/// `features[i]` is sample `i`'s attribute feature vector.
pub fn mine_instance_level<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[usize],
    anchor: usize,
    class: usize,
    attribute: usize,
    kappa: usize,
) -> Result<HardSets> {
    check_kappa(kappa)?;
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if anchor >= labels.len() || labels[anchor] != class {
        return Err(Error::Contract(format!(
            "anchor {anchor} is not a sample of class {class}"
        )));
    }
    let a = features[anchor].as_ref();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, (f, &l)) in features.iter().zip(labels).enumerate() {
        if i == anchor {
            continue;
        }
        let d = feature_distance(a, f.as_ref())?;
        if l == class {
            pos.push((d, i));
        } else {
            neg.push((d, i));
        }
    }
    Ok(HardSets {
        attribute,
        class,
        anchor: Some(anchor),
        level: Level::Instance,
        positives: take_sorted(pos, true, kappa),
        negatives: take_sorted(neg, false, kappa),
    })
}

/// Every (anchor, positive, negative) combination of an anchored hard set.
pub fn build_triplets(hard: &HardSets) -> Vec<Triplet> {
    let Some(anchor) = hard.anchor else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(hard.positives.len() * hard.negatives.len());
    for &p in &hard.positives {
        for &n in &hard.negatives {
            out.push(Triplet {
                anchor,
                positive: p,
                negative: n,
                class: hard.class,
            });
        }
    }
    out
}

pub fn build_pairs(hard: &HardSets) -> PairSets {
    let Some(anchor) = hard.anchor else {
        return PairSets::default();
    };
    let pair = |other| Pair {
        anchor,
        other,
        class: hard.class,
    };
    PairSets {
        positive: hard.positives.iter().map(|&p| pair(p)).collect(),
        negative: hard.negatives.iter().map(|&n| pair(n)).collect(),
    }
}

/// Classes whose samples serve as anchors for one attribute of one batch.
pub fn anchor_classes(profile: &AttributeProfile, scope: ClassScope) -> Vec<usize> {
    match scope {
        ClassScope::Minority => profile.minable.clone(),
        ClassScope::All => (0..profile.histogram.len())
            .filter(|&k| profile.histogram[k] >= MIN_MINABLE_COUNT)
            .collect(),
    }
}

/// Anchored hard sets for every anchor of one attribute in one batch.
///
/// `scores` is the `[batch, |Z_j|]` score matrix (row-major) and `features`
/// the `[batch, dim]` feature matrix; only the one matching `level` is read.
#[allow(clippy::too_many_arguments)]
pub fn mine_attribute(
    level: Level,
    profile: &AttributeProfile,
    scope: ClassScope,
    scores: &[f64],
    features: &[f64],
    feature_dim: usize,
    labels: &[usize],
    attribute: usize,
    kappa: usize,
) -> Result<Vec<HardSets>> {
    let classes = profile.histogram.len();
    let n = labels.len();
    let mut out = Vec::new();
    let feature_rows: Vec<&[f64]> = match level {
        Level::Instance => features.chunks(feature_dim).collect(),
        Level::Class => Vec::new(),
    };
    for c in anchor_classes(profile, scope) {
        let anchors: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        match level {
            Level::Class => {
                let col: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
                let sets = mine_class_level(&col, labels, c, attribute, kappa)?;
                out.extend(anchors.iter().map(|&a| sets.with_anchor(a)));
            }
            Level::Instance => {
                for &a in &anchors {
                    out.push(mine_instance_level(
                        &feature_rows,
                        labels,
                        a,
                        c,
                        attribute,
                        kappa,
                    )?);
                }
            }
        }
    }
    Ok(out)
}
