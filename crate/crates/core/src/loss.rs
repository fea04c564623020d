//! Cross-entropy, the three CRL families and the imbalance-adaptive objective.
//!
//! Every loss is built on an [`autodiff::Graph`](crate::autodiff::Graph) so it
//! can be differentiated. Class-level distances compare scores on the
//! anchor's target class: `d(a,+) = |p_a - p_+|` and `d(a,-) = p_a - p_-`
//! (signed, so a negative scored above the anchor widens the hinge).
//! Instance-level distances are Euclidean in the attribute feature space.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mining::{build_pairs, build_triplets, ClassScope, HardSets, Level, Pair, Triplet};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
/// Margin for class-level relative comparison.
pub const CLASS_RELATIVE_MARGIN: f64 = 0.5;
pub const CLASS_ABSOLUTE_MARGIN: f64 = 0.5;
pub const INSTANCE_ABSOLUTE_MARGIN: f64 = 1.0;
pub const DEFAULT_TAU: usize = 20;
pub const DEFAULT_ETA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrlFamily {
    Relative,
    Absolute,
    Distribution,
}

impl std::fmt::Display for CrlFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CrlFamily::Relative => write!(f, "relative"),
            CrlFamily::Absolute => write!(f, "absolute"),
            CrlFamily::Distribution => write!(f, "distribution"),
        }
    }
}

impl std::str::FromStr for CrlFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(CrlFamily::Relative),
            "absolute" => Ok(CrlFamily::Absolute),
            "distribution" => Ok(CrlFamily::Distribution),
            other => Err(Error::Config(format!("unknown CRL family {other:?}"))),
        }
    }
}

/// CRL settings, including the mining knobs that feed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `None` (written `"none"`) trains with cross-entropy only.
    #[serde(with = "family_text")]
    pub family: Option<CrlFamily>,
    pub level: Level,
    pub eta: f64,
    pub kappa: usize,
    pub rho: f64,
    pub scope: ClassScope,
    /// Histogram bins for the distribution family.
    pub tau: usize,
    /// Overrides the level-dependent relative margin.
    pub relative_margin: Option<f64>,
    /// Overrides the level-dependent absolute margin.
    pub absolute_margin: Option<f64>,
}

mod family_text {
    use super::CrlFamily;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<CrlFamily>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(f) => f.serialize(s),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<CrlFamily>, D::Error> {
        let text = String::deserialize(d)?;
        if text == "none" {
            return Ok(None);
        }
        text.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            family: Some(CrlFamily::Relative),
            level: Level::Class,
            eta: DEFAULT_ETA,
            kappa: crate::mining::DEFAULT_KAPPA,
            rho: crate::profile::DEFAULT_RHO,
            scope: ClassScope::Minority,
            tau: DEFAULT_TAU,
            relative_margin: None,
            absolute_margin: None,
        }
    }
}

impl LossConfig {
    pub fn cross_entropy_only() -> Self {
        Self {
            family: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.tau < 2 {
            return Err(Error::Config(format!("tau must be at least 2, got {}", self.tau)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        Ok(())
    }

    /// `m_j` for relative comparison on an attribute with `classes` classes.
    pub fn relative_margin(&self, classes: usize) -> Result<f64> {
        match (self.relative_margin, self.level) {
            (Some(m), _) => Ok(m),
            (None, Level::Class) => Ok(CLASS_RELATIVE_MARGIN),
            (None, Level::Instance) => class_margin(classes),
        }
    }

    pub fn absolute_margin(&self) -> f64 {
        self.absolute_margin.unwrap_or(match self.level {
            Level::Class => CLASS_ABSOLUTE_MARGIN,
            Level::Instance => INSTANCE_ABSOLUTE_MARGIN,
        })
    }
}

/// Arc length between neighbouring class centres spread evenly on the unit circle.
pub fn class_margin(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "class margin needs at least 2 classes, got {classes}"
        )));
    }
    Ok(2.0 * PI / classes as f64)
}

/// Where pair distances are measured.
#[derive(Debug, Clone, Copy)]
pub enum Embedding {
    /// `[batch, classes]` softmax scores.
    Scores { node: NodeId, classes: usize },
    /// `[batch, dim]` attribute features.
    Features { node: NodeId },
}

impl Embedding {
    pub fn level(&self) -> Level {
        match self {
            Embedding::Scores { .. } => Level::Class,
            Embedding::Features { .. } => Level::Instance,
        }
    }
}

/// Distances for `(anchor, other, class)` pairs as a 1-D node.
///
/// With `signed`, class-level distances are `p_a - p_other`; otherwise their
/// absolute value. Instance-level distances are always Euclidean.
pub fn pair_distances(
    g: &mut Graph,
    embedding: Embedding,
    pairs: &[(usize, usize, usize)],
    signed: bool,
) -> Result<NodeId> {
    match embedding {
        Embedding::Scores { node, classes } => {
            let a = g.gather(node, pairs.iter().map(|p| p.0 * classes + p.2).collect())?;
            let o = g.gather(node, pairs.iter().map(|p| p.1 * classes + p.2).collect())?;
            let diff = g.sub(a, o)?;
            Ok(if signed { diff } else { g.abs(diff)? })
        }
        Embedding::Features { node } => {
            let a = g.select_rows(node, pairs.iter().map(|p| p.0).collect())?;
            let o = g.select_rows(node, pairs.iter().map(|p| p.1).collect())?;
            let diff = g.sub(a, o)?;
            let sq = g.square(diff)?;
            let ss = g.sum_rows(sq)?;
            Ok(g.sqrt(ss)?)
        }
    }
}

fn pair_keys(pairs: &[Pair]) -> Vec<(usize, usize, usize)> {
    pairs.iter().map(|p| (p.anchor, p.other, p.class)).collect()
}

/// Per-attribute cross-entropy terms and their sum.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub total: NodeId,
    pub per_attribute: Vec<NodeId>,
}

/// `-(1/n) Σ_i Σ_j w_j(a_ij) log p(y_ij = a_ij)`.
///
/// `scores[j]` is attribute `j`'s `[n, |Z_j|]` score node, `labels[j]` its
/// ground truth. `class_weights[j][k]`, when given, scales samples of class `k`.
pub fn cross_entropy(
    g: &mut Graph,
    scores: &[NodeId],
    labels: &[Vec<usize>],
    class_weights: Option<&[Vec<f64>]>,
) -> Result<CrossEntropy> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score nodes for {} label columns",
            scores.len(),
            labels.len()
        )));
    }
    let mut per_attribute = Vec::with_capacity(scores.len());
    for (j, (&s, lab)) in scores.iter().zip(labels).enumerate() {
        let shape = g.value(s).shape().to_vec();
        if shape.len() != 2 || shape[0] != lab.len() {
            return Err(Error::Shape(format!(
                "attribute {j}: scores {shape:?} for {} labels",
                lab.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = lab.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let picked = g.gather(s, lab.iter().enumerate().map(|(i, &l)| i * classes + l).collect())?;
        let floored = g.max_const(picked, LOG_FLOOR)?;
        let mut logp = g.log(floored)?;
        if let Some(w) = class_weights {
            let per_sample = lab.iter().map(|&l| w[j][l]).collect();
            let wn = g.leaf(crate::autodiff::Tensor::vector(per_sample)?);
            logp = g.mul(logp, wn)?;
        }
        let m = g.mean(logp)?;
        per_attribute.push(g.neg(m)?);
    }
    let total = sum_nodes(g, &per_attribute)?;
    Ok(CrossEntropy {
        total,
        per_attribute,
    })
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Triplet ranking CRL: mean over triplets of `max(0, m + d(a,+) - d(a,-))`.
pub fn crl_relative(
    g: &mut Graph,
    embedding: Embedding,
    triplets: &[Triplet],
    margin: f64,
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let pos: Vec<_> = triplets.iter().map(|t| (t.anchor, t.positive, t.class)).collect();
    let neg: Vec<_> = triplets.iter().map(|t| (t.anchor, t.negative, t.class)).collect();
    let d_pos = pair_distances(g, embedding, &pos, false)?;
    let d_neg = pair_distances(g, embedding, &neg, true)?;
    let gap = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(gap, margin)?;
    let hinge = g.relu(shifted)?;
    Ok(g.mean(hinge)?)
}

/// Contrastive CRL: `½ (mean_{P+} d² + mean_{P-} max(m - d, 0)²)`, an empty
/// side contributing nothing.
pub fn crl_absolute(g: &mut Graph, embedding: Embedding, pairs: &PairSets, margin: f64) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(2);
    if !pairs.positive.is_empty() {
        let d = pair_distances(g, embedding, &pair_keys(&pairs.positive), false)?;
        let sq = g.square(d)?;
        terms.push(g.mean(sq)?);
    }
    if !pairs.negative.is_empty() {
        let d = pair_distances(g, embedding, &pair_keys(&pairs.negative), true)?;
        let nd = g.neg(d)?;
        let slack = g.add_scalar(nd, margin)?;
        let hinge = g.relu(slack)?;
        let sq = g.square(hinge)?;
        terms.push(g.mean(sq)?);
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let sum = sum_nodes(g, &terms)?;
    Ok(g.scale(sum, 0.5)?)
}

pub use crate::mining::PairSets;

/// Bin range for the distribution family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramRange {
    pub lo: f64,
    pub hi: f64,
}

impl HistogramRange {
    /// `[-1, 1]` at class level; `[0, max observed distance]` at instance level.
    pub fn for_level(level: Level, observed: &[f64]) -> Self {
        match level {
            Level::Class => Self { lo: -1.0, hi: 1.0 },
            Level::Instance => {
                let max = observed.iter().cloned().fold(0.0, f64::max);
                Self {
                    lo: 0.0,
                    hi: if max > 0.0 { max } else { 1.0 },
                }
            }
        }
    }

    pub fn bin_width(&self, tau: usize) -> f64 {
        (self.hi - self.lo) / (tau - 1) as f64
    }
}

/// Soft histogram of a 1-D distance node with linear assignment to the two
/// nearest of `tau` evenly spaced bins. Returns one scalar node per bin.
pub fn soft_histogram(g: &mut Graph, distances: NodeId, tau: usize, range: HistogramRange) -> Result<Vec<NodeId>> {
    if tau < 2 {
        return Err(Error::Config(format!("tau must be at least 2, got {tau}")));
    }
    if range.hi.is_nan() || range.lo.is_nan() || range.hi <= range.lo {
        return Err(Error::Config(format!("empty histogram range {range:?}")));
    }
    let delta = range.bin_width(tau);
    // clamp into [lo, hi]
    let above = g.add_scalar(distances, -range.lo)?;
    let above = g.relu(above)?;
    let low_clamped = g.add_scalar(above, range.lo)?;
    let below = g.neg(low_clamped)?;
    let below = g.add_scalar(below, range.hi)?;
    let below = g.relu(below)?;
    let below = g.neg(below)?;
    let clamped = g.add_scalar(below, range.hi)?;

    let mut bins = Vec::with_capacity(tau);
    for t in 0..tau {
        let centre = range.lo + delta * t as f64;
        let off = g.add_scalar(clamped, -centre)?;
        let off = g.abs(off)?;
        let w = g.scale(off, -1.0 / delta)?;
        let w = g.add_scalar(w, 1.0)?;
        let w = g.relu(w)?;
        bins.push(g.mean(w)?);
    }
    Ok(bins)
}

/// Histogram overlap `Σ_t h⁺_t Σ_{k≤t} h⁻_k` between positive and negative
/// distance distributions.
pub fn histogram_overlap(
    g: &mut Graph,
    d_pos: NodeId,
    d_neg: NodeId,
    tau: usize,
    range: HistogramRange,
) -> Result<NodeId> {
    let hp = soft_histogram(g, d_pos, tau, range)?;
    let hn = soft_histogram(g, d_neg, tau, range)?;
    let mut cum = hn[0];
    let mut total = g.mul(hp[0], cum)?;
    for t in 1..tau {
        cum = g.add(cum, hn[t])?;
        let term = g.mul(hp[t], cum)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Distribution CRL over mined pairs; zero unless both sides are nonempty.
pub fn crl_distribution(g: &mut Graph, embedding: Embedding, pairs: &PairSets, tau: usize) -> Result<NodeId> {
    if pairs.positive.is_empty() || pairs.negative.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let d_pos = pair_distances(g, embedding, &pair_keys(&pairs.positive), false)?;
    let d_neg = pair_distances(g, embedding, &pair_keys(&pairs.negative), true)?;
    let observed: Vec<f64> = g
        .value(d_pos)
        .data()
        .iter()
        .chain(g.value(d_neg).data())
        .copied()
        .collect();
    let range = HistogramRange::for_level(embedding.level(), &observed);
    histogram_overlap(g, d_pos, d_neg, tau, range)
}

/// CRL term of one attribute from its anchored hard sets, or `None` when the
/// batch offered no anchors.
pub fn attribute_crl(
    g: &mut Graph,
    config: &LossConfig,
    embedding: Embedding,
    hard_sets: &[HardSets],
    classes: usize,
) -> Result<Option<NodeId>> {
    let Some(family) = config.family else {
        return Ok(None);
    };
    if hard_sets.is_empty() {
        return Ok(None);
    }
    let node = match family {
        CrlFamily::Relative => {
            let triplets: Vec<Triplet> = hard_sets.iter().flat_map(build_triplets).collect();
            crl_relative(g, embedding, &triplets, config.relative_margin(classes)?)?
        }
        CrlFamily::Absolute | CrlFamily::Distribution => {
            let mut pairs = PairSets::default();
            for h in hard_sets {
                let p = build_pairs(h);
                pairs.positive.extend(p.positive);
                pairs.negative.extend(p.negative);
            }
            if family == CrlFamily::Absolute {
                crl_absolute(g, embedding, &pairs, config.absolute_margin())?
            } else {
                crl_distribution(g, embedding, &pairs, config.tau)?
            }
        }
    };
    Ok(Some(node))
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if let Some(a) = alpha.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::Config(format!("CRL weight {a} outside [0, 1)")));
    }
    Ok(())
}

/// `Σ_j α_j L_crl^j + (1 - α_j) L_ce^j`. A missing CRL term counts as zero;
/// `α_j = 0` passes `L_ce^j` through untouched.
pub fn combined_loss(
    g: &mut Graph,
    ce: &[NodeId],
    crl: &[Option<NodeId>],
    alpha: &[f64],
) -> Result<NodeId> {
    if ce.is_empty() || ce.len() != crl.len() || ce.len() != alpha.len() {
        return Err(Error::Shape(format!(
            "{} CE terms, {} CRL terms, {} weights",
            ce.len(),
            crl.len(),
            alpha.len()
        )));
    }
    check_alpha(alpha)?;
    let mut terms = Vec::with_capacity(ce.len());
    for ((&c, r), &a) in ce.iter().zip(crl).zip(alpha) {
        if a == 0.0 {
            terms.push(c);
            continue;
        }
        let kept = g.scale(c, 1.0 - a)?;
        terms.push(match r {
            Some(r) => {
                let w = g.scale(*r, a)?;
                g.add(w, kept)?
            }
            None => kept,
        });
    }
    sum_nodes(g, &terms)
}

/// Scalar form of [`combined_loss`], used to audit logged components.
pub fn combine_values(ce: &[f64], crl: &[f64], alpha: &[f64]) -> Result<f64> {
    if ce.len() != crl.len() || ce.len() != alpha.len() {
        return Err(Error::Shape("component lengths differ".into()));
    }
    check_alpha(alpha)?;
    Ok(ce
        .iter()
        .zip(crl)
        .zip(alpha)
        .map(|((&c, &r), &a)| if a == 0.0 { c } else { a * r + (1.0 - a) * c })
        .sum())
}
