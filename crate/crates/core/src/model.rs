//! Shared-trunk multi-branch classifier.
//!
//! The trunk is a stack of ReLU fully-connected layers. Each attribute gets a
//! branch of two ReLU layers (the second one is the attribute feature vector)
//! followed by a bias-free linear classifier and a softmax.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "CRL-MODEL-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    pub feature_dim: usize,
    /// `|Z_j|` per attribute.
    pub class_counts: Vec<usize>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, trunk_widths: Vec<usize>, class_counts: Vec<usize>) -> Self {
        Self {
            input_dim,
            trunk_widths,
            feature_dim: 64,
            class_counts,
        }
    }

    pub fn with_feature_dim(mut self, feature_dim: usize) -> Self {
        self.feature_dim = feature_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.trunk_widths.contains(&0) {
            return Err(Error::Contract("layer widths must be positive".into()));
        }
        if self.class_counts.is_empty() {
            return Err(Error::Contract("model needs at least one attribute".into()));
        }
        if self.class_counts.iter().any(|&c| c < 2) {
            return Err(Error::Contract(
                "every attribute needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: glorot(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub hidden: Linear,
    pub feature: Linear,
    /// `[feature_dim, |Z_j|]`, no bias.
    pub classifier: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    pub trunk: Vec<Linear>,
    pub branches: Vec<Branch>,
}

/// Parameter leaves of a model bound into a graph, in [`Model::parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchNodes {
    pub features: NodeId,
    pub logits: NodeId,
    pub scores: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    /// `[batch, feature_dim]`
    pub features: Tensor,
    /// `[batch, |Z_j|]`, rows sum to one.
    pub scores: Tensor,
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive extents")
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(spec.trunk_widths.len());
    let mut width = spec.input_dim;
    for &w in &spec.trunk_widths {
        trunk.push(Linear::init(width, w, &mut rng));
        width = w;
    }
    let branches = spec
        .class_counts
        .iter()
        .map(|&c| Branch {
            hidden: Linear::init(width, spec.feature_dim, &mut rng),
            feature: Linear::init(spec.feature_dim, spec.feature_dim, &mut rng),
            classifier: glorot(spec.feature_dim, c, &mut rng),
        })
        .collect();
    Ok(Model {
        spec: spec.clone(),
        seed,
        trunk,
        branches,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), &l.weight));
            out.push((format!("trunk.{i}.bias"), &l.bias));
        }
        for (j, b) in self.branches.iter().enumerate() {
            out.push((format!("branch.{j}.hidden.weight"), &b.hidden.weight));
            out.push((format!("branch.{j}.hidden.bias"), &b.hidden.bias));
            out.push((format!("branch.{j}.feature.weight"), &b.feature.weight));
            out.push((format!("branch.{j}.feature.bias"), &b.feature.bias));
            out.push((format!("branch.{j}.classifier"), &b.classifier));
        }
        out
    }

    /// Same order as [`Model::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for b in &mut self.branches {
            out.push(&mut b.hidden.weight);
            out.push(&mut b.hidden.bias);
            out.push(&mut b.feature.weight);
            out.push(&mut b.feature.bias);
            out.push(&mut b.classifier);
        }
        out
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundModel {
        BoundModel {
            params: self
                .parameters()
                .into_iter()
                .map(|(_, t)| graph.leaf(t.clone()))
                .collect(),
        }
    }

    /// Builds the forward pass for `input` (`[batch, input_dim]`) on `graph`.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        bound: &BoundModel,
        input: NodeId,
    ) -> Result<Vec<BranchNodes>> {
        let cols = graph.value(input).cols();
        if graph.value(input).shape().len() != 2 || cols != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "batch has shape {:?}, model expects {} columns",
                graph.value(input).shape(),
                self.spec.input_dim
            )));
        }
        let p = &bound.params;
        let dense = |g: &mut Graph, x: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
            let h = g.matmul(x, w)?;
            let h = g.add_bias(h, b)?;
            Ok(g.relu(h)?)
        };
        let mut h = input;
        let mut k = 0;
        for _ in &self.trunk {
            h = dense(graph, h, p[k], p[k + 1])?;
            k += 2;
        }
        let mut out = Vec::with_capacity(self.branches.len());
        for _ in &self.branches {
            let hidden = dense(graph, h, p[k], p[k + 1])?;
            let features = dense(graph, hidden, p[k + 2], p[k + 3])?;
            let logits = graph.matmul(features, p[k + 4])?;
            let scores = graph.softmax(logits)?;
            out.push(BranchNodes {
                features,
                logits,
                scores,
            });
            k += 5;
        }
        Ok(out)
    }

    /// Plain forward pass. `batch` is `[rows, input_dim]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Vec<BranchOutput>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let input = graph.leaf(batch.clone());
        let nodes = self.forward_graph(&mut graph, &bound, input)?;
        Ok(nodes
            .into_iter()
            .map(|n| BranchOutput {
                features: graph.value(n.features).clone(),
                scores: graph.value(n.scores).clone(),
            })
            .collect())
    }

    pub fn to_checkpoint_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_HEADER}");
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(
            s,
            "spec input_dim={} trunk={} feature_dim={} classes={}",
            self.spec.input_dim,
            join(&self.spec.trunk_widths),
            self.spec.feature_dim,
            join(&self.spec.class_counts)
        );
        let _ = writeln!(s, "seed {}", self.seed);
        for (name, t) in self.parameters() {
            let _ = writeln!(s, "tensor {name} {}", join(t.shape()));
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s.push_str("end\n");
        s
    }

    pub fn from_checkpoint_text(text: &str) -> Result<Model> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unexpected end of checkpoint, wanted {what}"),
            })
        };
        let (n, header) = next("header")?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected {CHECKPOINT_HEADER:?}, got {header:?}"),
            });
        }
        let (n, spec_line) = next("spec")?;
        let spec = parse_spec_line(spec_line).map_err(|msg| Error::Parse { line: n, msg })?;
        let (n, seed_line) = next("seed")?;
        let seed = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::Parse {
                line: n,
                msg: "bad seed line".into(),
            })?;
        let mut model = build_model(&spec, seed)?;
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.parameters_mut()) {
            let (n, decl) = next("tensor")?;
            let mut parts = decl.split_whitespace();
            let ok = parts.next() == Some("tensor") && parts.next() == Some(name.as_str());
            let shape: Option<Vec<usize>> = parts
                .next()
                .and_then(|s| s.split(',').map(|d| d.parse().ok()).collect());
            if !ok || shape.as_deref() != Some(slot.shape()) {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("expected tensor {name} with shape {:?}", slot.shape()),
                });
            }
            let (n, values) = next("values")?;
            let vals: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: n,
                    msg: e.to_string(),
                })?;
            if vals.len() != slot.numel() {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("{name}: expected {} values, got {}", slot.numel(), vals.len()),
                });
            }
            slot.data_mut().copy_from_slice(&vals);
        }
        let (n, end) = next("end")?;
        if end.trim() != "end" {
            return Err(Error::Parse {
                line: n,
                msg: "missing end marker".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Self::from_checkpoint_text(&fs::read_to_string(path)?)
    }
}

fn parse_spec_line(line: &str) -> std::result::Result<ModelSpec, String> {
    let rest = line.strip_prefix("spec ").ok_or("missing spec line")?;
    let list = |v: &str| -> std::result::Result<Vec<usize>, String> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|d| d.parse().map_err(|_| format!("bad list {v:?}")))
            .collect()
    };
    let (mut input, mut trunk, mut feat, mut classes) = (None, Some(Vec::new()), None, None);
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or(format!("bad field {kv:?}"))?;
        match k {
            "input_dim" => input = v.parse().ok(),
            "trunk" => trunk = Some(list(v)?),
            "feature_dim" => feat = v.parse().ok(),
            "classes" => classes = Some(list(v)?),
            _ => return Err(format!("unknown spec key {k:?}")),
        }
    }
    match (input, trunk, feat, classes) {
        (Some(input_dim), Some(trunk_widths), Some(feature_dim), Some(class_counts)) => {
            Ok(ModelSpec {
                input_dim,
                trunk_widths,
                feature_dim,
                class_counts,
            })
        }
        _ => Err("incomplete spec line".into()),
    }
}

/// Euclidean distance between two feature vectors.
pub fn feature_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "feature vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
