//! Mini-batch training and evaluation.
//!
//! Each batch runs forward → batch profiling → hard mining → combined loss →
//! backward → SGD-momentum step with L2 weight decay. Everything random is
//! derived from the run seed, so a run is reproducible bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::baselines::{
    argmax, cost_weights, down_sample, over_sample, over_sample_multi, threshold_adjust, Baseline,
    ClassRatios,
};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{attribute_crl, combined_loss, cross_entropy, Embedding};
use crate::metrics::MetricsReport;
use crate::mining::mine_attribute;
use crate::model::{build_model, Model};
use crate::profile::{profile_batch, ImbalanceWeights};

/// Candidate exponents for threshold adjustment.
pub const THRESHOLD_CANDIDATES: std::ops::RangeInclusive<u32> = 1..=5;
/// Replica budget of greedy multi-label over-sampling, as a multiple of the set size.
const MULTI_LABEL_GROWTH: usize = 4;
const EVAL_CHUNK: usize = 1024;

/// Loss components of one SGD step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub batch_size: usize,
    /// `L_ce` per attribute.
    pub ce: Vec<f64>,
    /// `L_crl` per attribute; `None` when no CRL term was formed.
    pub crl: Vec<Option<f64>>,
    /// The optimised objective `L_bln`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_balanced_accuracy: Option<f64>,
}

/// Accumulated wall-clock seconds per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub forward: f64,
    pub profile_and_mine: f64,
    pub loss: f64,
    pub backward: f64,
    pub update: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub train_size: usize,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub timing: PhaseTiming,
}

impl TrainLog {
    /// Per-iteration components. Timing is left out so the file is
    /// reproducible across runs.
    pub fn to_csv(&self) -> String {
        let n_attr = self.alpha.len();
        let mut s = String::from("iteration,epoch,batch_size");
        for j in 0..n_attr {
            let _ = write!(s, ",ce_{j}");
        }
        for j in 0..n_attr {
            let _ = write!(s, ",crl_{j}");
        }
        s.push_str(",total\n");
        for r in &self.iterations {
            let _ = write!(s, "{},{},{}", r.iteration, r.epoch, r.batch_size);
            for v in &r.ce {
                let _ = write!(s, ",{v:e}");
            }
            for v in &r.crl {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v:e}");
                    }
                    None => s.push_str(",NA"),
                }
            }
            let _ = writeln!(s, ",{:e}", r.total);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,val_balanced_accuracy\n");
        for e in &self.epochs {
            let val = e
                .val_balanced_accuracy
                .map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{:e},{val}", e.epoch, e.mean_loss);
        }
        s
    }
}

/// Test-time threshold adjustment fitted on the training class ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAdjustment {
    pub temperature: u32,
    /// Training-set class ratios per attribute.
    pub ratios: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub threshold: Option<ThresholdAdjustment>,
}

/// Applies the configured resampling baseline to the training set.
pub fn prepare_training_set(config: &RunConfig, ds: &Dataset) -> Result<Dataset> {
    let seed = config.seed ^ 0x5EED_0001;
    let target = config.target_label.unwrap_or(0);
    match config.baseline {
        Baseline::OverSample => {
            if config.target_label.is_none() && ds.num_attributes() > 1 {
                over_sample_multi(ds, seed, MULTI_LABEL_GROWTH)
            } else {
                over_sample(ds, target, seed)
            }
        }
        Baseline::DownSample => down_sample(ds, target, seed),
        _ => Ok(ds.clone()),
    }
}

fn diverged(iteration: usize, msg: impl Into<String>) -> Error {
    Error::Divergence {
        iteration,
        msg: msg.into(),
    }
}

fn as_divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(AutodiffError::NonFinite { node, op }) => {
            diverged(iteration, format!("non-finite value at node {node} ({op})"))
        }
        other => other,
    }
}

struct Step {
    ce: Vec<f64>,
    crl: Vec<Option<f64>>,
    total: f64,
    grads: Vec<Tensor>,
}

fn batch_step(
    model: &Model,
    config: &RunConfig,
    ds: &Dataset,
    rows: &[usize],
    alpha: &[f64],
    class_weights: Option<&[Vec<f64>]>,
    timing: &mut PhaseTiming,
) -> Result<Step> {
    let class_counts = ds.class_counts();
    let n_attr = class_counts.len();
    let t = Instant::now();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.leaf(Tensor::matrix(rows.len(), ds.dim(), ds.feature_matrix(rows))?);
    let branches = model.forward_graph(&mut g, &bound, x)?;
    timing.forward += t.elapsed().as_secs_f64();

    let labels: Vec<Vec<usize>> = (0..n_attr)
        .map(|j| rows.iter().map(|&i| ds.label(i, j)).collect())
        .collect();

    let t = Instant::now();
    let mut hard = vec![Vec::new(); n_attr];
    if alpha.iter().any(|&a| a > 0.0) {
        let profiles = profile_batch(&labels, class_counts, config.loss.rho)?;
        for j in 0..n_attr {
            if alpha[j] == 0.0 {
                continue;
            }
            hard[j] = mine_attribute(
                config.loss.level,
                &profiles[j],
                config.loss.scope,
                g.value(branches[j].scores).data(),
                g.value(branches[j].features).data(),
                model.spec().feature_dim,
                &labels[j],
                j,
                config.loss.kappa,
            )?;
        }
    }
    timing.profile_and_mine += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let scores: Vec<_> = branches.iter().map(|b| b.scores).collect();
    let ce = cross_entropy(&mut g, &scores, &labels, class_weights)?;
    let mut crl = Vec::with_capacity(n_attr);
    for j in 0..n_attr {
        let embedding = match config.loss.level {
            crate::mining::Level::Class => Embedding::Scores {
                node: branches[j].scores,
                classes: class_counts[j],
            },
            crate::mining::Level::Instance => Embedding::Features {
                node: branches[j].features,
            },
        };
        crl.push(if alpha[j] > 0.0 {
            attribute_crl(&mut g, &config.loss, embedding, &hard[j], class_counts[j])?
        } else {
            None
        });
    }
    let total = combined_loss(&mut g, &ce.per_attribute, &crl, alpha)?;
    timing.loss += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let grads = g.backward(total)?;
    let grads = bound
        .params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(p).shape()))
        })
        .collect();
    timing.backward += t.elapsed().as_secs_f64();

    Ok(Step {
        ce: ce.per_attribute.iter().map(|&n| g.value(n).item()).collect(),
        crl: crl.iter().map(|c| c.map(|n| g.value(n).item())).collect(),
        total: g.value(total).item(),
        grads,
    })
}

/// Trains a model on `train`, reading hyper-parameters from `config`.
///
/// `val`, when given, is scored after every epoch and used to pick the
/// threshold-adjustment exponent. On divergence the last good model is
/// written to `<out>/last_good.ckpt` (when an output directory is set) and
/// [`Error::Divergence`] is returned.
pub fn train(config: &RunConfig, train: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::Contract("training needs at least two samples".into()));
    }
    let ds = prepare_training_set(config, train)?;
    let counts: Vec<Vec<usize>> = (0..ds.num_attributes()).map(|j| ds.class_sizes(j)).collect();
    let weights = ImbalanceWeights::from_counts(&counts, config.loss.eta)?;
    let alpha = if config.loss.family.is_some() {
        weights.alpha.clone()
    } else {
        vec![0.0; counts.len()]
    };
    let ratios = ClassRatios::from_dataset(&ds)?;
    let class_weights: Option<Vec<Vec<f64>>> = (config.baseline == Baseline::CostSensitive)
        .then(|| ratios.0.iter().map(|r| cost_weights(r)).collect());

    let spec = config.model.spec(ds.dim(), ds.class_counts());
    let mut model = build_model(&spec, config.seed)?;
    let mut velocity: Vec<Tensor> = model
        .parameters()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let opt = &config.optimizer;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x0BA7_C4E5));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = TrainLog {
        omega: weights.omega.clone(),
        alpha: alpha.clone(),
        train_size: ds.len(),
        iterations: Vec::new(),
        epochs: Vec::new(),
        timing: PhaseTiming::default(),
    };
    let names = config.attribute_names.clone();

    let mut iteration = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for rows in order.chunks(opt.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            let step = batch_step(
                &model,
                config,
                &ds,
                rows,
                &alpha,
                class_weights.as_deref(),
                &mut log.timing,
            )
            .map_err(|e| as_divergence(iteration, e));
            let step = match step {
                Ok(s) => s,
                Err(e) => return Err(abort(config, &model, e)),
            };
            if !step.total.is_finite() || step.grads.iter().any(|g| !g.all_finite()) {
                let e = diverged(iteration, "non-finite loss or gradient");
                return Err(abort(config, &model, e));
            }

            let t = Instant::now();
            let before = model.clone();
            for ((p, v), gr) in model
                .parameters_mut()
                .into_iter()
                .zip(velocity.iter_mut())
                .zip(&step.grads)
            {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                    *vv = opt.momentum * *vv + gv + opt.weight_decay * *pv;
                    *pv -= opt.lr * *vv;
                }
            }
            if model.parameters().iter().any(|(_, t)| !t.all_finite()) {
                let e = diverged(iteration, "parameters became non-finite");
                return Err(abort(config, &before, e));
            }
            log.timing.update += t.elapsed().as_secs_f64();

            loss_sum += step.total;
            steps += 1;
            log.iterations.push(IterationRecord {
                iteration,
                epoch,
                batch_size: rows.len(),
                ce: step.ce,
                crl: step.crl,
                total: step.total,
            });
            iteration += 1;
        }
        let t = Instant::now();
        let val_balanced_accuracy = match val {
            Some(v) => Some(evaluate(&model, v, None, &names)?.mean_balanced_accuracy),
            None => None,
        };
        log.timing.validation += t.elapsed().as_secs_f64();
        log::debug!(
            "epoch {epoch}: mean loss {:.6}, val A_bln {val_balanced_accuracy:?}",
            loss_sum / steps.max(1) as f64
        );
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            val_balanced_accuracy,
        });
    }

    let threshold = if config.baseline == Baseline::ThresholdAdjust {
        let holdout = match val {
            Some(v) => v,
            None => {
                log::warn!("no validation split; threshold exponent chosen on the training set");
                &ds
            }
        };
        Some(select_threshold(&model, holdout, &ratios.0, &names)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        model,
        log,
        threshold,
    })
}

fn abort(config: &RunConfig, last_good: &Model, e: Error) -> Error {
    if let Some(out) = &config.out {
        let path = out.join("last_good.ckpt");
        let saved = std::fs::create_dir_all(out).map_err(Error::from).and_then(|_| last_good.save(&path));
        match saved {
            Ok(()) => log::error!("{e}; last good model written to {}", path.display()),
            Err(w) => log::error!("{e}; could not write {}: {w}", path.display()),
        }
    }
    e
}

/// Picks the exponent in [`THRESHOLD_CANDIDATES`] with the best mean
/// balanced accuracy on `holdout`; ties go to the smallest exponent.
pub fn select_threshold(
    model: &Model,
    holdout: &Dataset,
    ratios: &[Vec<f64>],
    names: &[String],
) -> Result<ThresholdAdjustment> {
    let mut best: Option<(f64, u32)> = None;
    for t in THRESHOLD_CANDIDATES {
        let adjust = ThresholdAdjustment {
            temperature: t,
            ratios: ratios.to_vec(),
        };
        let score = evaluate(model, holdout, Some(&adjust), names)?.mean_balanced_accuracy;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, t));
        }
    }
    let (_, temperature) = best.expect("non-empty candidate range");
    Ok(ThresholdAdjustment {
        temperature,
        ratios: ratios.to_vec(),
    })
}

/// Score matrices per attribute for every row of `ds`.
pub fn predict_scores(model: &Model, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    if ds.dim() != model.spec().input_dim {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            ds.dim(),
            model.spec().input_dim
        )));
    }
    if ds.class_counts() != model.spec().class_counts.as_slice() {
        return Err(Error::Shape(format!(
            "dataset classes {:?}, model classes {:?}",
            ds.class_counts(),
            model.spec().class_counts
        )));
    }
    let mut out = vec![Vec::new(); ds.num_attributes()];
    let all: Vec<usize> = (0..ds.len()).collect();
    for rows in all.chunks(EVAL_CHUNK) {
        let batch = Tensor::matrix(rows.len(), ds.dim(), ds.feature_matrix(rows))?;
        for (j, b) in model.forward(&batch)?.into_iter().enumerate() {
            out[j].extend_from_slice(b.scores.data());
        }
    }
    Ok(out)
}

/// Arg-max predictions per attribute, optionally after threshold adjustment.
pub fn predict(
    model: &Model,
    ds: &Dataset,
    adjust: Option<&ThresholdAdjustment>,
) -> Result<Vec<Vec<usize>>> {
    let scores = predict_scores(model, ds)?;
    let counts = &model.spec().class_counts;
    scores
        .iter()
        .enumerate()
        .map(|(j, s)| {
            s.chunks(counts[j])
                .map(|row| match adjust {
                    Some(a) => threshold_adjust(row, &a.ratios[j], a.temperature).map(|r| r.1),
                    None => Ok(argmax(row)),
                })
                .collect()
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    adjust: Option<&ThresholdAdjustment>,
    names: &[String],
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let predictions = predict(model, ds, adjust)?;
    let labels: Vec<Vec<usize>> = (0..ds.num_attributes()).map(|j| ds.label_column(j)).collect();
    MetricsReport::from_predictions(names, ds.class_counts(), &predictions, &labels)
}

#[derive(Serialize)]
struct Report<'a> {
    config: &'a RunConfig,
    omega: &'a [f64],
    alpha: &'a [f64],
    train_size: usize,
    iterations: usize,
    epochs: &'a [EpochRecord],
    timing: &'a PhaseTiming,
    threshold: Option<&'a ThresholdAdjustment>,
    metrics: Option<&'a MetricsReport>,
}

/// Writes `model.ckpt`, `trainlog.csv`, `epochs.csv`, `report.json`,
/// `threshold.json` (threshold-adjust runs) and `metrics.csv` (when a report
/// is given) into `dir`.
pub fn write_outputs(
    dir: &Path,
    config: &RunConfig,
    outcome: &TrainOutcome,
    metrics: Option<&MetricsReport>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    outcome.model.save(dir.join("model.ckpt"))?;
    std::fs::write(dir.join("trainlog.csv"), outcome.log.to_csv())?;
    std::fs::write(dir.join("epochs.csv"), outcome.log.epochs_csv())?;
    if let Some(t) = &outcome.threshold {
        std::fs::write(dir.join("threshold.json"), serde_json::to_string_pretty(t)?)?;
    }
    if let Some(m) = metrics {
        std::fs::write(dir.join("metrics.csv"), m.to_csv())?;
    }
    let report = Report {
        config,
        omega: &outcome.log.omega,
        alpha: &outcome.log.alpha,
        train_size: outcome.log.train_size,
        iterations: outcome.log.iterations.len(),
        epochs: &outcome.log.epochs,
        timing: &outcome.log.timing,
        threshold: outcome.threshold.as_ref(),
        metrics,
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
