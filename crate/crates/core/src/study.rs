//! Controlled studies: parameter sweeps averaged over seeds.
//!
//! Every grid point is trained once per seed. Jobs run in parallel on the
//! rayon pool but results are assembled in grid order, so the report CSV is
//! identical between runs with the same seeds. Wall-clock numbers go to a
//! separate timing table.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, OptimizerConfig, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{CrlFamily, LossConfig};
use crate::mining::{ClassScope, Level};
use crate::profile::minority_classes;
use crate::scenario::{BlobScenario, PowerLawScenario};
use crate::train::{evaluate, train};

/// Fewest seeds a study may average over.
pub const MIN_SEEDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    GammaSweep,
    KappaSweep,
    RhoSweep,
    LossMatrix,
    ClassScope,
}

impl std::str::FromStr for StudyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma-sweep" => Ok(StudyKind::GammaSweep),
            "kappa-sweep" => Ok(StudyKind::KappaSweep),
            "rho-sweep" => Ok(StudyKind::RhoSweep),
            "loss-matrix" => Ok(StudyKind::LossMatrix),
            "class-scope" => Ok(StudyKind::ClassScope),
            other => Err(Error::Config(format!("unknown study {other:?}"))),
        }
    }
}

impl std::fmt::Display for StudyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudyKind::GammaSweep => "gamma-sweep",
            StudyKind::KappaSweep => "kappa-sweep",
            StudyKind::RhoSweep => "rho-sweep",
            StudyKind::LossMatrix => "loss-matrix",
            StudyKind::ClassScope => "class-scope",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// CRL settings every grid point starts from.
    pub loss: LossConfig,
    /// Data for the κ, ρ, loss-matrix and class-scope studies.
    pub blobs: BlobScenario,
    /// Data for the γ sweep; its `gamma` is replaced by each grid value.
    pub power_law: PowerLawScenario,
    pub gammas: Vec<f64>,
    pub kappas: Vec<usize>,
    pub rhos: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: (0..MIN_SEEDS as u64).collect(),
            model: ModelConfig {
                trunk: vec![32],
                feature_dim: 16,
            },
            optimizer: OptimizerConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0005,
                // the scenarios hold about a thousand samples: one batch per epoch
                batch_size: 4096,
                epochs: 400,
            },
            loss: LossConfig::default(),
            blobs: BlobScenario::default(),
            power_law: PowerLawScenario::default(),
            gammas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            kappas: vec![1, 25, 50, 100, 175],
            rhos: vec![0.1, 0.3, 0.5],
        }
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self, kind: StudyKind) -> Result<()> {
        if self.seeds.len() < MIN_SEEDS {
            return Err(Error::Config(format!(
                "studies average over at least {MIN_SEEDS} seeds, got {}",
                self.seeds.len()
            )));
        }
        let empty = match kind {
            StudyKind::GammaSweep => self.gammas.is_empty(),
            StudyKind::KappaSweep => self.kappas.is_empty(),
            StudyKind::RhoSweep => self.rhos.is_empty(),
            _ => false,
        };
        if empty {
            return Err(Error::Config(format!("{kind}: empty parameter grid")));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("gamma must be positive, got {g}")));
        }
        if self.kappas.contains(&0) {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if let Some(r) = self.rhos.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {r}")));
        }
        Ok(())
    }

    fn run_config(&self, loss: LossConfig, seed: u64) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            loss,
            seed,
            ..RunConfig::default()
        }
    }
}

/// Which data a job trains on.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Data {
    Blobs,
    PowerLaw { gamma: f64, balanced: bool },
}

#[derive(Debug, Clone)]
struct Job {
    data: Data,
    loss: LossConfig,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct JobResult {
    balanced_accuracy: f64,
    minority_sensitivity: f64,
    instability: f64,
    seconds: f64,
}

/// Seed-averaged outcome of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub point: String,
    /// A_bln of the grid point's configuration.
    pub balanced_accuracy: f64,
    pub balanced_accuracy_std: f64,
    /// A_bln of cross-entropy alone on the same data.
    pub reference: f64,
    /// A_bln of cross-entropy on the balanced companion (γ sweep only).
    pub companion: Option<f64>,
    /// Mean sensitivity on the training-set minority classes.
    pub minority_sensitivity: f64,
    /// Mean coefficient of variation of the loss over the second half of training.
    pub instability: f64,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub flag: String,
    /// Per-seed A_bln, in seed order; `None` for failed runs.
    pub per_seed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<StudyRow>,
    /// Wall-clock seconds per row, summed over seeds.
    pub seconds: Vec<f64>,
    pub failures: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl StudyReport {
    /// Deterministic results table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "point,balanced_accuracy,balanced_accuracy_std,reference,companion,minority_sensitivity,instability,seeds_ok,seeds_failed,flag,per_seed\n",
        );
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{},{},{}",
                r.point,
                r.balanced_accuracy,
                r.balanced_accuracy_std,
                r.reference,
                fmt_opt(r.companion),
                r.minority_sensitivity,
                r.instability,
                r.seeds_ok,
                r.seeds_failed,
                r.flag,
                per.join(";")
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("point,seconds\n");
        for (r, t) in self.rows.iter().zip(&self.seconds) {
            let _ = writeln!(s, "{},{t:.3}", r.point);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} over {} seeds", self.kind, self.seeds.len());
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>7} {:>8} {:>8} {:>8} {:>7} {:>8}  flag",
            "point", "A_bln", "std", "CE ref", "balanced", "minority", "instab", "time[s]"
        );
        for (r, t) in self.rows.iter().zip(&self.seconds) {
            let companion = r.companion.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<24} {:>8.4} {:>7.4} {:>8.4} {:>8} {:>8.4} {:>7.4} {:>8.1}  {}",
                r.point,
                r.balanced_accuracy,
                r.balanced_accuracy_std,
                r.reference,
                companion,
                r.minority_sensitivity,
                r.instability,
                t,
                r.flag
            );
        }
        for f in &self.failures {
            let _ = writeln!(s, "failed: {f}");
        }
        s
    }
}

/// One grid point: its label, the CRL configuration and its data.
struct Point {
    label: String,
    loss: LossConfig,
    data: Data,
    flag: String,
}

fn grid(kind: StudyKind, cfg: &StudyConfig) -> Vec<Point> {
    let base = &cfg.loss;
    let point = |label: String, loss: LossConfig| Point {
        label,
        loss,
        data: Data::Blobs,
        flag: String::new(),
    };
    match kind {
        StudyKind::GammaSweep => cfg
            .gammas
            .iter()
            .map(|&gamma| Point {
                label: format!("gamma={gamma}"),
                loss: base.clone(),
                data: Data::PowerLaw {
                    gamma,
                    balanced: false,
                },
                flag: String::new(),
            })
            .collect(),
        StudyKind::KappaSweep => cfg
            .kappas
            .iter()
            .map(|&kappa| {
                let mut p = point(
                    format!("kappa={kappa}"),
                    LossConfig {
                        kappa,
                        ..base.clone()
                    },
                );
                if kappa == 1 {
                    // a single positive and negative per anchor gives a noisy, unstable signal
                    p.flag = "unstable-convergence".into();
                }
                p
            })
            .collect(),
        StudyKind::RhoSweep => cfg
            .rhos
            .iter()
            .map(|&rho| {
                point(
                    format!("rho={rho}"),
                    LossConfig {
                        rho,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        StudyKind::LossMatrix => {
            let mut out = Vec::new();
            for level in [Level::Class, Level::Instance] {
                for family in [CrlFamily::Relative, CrlFamily::Absolute, CrlFamily::Distribution] {
                    out.push(point(
                        format!("{family}/{level}"),
                        LossConfig {
                            family: Some(family),
                            level,
                            ..base.clone()
                        },
                    ));
                }
            }
            out
        }
        StudyKind::ClassScope => [ClassScope::Minority, ClassScope::All]
            .into_iter()
            .map(|scope| {
                point(
                    format!("scope={}", scope_name(scope)),
                    LossConfig {
                        scope,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

fn scope_name(s: ClassScope) -> &'static str {
    match s {
        ClassScope::Minority => "minority",
        ClassScope::All => "all",
    }
}

/// Coefficient of variation of the loss over the second half of the iterations.
fn instability(totals: &[f64]) -> f64 {
    let tail = &totals[totals.len() / 2..];
    if tail.len() < 2 {
        return 0.0;
    }
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if mean.abs() > 0.0 {
        var.sqrt() / mean.abs()
    } else {
        0.0
    }
}

fn load(cfg: &StudyConfig, data: Data, seed: u64) -> Result<(Dataset, Dataset)> {
    match data {
        Data::Blobs => {
            let s = cfg.blobs.generate(seed)?;
            Ok((s.train, s.test))
        }
        Data::PowerLaw { gamma, balanced } => {
            let s = PowerLawScenario {
                gamma,
                ..cfg.power_law.clone()
            }
            .generate(seed)?;
            Ok((if balanced { s.balanced } else { s.imbalanced }, s.test))
        }
    }
}

fn run_job(cfg: &StudyConfig, job: &Job) -> Result<JobResult> {
    let start = Instant::now();
    let (train_ds, test_ds) = load(cfg, job.data, job.seed)?;
    let run = cfg.run_config(job.loss.clone(), job.seed);
    let outcome = train(&run, &train_ds, None)?;
    let report = evaluate(&outcome.model, &test_ds, None, &[])?;
    let minority = minority_classes(&train_ds.class_sizes(0), crate::profile::DEFAULT_RHO)?.minority;
    let sens: Vec<f64> = minority
        .iter()
        .filter_map(|&k| report.attributes[0].sensitivity[k])
        .collect();
    let totals: Vec<f64> = outcome.log.iterations.iter().map(|r| r.total).collect();
    Ok(JobResult {
        balanced_accuracy: report.mean_balanced_accuracy,
        minority_sensitivity: if sens.is_empty() {
            f64::NAN
        } else {
            sens.iter().sum::<f64>() / sens.len() as f64
        },
        instability: instability(&totals),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Runs every grid point of `kind` over all seeds.
///
/// A failing run is recorded in [`StudyReport::failures`] and excluded from
/// its row's averages; the sweep carries on.
pub fn run_study(kind: StudyKind, cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate(kind)?;
    let points = grid(kind, cfg);
    let ce = LossConfig::cross_entropy_only();

    // references first: CE on each data variant, then the grid itself
    let mut ref_data: Vec<Data> = Vec::new();
    for p in &points {
        let mut variants = vec![p.data];
        if let Data::PowerLaw { gamma, .. } = p.data {
            variants.push(Data::PowerLaw {
                gamma,
                balanced: true,
            });
        }
        for d in variants {
            if !ref_data.contains(&d) {
                ref_data.push(d);
            }
        }
    }
    let mut jobs = Vec::new();
    for &d in &ref_data {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                data: d,
                loss: ce.clone(),
                seed,
            });
        }
    }
    let n_ref = jobs.len();
    for p in &points {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                data: p.data,
                loss: p.loss.clone(),
                seed,
            });
        }
    }

    let results: Vec<Result<JobResult>> = jobs.par_iter().map(|j| run_job(cfg, j)).collect();

    let n_seeds = cfg.seeds.len();
    let mut failures = Vec::new();
    let describe = |job: &Job| format!("{:?} seed {}", job.data, job.seed);
    for (job, r) in jobs.iter().zip(&results) {
        if let Err(e) = r {
            failures.push(format!("{}: {e}", describe(job)));
        }
    }
    let ref_mean = |d: Data| -> f64 {
        let k = ref_data.iter().position(|x| *x == d).expect("reference data");
        let ok: Vec<f64> = results[n_ref_slice(k, n_seeds)]
            .iter()
            .filter_map(|r| r.as_ref().ok().map(|r| r.balanced_accuracy))
            .collect();
        mean(&ok)
    };

    let mut rows = Vec::with_capacity(points.len());
    let mut seconds = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let chunk = &results[n_ref + i * n_seeds..n_ref + (i + 1) * n_seeds];
        let ok: Vec<&JobResult> = chunk.iter().filter_map(|r| r.as_ref().ok()).collect();
        let acc: Vec<f64> = ok.iter().map(|r| r.balanced_accuracy).collect();
        let minority: Vec<f64> = ok
            .iter()
            .map(|r| r.minority_sensitivity)
            .filter(|v| v.is_finite())
            .collect();
        let companion = match p.data {
            Data::PowerLaw { gamma, .. } => Some(ref_mean(Data::PowerLaw {
                gamma,
                balanced: true,
            })),
            Data::Blobs => None,
        };
        rows.push(StudyRow {
            point: p.label.clone(),
            balanced_accuracy: mean(&acc),
            balanced_accuracy_std: std_dev(&acc),
            reference: ref_mean(p.data),
            companion,
            minority_sensitivity: mean(&minority),
            instability: mean(&ok.iter().map(|r| r.instability).collect::<Vec<_>>()),
            seeds_ok: ok.len(),
            seeds_failed: n_seeds - ok.len(),
            flag: p.flag.clone(),
            per_seed: chunk
                .iter()
                .map(|r| r.as_ref().ok().map(|r| r.balanced_accuracy))
                .collect(),
        });
        seconds.push(ok.iter().map(|r| r.seconds).sum());
    }
    Ok(StudyReport {
        kind,
        seeds: cfg.seeds.clone(),
        rows,
        seconds,
        failures,
    })
}

fn n_ref_slice(k: usize, n_seeds: usize) -> std::ops::Range<usize> {
    k * n_seeds..(k + 1) * n_seeds
}
