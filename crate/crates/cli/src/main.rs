//! `crl`: train, evaluate and study class-rectified models on tabular data.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crl_core::baselines::Baseline;
use crl_core::config::RunConfig;
use crl_core::data::{read_dataset, write_dataset};
use crl_core::datagen::{balanced_companion, power_law_sizes, subsample_to_sizes, PowerLawSpec};
use crl_core::loss::CrlFamily;
use crl_core::mining::{ClassScope, Level};
use crl_core::model::Model;
use crl_core::scenario::{BlobScenario, PowerLawScenario};
use crl_core::study::{run_study, StudyConfig, StudyKind};
use crl_core::train::{evaluate, train, write_outputs, ThresholdAdjustment};

#[derive(Parser)]
#[command(name = "crl", version)]
#[command(about = "Batch-wise class rectification for imbalanced multi-label learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, logs and a checkpoint
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Threshold-adjustment file; defaults to threshold.json beside the model
        #[arg(long)]
        threshold: Option<PathBuf>,
        /// Ignore any threshold-adjustment file
        #[arg(long)]
        raw: bool,
        /// Comma-separated attribute names
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
        /// Write metrics.csv and metrics.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic train/val/test split
    GenData {
        /// "blobs" (three 2-D classes, one rare) or "power-law"
        #[arg(long, default_value = "blobs")]
        kind: String,
        /// TOML scenario overriding the defaults of --kind
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subsample a dataset to power-law class sizes plus a balanced companion
    SimulateImbalance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        attribute: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        n_max: usize,
        #[arg(long)]
        n_min: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a seed-averaged controlled study
    Study {
        /// gamma-sweep, kappa-sweep, rho-sweep, loss-matrix or class-scope
        #[arg(long)]
        kind: StudyKind,
        /// TOML study configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use seeds 0..N
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    /// relative, absolute, distribution or none
    #[arg(long)]
    crl_family: Option<String>,
    /// class or instance
    #[arg(long)]
    crl_level: Option<Level>,
    /// minority or all
    #[arg(long)]
    scope: Option<String>,
    /// none, over-sample, down-sample, cost-sensitive or threshold-adjust
    #[arg(long)]
    baseline: Option<Baseline>,
    #[arg(long)]
    target_label: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.train.is_some() {
            c.train = self.train.clone();
        }
        if self.val.is_some() {
            c.val = self.val.clone();
        }
        if self.test.is_some() {
            c.test = self.test.clone();
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.target_label.is_some() {
            c.target_label = self.target_label;
        }
        set!(c.optimizer.lr, self.lr);
        set!(c.optimizer.momentum, self.momentum);
        set!(c.optimizer.weight_decay, self.weight_decay);
        set!(c.optimizer.batch_size, self.batch_size);
        set!(c.optimizer.epochs, self.epochs);
        set!(c.loss.eta, self.eta);
        set!(c.loss.kappa, self.kappa);
        set!(c.loss.rho, self.rho);
        set!(c.loss.tau, self.tau);
        set!(c.loss.level, self.crl_level);
        set!(c.baseline, self.baseline);
        set!(c.model.feature_dim, self.feature_dim);
        set!(c.seed, self.seed);
        if let Some(f) = &self.crl_family {
            c.loss.family = match f.as_str() {
                "none" => None,
                other => Some(other.parse::<CrlFamily>()?),
            };
        }
        if let Some(s) = &self.scope {
            c.loss.scope = match s.as_str() {
                "minority" => ClassScope::Minority,
                "all" => ClassScope::All,
                other => bail!("unknown class scope {other:?}"),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = args.resolve()?;
    let train_path = config.train.clone().context("no training data (--train or `train` in the config)")?;
    let train_ds = read_dataset(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
    let val = config.val.as_ref().map(read_dataset).transpose()?;
    let test = config.test.as_ref().map(read_dataset).transpose()?;
    let outcome = train(&config, &train_ds, val.as_ref())?;
    let scored = test.as_ref().or(val.as_ref());
    let report = scored
        .map(|ds| evaluate(&outcome.model, ds, outcome.threshold.as_ref(), &config.attribute_names))
        .transpose()?;
    if let Some(r) = &report {
        print!("{}", r.to_table());
    }
    if let Some(t) = &outcome.threshold {
        println!("threshold exponent T = {}", t.temperature);
    }
    println!(
        "trained {} iterations on {} samples; alpha = {:?}",
        outcome.log.iterations.len(),
        outcome.log.train_size,
        outcome.log.alpha
    );
    match &config.out {
        Some(dir) => {
            write_outputs(dir, &config, &outcome, report.as_ref())?;
            println!("outputs written to {}", dir.display());
        }
        None => log::warn!("no --out directory; nothing written"),
    }
    Ok(())
}

fn run_eval(
    model: &Path,
    data: &Path,
    threshold: Option<&Path>,
    raw: bool,
    names: &[String],
    out: Option<&Path>,
) -> Result<()> {
    let m = Model::load(model).with_context(|| format!("loading {}", model.display()))?;
    let ds = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let sibling = model.with_file_name("threshold.json");
    let path = match threshold {
        Some(p) => Some(p.to_path_buf()),
        None if sibling.exists() => Some(sibling),
        None => None,
    };
    let adjust: Option<ThresholdAdjustment> = match path {
        Some(p) if !raw => Some(serde_json::from_str(&std::fs::read_to_string(&p)?)?),
        _ => None,
    };
    let report = evaluate(&m, &ds, adjust.as_ref(), names)?;
    print!("{}", report.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

fn run_gen_data(kind: &str, spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (train_ds, val, test) = match kind {
        "blobs" => {
            let s: BlobScenario = spec.map(read_toml).transpose()?.unwrap_or_default();
            let split = s.generate(seed)?;
            (split.train, split.val, split.test)
        }
        "power-law" => {
            let s: PowerLawScenario = spec.map(read_toml).transpose()?.unwrap_or_default();
            let split = s.generate(seed)?;
            write_dataset(&split.balanced, out.join("balanced.csv"))?;
            (split.imbalanced, split.val, split.test)
        }
        other => bail!("unknown data kind {other:?} (blobs or power-law)"),
    };
    write_dataset(&train_ds, out.join("train.csv"))?;
    write_dataset(&val, out.join("val.csv"))?;
    write_dataset(&test, out.join("test.csv"))?;
    println!(
        "train class sizes {:?}; written to {}",
        train_ds.class_sizes(0),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    data: &Path,
    attribute: usize,
    gamma: f64,
    n_max: usize,
    n_min: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let pool = read_dataset(data)?;
    if attribute >= pool.num_attributes() {
        bail!("dataset has {} attributes", pool.num_attributes());
    }
    let sizes = power_law_sizes(&PowerLawSpec {
        classes: pool.class_counts()[attribute],
        gamma,
        n_max,
        n_min,
    })?;
    let imbalanced = subsample_to_sizes(&pool, attribute, &sizes, seed)?;
    let balanced = balanced_companion(&pool, attribute, &sizes, seed.wrapping_add(1))?;
    std::fs::create_dir_all(out)?;
    write_dataset(&imbalanced, out.join("imbalanced.csv"))?;
    write_dataset(&balanced, out.join("balanced.csv"))?;
    println!("power-law sizes {sizes:?}");
    println!("balanced sizes  {:?}", balanced.class_sizes(attribute));
    Ok(())
}

fn run_study_cmd(
    kind: StudyKind,
    config: Option<&Path>,
    seeds: Option<u64>,
    epochs: Option<usize>,
    threads: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => StudyConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => StudyConfig::default(),
    };
    if let Some(n) = seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(e) = epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let report = run_study(kind, &cfg)?;
    print!("{}", report.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("study.csv"), report.to_csv())?;
        std::fs::write(dir.join("study_timing.csv"), report.timing_csv())?;
        std::fs::write(dir.join("study.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval {
            model,
            data,
            threshold,
            raw,
            names,
            out,
        } => run_eval(model, data, threshold.as_deref(), *raw, names, out.as_deref()),
        Command::GenData {
            kind,
            spec,
            seed,
            out,
        } => run_gen_data(kind, spec.as_deref(), *seed, out),
        Command::SimulateImbalance {
            data,
            attribute,
            gamma,
            n_max,
            n_min,
            seed,
            out,
        } => run_simulate(data, *attribute, *gamma, *n_max, *n_min, *seed, out),
        Command::Study {
            kind,
            config,
            seeds,
            epochs,
            threads,
            out,
        } => run_study_cmd(
            *kind,
            config.as_deref(),
            *seeds,
            *epochs,
            *threads,
            out.as_deref(),
        ),
    }
}
