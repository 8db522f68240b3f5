//! Experiment configuration: one JSON document, overridable by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use wiener_cubature::estimator::{
    brownian_sine_problem, decay_sine_problem, geometric_sine_problem, BenchProblem,
    ConvergenceConfig,
};
use wiener_cubature::recombination::RadiusPolicy;
use wiener_cubature::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormulaStage {
    pub degree: usize,
    pub dim: usize,
    /// Degree of the words checked; defaults to the formula degree.
    pub verify_degree: Option<usize>,
}

impl Default for FormulaStage {
    fn default() -> Self {
        FormulaStage {
            degree: 5,
            dim: 1,
            verify_degree: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionStage {
    pub horizon: f64,
    pub k: usize,
    pub gamma: f64,
}

impl Default for PartitionStage {
    fn default() -> Self {
        PartitionStage {
            horizon: 1.0,
            k: 10,
            gamma: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessStage {
    pub basis_degree: usize,
    pub radius: RadiusPolicy,
}

impl Default for PreprocessStage {
    fn default() -> Self {
        PreprocessStage {
            basis_degree: 4,
            radius: RadiusPolicy::Hormander { p_star: 1.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    /// `dX = dB` from 0.
    BrownianSine,
    /// `dX = b X dB` from 1.
    GeometricSine { b: f64 },
    /// `dX = -X dt` from 1, no noise.
    DecaySine,
}

impl ProblemSpec {
    pub fn build(&self) -> BenchProblem {
        match *self {
            ProblemSpec::BrownianSine => brownian_sine_problem(),
            ProblemSpec::GeometricSine { b } => geometric_sine_problem(b),
            ProblemSpec::DecaySine => decay_sine_problem(),
        }
    }

    fn parse(name: &str, b: Option<f64>) -> Result<Self> {
        Ok(match name {
            "brownian_sine" => ProblemSpec::BrownianSine,
            "geometric_sine" => ProblemSpec::GeometricSine {
                b: b.unwrap_or(1.0),
            },
            "decay_sine" => ProblemSpec::DecaySine,
            other => bail!(
                "unknown problem {other:?}; expected brownian_sine, geometric_sine or decay_sine"
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateStage {
    pub problem: ProblemSpec,
    /// Recombine the tree before summing (ignored when a table file is given).
    pub use_table: bool,
    pub steps_per_segment: usize,
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub mc_seed: u64,
}

impl Default for EstimateStage {
    fn default() -> Self {
        EstimateStage {
            problem: ProblemSpec::BrownianSine,
            use_table: true,
            steps_per_segment: 32,
            mc_paths: 10_000,
            mc_steps: 500,
            mc_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchStage {
    pub problem: ProblemSpec,
    pub sweep: ConvergenceConfig,
}

impl Default for BenchStage {
    fn default() -> Self {
        BenchStage {
            problem: ProblemSpec::GeometricSine { b: 1.0 },
            sweep: ConvergenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Formula JSON used by preprocess and estimate instead of a built-in one.
    pub formula_file: Option<PathBuf>,
    /// Weight table JSON used by estimate.
    pub table_file: Option<PathBuf>,
    pub formula: FormulaStage,
    pub partition: PartitionStage,
    pub preprocess: PreprocessStage,
    pub estimate: EstimateStage,
    pub bench: BenchStage,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            out: PathBuf::from("out"),
            formula_file: None,
            table_file: None,
            formula: FormulaStage::default(),
            partition: PartitionStage::default(),
            preprocess: PreprocessStage::default(),
            estimate: EstimateStage::default(),
            bench: BenchStage::default(),
            train: TrainConfig::default(),
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stage_seed(root: u64, stage: u64) -> u64 {
    mix(root.wrapping_add(stage.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Flags shared by every subcommand; a flag wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config, or a manifest written by an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Formula degree (odd).
    #[arg(long)]
    pub degree: Option<usize>,
    /// Driving (and, for training, latent) dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Check the formula against words up to this degree.
    #[arg(long)]
    pub verify_degree: Option<usize>,
    /// Number of subintervals.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Total degree of the recombination test functions.
    #[arg(long)]
    pub basis_degree: Option<usize>,
    /// Hörmander order for the localization radii.
    #[arg(long)]
    pub p_star: Option<f64>,
    /// ODE steps per linear piece of a cubature path.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub mc_paths: Option<usize>,
    #[arg(long)]
    pub mc_steps: Option<usize>,
    /// brownian_sine, geometric_sine or decay_sine.
    #[arg(long)]
    pub problem: Option<String>,
    /// Volatility of geometric_sine.
    #[arg(long)]
    pub b: Option<f64>,
    /// Sum the full tree instead of a recombined table.
    #[arg(long)]
    pub raw: bool,
    /// Comma-separated partition sizes for bench.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Comma-separated Monte Carlo path counts for bench.
    #[arg(long, value_delimiter = ',')]
    pub mc_ns: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Formula JSON to use instead of constructing one.
    #[arg(long)]
    pub formula: Option<PathBuf>,
    /// Weight table JSON for estimate.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // a manifest carries its config under "config"
    if value.get("command").is_some() && value.get("config").is_some() {
        value = value["config"].take();
    }
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

impl Overrides {
    /// Config file (if any), then flags, then derived stage seeds.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = &self.formula {
            c.formula_file = Some(v.clone());
        }
        if let Some(v) = &self.table {
            c.table_file = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.degree {
            c.formula.degree = v;
            c.bench.sweep.degree = v;
            c.train.cubature.degree = v;
        }
        if let Some(v) = self.dim {
            c.formula.dim = v;
            c.train.dim = v;
        }
        if let Some(v) = self.verify_degree {
            c.formula.verify_degree = Some(v);
        }
        if let Some(v) = self.k {
            c.partition.k = v;
            c.train.cubature.k = v;
        }
        if let Some(v) = self.gamma {
            c.partition.gamma = v;
            c.bench.sweep.gamma = v;
            c.train.cubature.gamma = v;
        }
        if let Some(v) = self.horizon {
            c.partition.horizon = v;
            c.train.data.horizon = v;
        }
        if let Some(v) = self.basis_degree {
            c.preprocess.basis_degree = v;
            c.bench.sweep.basis_degree = v;
            if let Some(t) = c.train.cubature.table.as_mut() {
                t.basis_degree = v;
            }
        }
        if let Some(p_star) = self.p_star {
            let r = RadiusPolicy::Hormander { p_star };
            c.preprocess.radius = r;
            c.bench.sweep.radius = r;
            if let Some(t) = c.train.cubature.table.as_mut() {
                t.radius = r;
            }
        }
        if let Some(v) = self.steps {
            c.estimate.steps_per_segment = v;
            c.bench.sweep.steps_per_segment = v;
            c.train.solver.steps_per_segment = v;
        }
        if let Some(v) = self.mc_paths {
            c.estimate.mc_paths = v;
            c.train.mc_paths = Some(v);
        }
        if let Some(v) = self.mc_steps {
            c.estimate.mc_steps = v;
            c.bench.sweep.mc_steps = v;
            c.train.solver.mc_steps = v;
        }
        if let Some(name) = &self.problem {
            let p = ProblemSpec::parse(name, self.b)?;
            c.estimate.problem = p;
            c.bench.problem = p;
        } else if let Some(b) = self.b {
            for p in [&mut c.estimate.problem, &mut c.bench.problem] {
                if let ProblemSpec::GeometricSine { b: old } = p {
                    *old = b;
                }
            }
        }
        if self.raw {
            c.estimate.use_table = false;
            c.train.cubature.table = None;
        }
        if let Some(v) = &self.ks {
            c.bench.sweep.ks = v.clone();
        }
        if let Some(v) = &self.mc_ns {
            c.bench.sweep.mc_ns = v.clone();
        }
        if let Some(v) = self.replicates {
            c.bench.sweep.mc_replicates = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.lr {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.hidden {
            c.train.hidden = v;
        }
        c.estimate.mc_seed = stage_seed(c.seed, 1);
        c.bench.sweep.seed = stage_seed(c.seed, 2);
        c.train.seed = stage_seed(c.seed, 3);
        c.train.mc_seed = stage_seed(c.seed, 4);
        c.train.data.seed = stage_seed(c.seed, 5);
        Ok(c)
    }
}
