//! Toy latent-SDE training with cubature and Monte Carlo gradients.

pub mod data;
pub mod loss;
pub mod network;
pub mod tape;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::LeafSource;
use crate::formula::{fmt17, formula_for_degree, CubatureFormula};
use crate::partition::{make_partition, TimePartition};
use crate::recombination::{preprocess, RadiusPolicy, TestBasis, WeightTable};
use data::{generate_ou, DataPath, OuConfig};
use loss::{
    loss_and_gradient_cubature, loss_and_gradient_mc, LossGradient, SolverSettings, VariationalSpec,
};
use network::{DiffusionMode, NetworkFields};

const DIVERGENCE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TablePolicy {
    pub basis_degree: usize,
    pub radius: RadiusPolicy,
}

/// The cubature tree used by the cubature arm; without a table policy the
/// full tree is summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubatureArm {
    pub degree: usize,
    pub k: usize,
    pub gamma: f64,
    pub table: Option<TablePolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub hidden: usize,
    pub g_min: f64,
    pub g_init: f64,
    pub init_scale: f64,
    pub spec: VariationalSpec,
    pub data: OuConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Network initialization seed, shared by both arms.
    pub seed: u64,
    pub cubature: CubatureArm,
    pub solver: SolverSettings,
    /// Monte Carlo paths per epoch; `None` matches the cubature leaf count.
    pub mc_paths: Option<usize>,
    pub mc_seed: u64,
    /// Reuse the same noise every epoch instead of redrawing it.
    pub freeze_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 1,
            hidden: 8,
            g_min: 0.05,
            g_init: 0.3,
            init_scale: 1.0,
            spec: VariationalSpec::default(),
            data: OuConfig::default(),
            learning_rate: 1e-2,
            epochs: 200,
            seed: 1,
            cubature: CubatureArm {
                degree: 5,
                k: 6,
                gamma: 0.6,
                table: Some(TablePolicy {
                    basis_degree: 4,
                    radius: RadiusPolicy::Hormander { p_star: 1.0 },
                }),
            },
            solver: SolverSettings::default(),
            mc_paths: None,
            mc_seed: 11,
            freeze_noise: false,
        }
    }
}

impl TrainConfig {
    /// The 8-dimensional toy problem: degree-3 formula (16 paths) on two
    /// intervals, 256 leaves.
    pub fn eight_dim() -> Self {
        TrainConfig {
            dim: 8,
            cubature: CubatureArm {
                degree: 3,
                k: 2,
                gamma: 1.0,
                table: None,
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter(
                "dim and hidden must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        if self.mc_paths == Some(0) {
            return Err(Error::InvalidParameter("mc_paths must be positive".into()));
        }
        Ok(())
    }
}

/// One epoch of one arm; the loss is taken before the parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub arm: String,
    pub loss: f64,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub initial: NetworkFields,
    pub cubature: NetworkFields,
    pub mc: NetworkFields,
    pub cubature_paths: usize,
    pub mc_paths: usize,
    pub preprocess_seconds: f64,
}

impl TrainLog {
    pub fn losses(&self, arm: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.loss)
            .collect()
    }

    pub fn mean_seconds(&self, arm: &str) -> f64 {
        let s: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.seconds)
            .collect();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// Median epoch time, less sensitive to scheduler noise than the mean.
    pub fn median_seconds(&self, arm: &str) -> f64 {
        let mut s: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.seconds)
            .collect();
        if s.is_empty() {
            return 0.0;
        }
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        if s.len() % 2 == 1 {
            s[m]
        } else {
            0.5 * (s[m - 1] + s[m])
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,arm,loss,seconds,peak_bytes\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.arm,
                fmt17(r.loss),
                fmt17(r.seconds),
                r.peak_bytes
            );
        }
        s
    }
}

/// Formula, partition and (optional) weight table for a cubature arm.
pub struct CubatureSetup {
    pub formula: CubatureFormula,
    pub partition: TimePartition,
    pub table: Option<WeightTable>,
}

impl CubatureSetup {
    pub fn build(arm: &CubatureArm, dim: usize, horizon: f64) -> Result<Self> {
        let formula = formula_for_degree(arm.degree, dim)?;
        let partition = make_partition(horizon, arm.k, arm.gamma)?;
        let table = match arm.table {
            Some(t) => Some(preprocess(
                &formula,
                &partition,
                &TestBasis::new(dim, t.basis_degree),
                t.radius,
            )?),
            None => None,
        };
        Ok(CubatureSetup {
            formula,
            partition,
            table,
        })
    }

    pub fn source(&self) -> LeafSource<'_> {
        match &self.table {
            Some(t) => LeafSource::Table(t),
            None => LeafSource::Raw,
        }
    }

    pub fn loss_and_gradient(
        &self,
        net: &NetworkFields,
        data: &DataPath,
        spec: &VariationalSpec,
        settings: &SolverSettings,
    ) -> Result<LossGradient> {
        loss_and_gradient_cubature(
            net,
            &self.formula,
            &self.partition,
            self.source(),
            data,
            spec,
            settings,
        )
    }
}

/// Noise seed of a Monte Carlo epoch.
pub fn epoch_seed(base: u64, epoch: usize, frozen: bool) -> u64 {
    if frozen {
        base
    } else {
        base.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// One gradient-descent step of `net`, logged as `arm`.
fn descend(
    arm: &str,
    net: &mut NetworkFields,
    epoch: usize,
    lr: f64,
    rows: &mut Vec<LogRow>,
    step: impl FnOnce(&NetworkFields) -> Result<LossGradient>,
) -> Result<()> {
    let clock = Instant::now();
    let lg = step(net)?;
    if !(lg.loss <= DIVERGENCE) {
        return Err(Error::DivergenceDetected {
            epoch,
            loss: lg.loss,
        });
    }
    for (p, g) in net.params.iter_mut().zip(&lg.gradient) {
        *p -= lr * g;
    }
    rows.push(LogRow {
        epoch,
        arm: arm.to_string(),
        loss: lg.loss,
        seconds: clock.elapsed().as_secs_f64(),
        peak_bytes: lg.peak_bytes,
    });
    Ok(())
}

/// Trains the same initial network with both gradient estimators on data
/// generated from `cfg.data`.
pub fn train(cfg: &TrainConfig) -> Result<TrainLog> {
    let data = generate_ou(cfg.dim, &cfg.data)?;
    train_on(cfg, &data)
}

/// Plain gradient descent with cubature and with Monte Carlo gradients from
/// one shared initialization, alternating epoch by epoch.
pub fn train_on(cfg: &TrainConfig, data: &DataPath) -> Result<TrainLog> {
    cfg.validate()?;
    if data.dim() != cfg.dim {
        return Err(Error::DimensionMismatch(format!(
            "config dim {} but data dim {}",
            cfg.dim,
            data.dim()
        )));
    }
    let clock = Instant::now();
    let setup = CubatureSetup::build(&cfg.cubature, cfg.dim, data.horizon())?;
    let preprocess_seconds = clock.elapsed().as_secs_f64();
    let initial = NetworkFields::init(
        cfg.dim,
        cfg.hidden,
        DiffusionMode::Softplus { g_min: cfg.g_min },
        cfg.init_scale,
        cfg.g_init,
        cfg.seed,
    )?;
    let mc_paths = match cfg.mc_paths {
        Some(n) => n,
        None => match &setup.table {
            Some(t) => t.leaves().filter(|l| l.1 > 0.0).count(),
            None => {
                crate::partition::leaf_count(setup.formula.len(), setup.partition.k())? as usize
            }
        },
    };
    let mut rows = Vec::with_capacity(2 * cfg.epochs);
    let mut cubature_paths = 0;
    let (mut cubature, mut mc) = (initial.clone(), initial.clone());
    // the arms alternate so that load drift on the machine hits both timings
    for epoch in 0..cfg.epochs {
        descend(
            "cubature",
            &mut cubature,
            epoch,
            cfg.learning_rate,
            &mut rows,
            |net| {
                let lg = setup.loss_and_gradient(net, data, &cfg.spec, &cfg.solver)?;
                cubature_paths = lg.paths;
                Ok(lg)
            },
        )?;
        descend("mc", &mut mc, epoch, cfg.learning_rate, &mut rows, |net| {
            let seed = epoch_seed(cfg.mc_seed, epoch, cfg.freeze_noise);
            loss_and_gradient_mc(net, mc_paths, seed, data, &cfg.spec, &cfg.solver)
        })?;
    }
    Ok(TrainLog {
        rows,
        initial,
        cubature,
        mc,
        cubature_paths,
        mc_paths,
        preprocess_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            hidden: 3,
            epochs: 4,
            cubature: CubatureArm {
                degree: 5,
                k: 3,
                gamma: 1.0,
                table: None,
            },
            solver: SolverSettings {
                steps_per_segment: 1,
                mc_steps: 10,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_losses() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            freeze_noise: true,
            ..small()
        };
        let log = train(&cfg).unwrap();
        for arm in ["cubature", "mc"] {
            let l = log.losses(arm);
            assert_eq!(l.len(), 4);
            assert!(l.iter().all(|&x| x == l[0]));
        }
        assert_eq!(log.mc_paths, 27);
        assert_eq!(log.cubature_paths, 27);
    }

    #[test]
    fn cubature_arm_is_reproducible() {
        let cfg = small();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.losses("cubature"), b.losses("cubature"));
        assert_eq!(a.cubature.params, b.cubature.params);
        assert_eq!(a.mc.params, b.mc.params);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e6,
            ..small()
        };
        assert!(matches!(
            train(&cfg),
            Err(Error::DivergenceDetected { .. }
                | Error::NonFiniteState { .. }
                | Error::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn log_csv_rows() {
        let log = train(&small()).unwrap();
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 1 + 8);
        assert!(csv.starts_with("epoch,arm,loss,seconds,peak_bytes\n0,cubature,"));
    }
}
