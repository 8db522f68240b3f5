//! Cubature and Monte Carlo estimators of `E[L(X)]` and the convergence
//! sweep comparing them.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{formula_for_degree, CubatureFormula};
use crate::ode::{
    ito_to_stratonovich, path_rng, solve_controlled_ode, solve_sde_mc_with_rng, ItoFields,
    Trajectory, VectorFieldSet,
};
use crate::partition::{concat_path, enumerate_leaves, make_partition, IndexVector, TimePartition};
use crate::recombination::{preprocess, RadiusPolicy, TestBasis, WeightTable};

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

type Integrand = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A deterministic real-valued functional of a trajectory.
#[derive(Clone)]
pub struct PathFunctional {
    name: String,
    lipschitz: f64,
    eval: Arc<dyn Fn(&Trajectory) -> f64 + Send + Sync>,
    integrand: Option<Integrand>,
}

impl PathFunctional {
    pub fn new(
        name: impl Into<String>,
        lipschitz: f64,
        eval: impl Fn(&Trajectory) -> f64 + Send + Sync + 'static,
    ) -> Self {
        PathFunctional {
            name: name.into(),
            lipschitz,
            eval: Arc::new(eval),
            integrand: None,
        }
    }

    /// `∫ ℓ(t, state) dt` by the trapezoid rule. Such functionals split
    /// into per-interval pieces, which level aggregation relies on.
    pub fn time_integral(
        name: impl Into<String>,
        lipschitz: f64,
        ell: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let ell: Integrand = Arc::new(ell);
        let inner = ell.clone();
        PathFunctional {
            name: name.into(),
            lipschitz,
            eval: Arc::new(move |traj| trapezoid(traj, |t, s| inner(t, s))),
            integrand: Some(ell),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Declared Lipschitz constant (metadata only).
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_time_integral(&self) -> bool {
        self.integrand.is_some()
    }

    pub fn eval(&self, traj: &Trajectory) -> f64 {
        (self.eval)(traj)
    }
}

/// Composite trapezoid rule for `∫ g(t, state) dt` on the trajectory grid.
pub fn trapezoid(traj: &Trajectory, g: impl Fn(f64, &[f64]) -> f64) -> f64 {
    let t = traj.times();
    let vals: Vec<f64> = (0..traj.len()).map(|i| g(t[i], traj.state(i))).collect();
    compensated_sum((1..traj.len()).map(|i| 0.5 * (t[i] - t[i - 1]) * (vals[i] + vals[i - 1])))
}

/// `∫ (X_t - sin 2πt)^2 dt` on the first spatial component.
pub fn sine_tracking_functional() -> PathFunctional {
    PathFunctional::time_integral("sine_tracking", f64::NAN, |t, s| {
        let r = s[1] - (2.0 * PI * t).sin();
        r * r
    })
}

/// `f(X_T)` on the spatial part of the final state.
pub fn terminal_functional(
    name: &str,
    f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
) -> PathFunctional {
    PathFunctional::new(name, f64::NAN, move |traj| f(&traj.last_state()[1..]))
}

/// Where cubature leaves and their weights come from.
#[derive(Clone, Copy)]
pub enum LeafSource<'a> {
    /// The full `q^k` tree with product weights.
    Raw,
    /// Surviving leaves of a pre-processed table.
    Table(&'a WeightTable),
}

/// How weighted cubature paths are combined into an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `Σ_z λ_z L(φ_z)` over surviving leaves.
    Leaves,
    /// For time-integral functionals: the piece of the integral over
    /// interval `i` is taken under the level-`i` measure, one segment solve
    /// per tree node.
    Levels,
    /// `Levels` for time integrals on a weight table, `Leaves` otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubatureSettings {
    pub steps_per_segment: usize,
    pub aggregation: Aggregation,
    pub keep_contributions: bool,
}

impl Default for CubatureSettings {
    fn default() -> Self {
        CubatureSettings {
            steps_per_segment: 32,
            aggregation: Aggregation::Auto,
            keep_contributions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub value: f64,
    /// Number of weighted paths (cubature leaves or Monte Carlo samples).
    pub n: usize,
    /// Number of ODE or SDE solves performed.
    pub solves: usize,
    pub seconds: f64,
    /// `(weight, value)` per summand, when requested.
    pub contributions: Option<Vec<(f64, f64)>>,
}

/// Cubature estimate of `E[L(X)]` from raw tree leaves or a weight table.
pub fn cubature_estimate(
    functional: &PathFunctional,
    fields: &VectorFieldSet,
    formula: &CubatureFormula,
    partition: &TimePartition,
    source: LeafSource<'_>,
    x0: &[f64],
    settings: &CubatureSettings,
) -> Result<EstimateReport> {
    if let LeafSource::Table(t) = source {
        t.check_compatible(formula, partition)?;
        if t.leaves().all(|l| l.1 <= 0.0) {
            return Ok(EstimateReport {
                value: 0.0,
                n: 0,
                solves: 0,
                seconds: 0.0,
                contributions: None,
            });
        }
    }
    let levels = match settings.aggregation {
        Aggregation::Leaves => false,
        Aggregation::Levels => {
            if !functional.is_time_integral() {
                return Err(Error::InvalidParameter(format!(
                    "level aggregation needs a time-integral functional, got {}",
                    functional.name()
                )));
            }
            true
        }
        Aggregation::Auto => {
            functional.is_time_integral() && matches!(source, LeafSource::Table(_))
        }
    };
    if levels {
        level_estimate(functional, fields, formula, partition, source, x0, settings)
    } else {
        leaf_estimate(functional, fields, formula, partition, source, x0, settings)
    }
}

fn leaf_estimate(
    functional: &PathFunctional,
    fields: &VectorFieldSet,
    formula: &CubatureFormula,
    partition: &TimePartition,
    source: LeafSource<'_>,
    x0: &[f64],
    settings: &CubatureSettings,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let leaves: Vec<(IndexVector, f64)> = match source {
        LeafSource::Raw => enumerate_leaves(formula, partition)?
            .map(|l| (l.index, l.weight))
            .collect(),
        LeafSource::Table(t) => t.leaves().collect(),
    };
    let leaves: Vec<_> = leaves.into_iter().filter(|l| l.1 > 0.0).collect();
    let values: Vec<f64> = leaves
        .par_iter()
        .map(|(iv, _)| {
            let path = concat_path(formula, partition, iv)?;
            let traj = solve_controlled_ode(fields, &path.path, x0, settings.steps_per_segment)?;
            Ok(functional.eval(&traj))
        })
        .collect::<Result<_>>()?;
    let value = compensated_sum(leaves.iter().zip(&values).map(|(l, v)| l.1 * v));
    Ok(EstimateReport {
        value,
        n: leaves.len(),
        solves: leaves.len(),
        seconds: start.elapsed().as_secs_f64(),
        contributions: settings
            .keep_contributions
            .then(|| leaves.iter().zip(&values).map(|(l, &v)| (l.1, v)).collect()),
    })
}

/// Per-level prefix weights `(code, weight)`, sorted by code.
pub(crate) fn level_weights(
    formula: &CubatureFormula,
    partition: &TimePartition,
    source: LeafSource<'_>,
) -> Result<Vec<Vec<(u64, f64)>>> {
    match source {
        LeafSource::Table(t) => Ok(t.intervals.clone()),
        LeafSource::Raw => {
            crate::partition::leaf_count(formula.len(), partition.k())?;
            let q = formula.len() as u64;
            let mut levels: Vec<Vec<(u64, f64)>> = Vec::with_capacity(partition.k());
            let mut prev = vec![(0u64, 1.0)];
            for _ in 0..partition.k() {
                let next: Vec<(u64, f64)> = prev
                    .iter()
                    .flat_map(|&(c, w)| {
                        formula
                            .weights()
                            .iter()
                            .enumerate()
                            .map(move |(j, &l)| (c * q + j as u64, w * l))
                    })
                    .collect();
                levels.push(next.clone());
                prev = next;
            }
            Ok(levels)
        }
    }
}

fn level_estimate(
    functional: &PathFunctional,
    fields: &VectorFieldSet,
    formula: &CubatureFormula,
    partition: &TimePartition,
    source: LeafSource<'_>,
    x0: &[f64],
    settings: &CubatureSettings,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let ell = functional.integrand.as_ref().expect("checked by caller");
    let levels = level_weights(formula, partition, source)?;
    let q = formula.len() as u64;
    // the root carries the level-1 mass, so rescaled tables rescale the estimate
    let root = compensated_sum(levels[0].iter().map(|e| e.1));
    let mut parents: Vec<(u64, f64, Vec<f64>)> = vec![(0, root, x0.to_vec())];
    let mut terms: Vec<(f64, f64)> = Vec::new();
    let mut solves = 0;
    for (i, level) in levels.iter().enumerate() {
        let (t0, s) = (partition.knots()[i], partition.step(i + 1));
        let segments: Vec<_> = formula
            .paths()
            .iter()
            .map(|p| crate::partition::scale_path(p, s, t0))
            .collect();
        let children: Vec<(u64, f64, Vec<f64>, f64)> = parents
            .par_iter()
            .flat_map_iter(|(code, w, state)| {
                segments
                    .iter()
                    .zip(formula.weights())
                    .enumerate()
                    .map(move |(j, (seg, &lam))| {
                        let traj =
                            solve_controlled_ode(fields, seg, state, settings.steps_per_segment)?;
                        let piece = trapezoid(&traj, |t, x| ell(t, x));
                        Ok((
                            code * q + j as u64,
                            w * lam,
                            traj.last_state().to_vec(),
                            piece,
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        solves += children.len();
        terms.extend(children.iter().filter(|c| c.1 > 0.0).map(|c| (c.1, c.3)));
        // survivors of this level carry their state forward
        let mut next = Vec::with_capacity(level.len());
        let mut sorted_children = children;
        sorted_children.sort_by_key(|c| c.0);
        for &(code, w) in level.iter().filter(|e| e.1 > 0.0) {
            let pos = sorted_children
                .binary_search_by_key(&code, |c| c.0)
                .map_err(|_| Error::MatchFailure { interval: i + 1 })?;
            next.push((code, w, std::mem::take(&mut sorted_children[pos].2)));
        }
        parents = next;
    }
    let value = compensated_sum(terms.iter().map(|(w, v)| w * v));
    Ok(EstimateReport {
        value,
        n: parents.len(),
        solves,
        seconds: start.elapsed().as_secs_f64(),
        contributions: settings.keep_contributions.then_some(terms),
    })
}

/// Functional values of `n` seeded Euler–Maruyama paths; path `i` uses
/// stream `i` of `seed`.
pub fn mc_values(
    functional: &PathFunctional,
    ito: &ItoFields,
    x0: &[f64],
    horizon: f64,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            let traj = solve_sde_mc_with_rng(ito, x0, horizon, steps, &mut rng)?;
            Ok(functional.eval(&traj))
        })
        .collect()
}

/// Sample mean of the functional over `n` seeded paths.
#[allow(clippy::too_many_arguments)]
pub fn mc_estimate(
    functional: &PathFunctional,
    ito: &ItoFields,
    x0: &[f64],
    horizon: f64,
    n: usize,
    steps: usize,
    seed: u64,
    keep_contributions: bool,
) -> Result<EstimateReport> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    let start = Instant::now();
    let values = mc_values(functional, ito, x0, horizon, n, steps, seed)?;
    let value = compensated_sum(values.iter().copied()) / n as f64;
    let w = 1.0 / n as f64;
    Ok(EstimateReport {
        value,
        n,
        solves: n,
        seconds: start.elapsed().as_secs_f64(),
        contributions: keep_contributions.then(|| values.iter().map(|&v| (w, v)).collect()),
    })
}

/// An SDE, a functional and (when known) the exact expectation.
#[derive(Clone)]
pub struct BenchProblem {
    pub name: String,
    pub ito: ItoFields,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub functional: PathFunctional,
    pub oracle: Option<f64>,
}

impl BenchProblem {
    pub fn oracle(&self) -> Result<f64> {
        self.oracle.ok_or(Error::OracleUnavailable)
    }
}

/// `dX = dB`, `X_0 = 0`, sine-tracking functional; the exact value is
/// `∫ t dt + ∫ sin^2(2πt) dt = 1`.
pub fn brownian_sine_problem() -> BenchProblem {
    let ito = ItoFields::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, o| o[0] = 1.0)
        .with_jacobian(|_, _, o| o[0] = 0.0);
    BenchProblem {
        name: "brownian_sine".into(),
        ito,
        x0: vec![0.0, 0.0],
        horizon: 1.0,
        functional: sine_tracking_functional(),
        oracle: Some(1.0),
    }
}

/// `dX = b X dB` (Itô), `X_0 = 1`, sine-tracking functional. Since
/// `E X_t = 1` and `E X_t^2 = e^{b^2 t}`, the exact value is
/// `(e^{b^2} - 1) / b^2 + 1/2`.
pub fn geometric_sine_problem(b: f64) -> BenchProblem {
    let ito = ItoFields::new(1, 1, |_, _, o| o[0] = 0.0, move |_, x, o| o[0] = b * x[0])
        .with_jacobian(move |_, _, o| o[0] = b);
    let b2 = b * b;
    BenchProblem {
        name: format!("geometric_sine_b{b}"),
        ito,
        x0: vec![0.0, 1.0],
        horizon: 1.0,
        functional: sine_tracking_functional(),
        oracle: Some(b2.exp_m1() / b2 + 0.5),
    }
}

/// `dX = -X dt` with no noise, `X_0 = 1`, sine-tracking functional. The
/// exact value is `(1 - e^{-2})/2 + 1/2 - 4π(1 - e^{-1})/(1 + 4π²)`.
pub fn decay_sine_problem() -> BenchProblem {
    let ito = ItoFields::new(1, 1, |_, x, o| o[0] = -x[0], |_, _, o| o[0] = 0.0)
        .with_jacobian(|_, _, o| o[0] = 0.0);
    let w = 2.0 * PI;
    let oracle =
        0.5 * (1.0 - (-2f64).exp()) + 0.5 - 2.0 * w * (1.0 - (-1f64).exp()) / (1.0 + w * w);
    BenchProblem {
        name: "decay_sine".into(),
        ito,
        x0: vec![0.0, 1.0],
        horizon: 1.0,
        functional: sine_tracking_functional(),
        oracle: Some(oracle),
    }
}

/// Settings for the cubature-vs-Monte-Carlo sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub degree: usize,
    pub gamma: f64,
    /// Partition sizes for the cubature arm.
    pub ks: Vec<usize>,
    pub basis_degree: usize,
    pub radius: RadiusPolicy,
    pub steps_per_segment: usize,
    /// Path counts for the Monte Carlo arm.
    pub mc_ns: Vec<usize>,
    pub mc_replicates: usize,
    pub mc_steps: usize,
    pub seed: u64,
    /// Also run Monte Carlo at each cubature path count.
    pub matched: bool,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            degree: 5,
            gamma: 0.6,
            ks: vec![2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32],
            basis_degree: 4,
            radius: RadiusPolicy::Hormander { p_star: 1.0 },
            steps_per_segment: 8,
            mc_ns: vec![100, 316, 1000, 3162, 10000, 31623, 100000],
            mc_replicates: 20,
            mc_steps: 500,
            seed: 2024,
            matched: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub method: String,
    pub n: usize,
    pub error: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub oracle: f64,
    pub rows: Vec<ConvergenceRow>,
    pub mc_slope: f64,
    pub cubature_slope: f64,
    /// Number of leading cubature points used in the slope fit.
    pub cubature_fit_points: usize,
}

impl ConvergenceResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n,error,seconds\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:e},{:e}", r.method, r.n, r.error, r.seconds).unwrap();
        }
        out
    }

    pub fn rows_for<'a>(
        &'a self,
        method: &'a str,
    ) -> impl Iterator<Item = &'a ConvergenceRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// Least-squares slope of `log10 y` against `log10 x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        points.iter().map(|&(x, y)| (x.log10(), y.log10())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Length of the leading run of `(n, error)` points (sorted by `n`) over
/// which the error keeps falling by at least 5% per doubling of `n`.
pub fn pre_plateau_len(points: &[(f64, f64)]) -> usize {
    let mut len = points.len().min(1);
    for w in points.windows(2) {
        let doublings = (w[1].0 / w[0].0).log2();
        if !(doublings > 0.0) || (w[1].1 / w[0].1).powf(1.0 / doublings) > 0.95 {
            break;
        }
        len += 1;
    }
    len
}

/// RMS error of `replicates` independent Monte Carlo estimates with `n`
/// paths each.
pub fn mc_rms_error(
    problem: &BenchProblem,
    n: usize,
    replicates: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let oracle = problem.oracle()?;
    let mut sq = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let rep_seed = seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let est = mc_estimate(
            &problem.functional,
            &problem.ito,
            &problem.x0,
            problem.horizon,
            n,
            steps,
            rep_seed,
            false,
        )?;
        sq.push((est.value - oracle).powi(2));
    }
    Ok((compensated_sum(sq) / replicates as f64).sqrt())
}

/// Sweeps the cubature arm over `ks` and the Monte Carlo arm over `mc_ns`,
/// returning error rows and fitted log-log slopes.
pub fn convergence_experiment(
    problem: &BenchProblem,
    cfg: &ConvergenceConfig,
) -> Result<ConvergenceResult> {
    let oracle = problem.oracle()?;
    let formula = formula_for_degree(cfg.degree, problem.ito.db())?;
    let fields = ito_to_stratonovich(&problem.ito)?;
    let basis = TestBasis::new(problem.ito.db(), cfg.basis_degree);
    let mut rows = Vec::new();

    let mut cub = Vec::new();
    for &k in &cfg.ks {
        let start = Instant::now();
        let partition = make_partition(problem.horizon, k, cfg.gamma)?;
        let settings = CubatureSettings {
            steps_per_segment: cfg.steps_per_segment,
            ..Default::default()
        };
        let table = if k >= 2 {
            Some(preprocess(&formula, &partition, &basis, cfg.radius)?)
        } else {
            None
        };
        let source = table.as_ref().map_or(LeafSource::Raw, LeafSource::Table);
        let est = cubature_estimate(
            &problem.functional,
            &fields,
            &formula,
            &partition,
            source,
            &problem.x0,
            &settings,
        )?;
        let row = ConvergenceRow {
            method: "cubature".into(),
            n: est.n,
            error: (est.value - oracle).abs(),
            seconds: start.elapsed().as_secs_f64(),
        };
        cub.push((row.n as f64, row.error));
        rows.push(row);
    }

    let mut mc = Vec::new();
    for &n in &cfg.mc_ns {
        let start = Instant::now();
        let err = mc_rms_error(problem, n, cfg.mc_replicates, cfg.mc_steps, cfg.seed)?;
        let seconds = start.elapsed().as_secs_f64() / cfg.mc_replicates as f64;
        mc.push((n as f64, err));
        rows.push(ConvergenceRow {
            method: "mc".into(),
            n,
            error: err,
            seconds,
        });
    }
    if cfg.matched {
        for &(n, _) in &cub {
            let start = Instant::now();
            let err = mc_rms_error(
                problem,
                n as usize,
                cfg.mc_replicates,
                cfg.mc_steps,
                cfg.seed ^ 0x5eed,
            )?;
            let seconds = start.elapsed().as_secs_f64() / cfg.mc_replicates as f64;
            rows.push(ConvergenceRow {
                method: "mc_matched".into(),
                n: n as usize,
                error: err,
                seconds,
            });
        }
    }

    cub.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fit = pre_plateau_len(&cub);
    let cubature_slope = if fit >= 2 {
        loglog_slope(&cub[..fit])
    } else {
        f64::NAN
    };
    let mc_slope = if mc.len() >= 2 {
        loglog_slope(&mc)
    } else {
        f64::NAN
    };
    Ok(ConvergenceResult {
        oracle,
        rows,
        mc_slope,
        cubature_slope,
        cubature_fit_points: fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{degree3_formula, degree5_formula};
    use crate::ode::{solve_sde_mc, VectorFieldSet};

    fn traj(f: impl Fn(f64) -> f64, n: usize) -> Trajectory {
        let mut t = Trajectory::new(2);
        for i in 0..=n {
            let s = i as f64 / n as f64;
            t.push(s, &[s, f(s)]);
        }
        t
    }

    #[test]
    fn sine_functional_closed_forms() {
        let l = sine_tracking_functional();
        assert!((l.eval(&traj(|_| 0.0, 400)) - 0.5).abs() < 1e-12);
        assert!(l.eval(&traj(|t| (2.0 * PI * t).sin(), 400)).abs() < 1e-12);
        assert!((l.eval(&traj(|_| 1.0, 400)) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn decay_oracle_matches_quadrature() {
        let p = decay_sine_problem();
        let v = p.functional.eval(&traj(|t| (-t).exp(), 20000));
        assert!((v - p.oracle.unwrap()).abs() < 1e-8);
        let fields = ito_to_stratonovich(&p.ito).unwrap();
        let formula = degree3_formula(1).unwrap();
        let partition = make_partition(1.0, 3, 1.0).unwrap();
        let c = cubature_estimate(
            &p.functional,
            &fields,
            &formula,
            &partition,
            LeafSource::Raw,
            &p.x0,
            &CubatureSettings::default(),
        )
        .unwrap();
        // trapezoid error on the 96-point grid dominates
        assert!((c.value - v).abs() < 1e-3);
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
    }

    fn settings(steps: usize) -> CubatureSettings {
        CubatureSettings {
            steps_per_segment: steps,
            ..Default::default()
        }
    }

    fn keep(steps: usize) -> CubatureSettings {
        CubatureSettings {
            keep_contributions: true,
            ..settings(steps)
        }
    }

    fn brownian() -> VectorFieldSet {
        VectorFieldSet::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, o| o[0] = 1.0)
    }

    #[test]
    fn k2_raw_second_moment() {
        let f = degree3_formula(1).unwrap();
        let p = make_partition(1.0, 2, 1.0).unwrap();
        let l = terminal_functional("square", |x| x[0] * x[0]);
        let r = cubature_estimate(
            &l,
            &brownian(),
            &f,
            &p,
            LeafSource::Raw,
            &[0.0, 0.0],
            &keep(4),
        )
        .unwrap();
        assert!((r.value - 1.0).abs() < 1e-14);
        assert_eq!(r.n, 4);
        let dot: f64 = r.contributions.unwrap().iter().map(|(w, v)| w * v).sum();
        assert!((dot - r.value).abs() <= 1e-12 * r.value.abs());
    }

    #[test]
    fn empty_table_gives_zero() {
        let f = degree5_formula(1).unwrap();
        let p = make_partition(1.0, 3, 0.6).unwrap();
        let mut t = preprocess(&f, &p, &TestBasis::new(1, 2), RadiusPolicy::PerPoint).unwrap();
        t.intervals.iter_mut().flatten().for_each(|e| e.1 = 0.0);
        let r = cubature_estimate(
            &sine_tracking_functional(),
            &brownian(),
            &f,
            &p,
            LeafSource::Table(&t),
            &[0.0, 0.0],
            &settings(4),
        )
        .unwrap();
        assert_eq!((r.value, r.n), (0.0, 0));
    }

    #[test]
    fn table_must_match_partition() {
        let f = degree5_formula(1).unwrap();
        let p = make_partition(1.0, 3, 0.6).unwrap();
        let q = make_partition(1.0, 3, 0.7).unwrap();
        let t = preprocess(&f, &p, &TestBasis::new(1, 2), RadiusPolicy::PerPoint).unwrap();
        let r = cubature_estimate(
            &sine_tracking_functional(),
            &brownian(),
            &f,
            &q,
            LeafSource::Table(&t),
            &[0.0, 0.0],
            &settings(4),
        );
        assert!(matches!(r, Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn level_and_leaf_sums_agree_without_recombination() {
        let p = geometric_sine_problem(0.7);
        let v = ito_to_stratonovich(&p.ito).unwrap();
        let f = degree5_formula(1).unwrap();
        let part = make_partition(1.0, 4, 0.6).unwrap();
        let leaf = CubatureSettings {
            aggregation: Aggregation::Leaves,
            ..settings(6)
        };
        let level = CubatureSettings {
            aggregation: Aggregation::Levels,
            ..settings(6)
        };
        let a =
            cubature_estimate(&p.functional, &v, &f, &part, LeafSource::Raw, &p.x0, &leaf).unwrap();
        let b = cubature_estimate(&p.functional, &v, &f, &part, LeafSource::Raw, &p.x0, &level)
            .unwrap();
        assert!(
            (a.value - b.value).abs() < 1e-12,
            "{} vs {}",
            a.value,
            b.value
        );
        let t = preprocess(&f, &part, &TestBasis::new(1, 4), RadiusPolicy::PerPoint).unwrap();
        let c = cubature_estimate(
            &p.functional,
            &v,
            &f,
            &part,
            LeafSource::Table(&t),
            &p.x0,
            &level,
        )
        .unwrap();
        assert!((a.value - c.value).abs() < 1e-12);
        assert_eq!((a.n, c.n), (81, 81));
        let terminal = terminal_functional("x", |x| x[0]);
        assert!(
            cubature_estimate(&terminal, &v, &f, &part, LeafSource::Raw, &p.x0, &level).is_err()
        );
    }

    #[test]
    fn linear_functional_exact_for_degree3() {
        // dX = (1 + X) dt + 0.3 dB: E X_1 = 2e - 1 for X_0 = 1
        let ito = ItoFields::new(1, 1, |_, x, o| o[0] = 1.0 + x[0], |_, _, o| o[0] = 0.3);
        let v = ito_to_stratonovich(&ito).unwrap();
        let f = degree3_formula(1).unwrap();
        let p = make_partition(1.0, 3, 1.0).unwrap();
        let l = terminal_functional("x", |x| x[0]);
        let r =
            cubature_estimate(&l, &v, &f, &p, LeafSource::Raw, &[0.0, 1.0], &settings(64)).unwrap();
        assert!(
            (r.value - (2.0 * std::f64::consts::E - 1.0)).abs() < 1e-9,
            "{}",
            r.value
        );
    }

    #[test]
    fn mc_zero_noise_and_seed() {
        let ito = ItoFields::new(1, 1, |_, x, o| o[0] = -x[0], |_, _, o| o[0] = 0.0);
        let l = terminal_functional("x", |x| x[0]);
        let r = mc_estimate(&l, &ito, &[0.0, 1.0], 1.0, 1, 10, 5, false).unwrap();
        let det = solve_sde_mc(&ito, &[0.0, 1.0], 1.0, 10, 0).unwrap();
        assert_eq!(r.value, det.last_state()[1]);
        let p = brownian_sine_problem();
        let a = mc_estimate(&p.functional, &p.ito, &p.x0, 1.0, 50, 20, 8, false).unwrap();
        let b = mc_estimate(&p.functional, &p.ito, &p.x0, 1.0, 50, 20, 8, false).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn slope_helpers() {
        let pts: Vec<(f64, f64)> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&n: &f64| (n, 3.0 / n))
            .collect();
        assert!((loglog_slope(&pts) + 1.0).abs() < 1e-12);
        let plateau = [(10.0, 1.0), (20.0, 0.5), (40.0, 0.49), (80.0, 0.1)];
        assert_eq!(pre_plateau_len(&plateau), 2);
    }

    #[test]
    fn missing_oracle() {
        let mut p = brownian_sine_problem();
        p.oracle = None;
        assert!(matches!(
            convergence_experiment(&p, &ConvergenceConfig::default()),
            Err(Error::OracleUnavailable)
        ));
    }
}
