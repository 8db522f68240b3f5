//! The variational objective and its reverse-mode gradient under the
//! cubature and Monte Carlo expectations.

use std::cell::RefCell;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::DataPath;
use super::network::{NetworkFields, TapedFields};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::estimator::{compensated_sum, level_weights, LeafSource};
use crate::formula::CubatureFormula;
use crate::ode::{path_rng, Trajectory};
use crate::partition::{scale_path, TimePartition};

const SINGULAR_TOL: f64 = 1e-10;

/// Gaussian decoder with fixed observation noise and the weight on the
/// drift-mismatch term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationalSpec {
    pub obs_noise: f64,
    pub kl_weight: f64,
}

impl Default for VariationalSpec {
    fn default() -> Self {
        VariationalSpec {
            obs_noise: 0.5,
            kl_weight: 1.0,
        }
    }
}

impl VariationalSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.obs_noise > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need obs_noise > 0 and kl_weight >= 0, got {} and {}",
                self.obs_noise, self.kl_weight
            )));
        }
        Ok(())
    }

    fn log_norm(&self, d: usize) -> f64 {
        0.5 * d as f64 * (2.0 * PI * self.obs_noise * self.obs_noise).ln()
    }
}

/// `R` is the integrated log-density, `K = ½ ∫ ‖g^{-1}(f - f̃)‖²`, and the
/// objective is `R - w K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub kl: f64,
    pub objective: f64,
}

impl LossTerms {
    /// The minimized quantity `-(R - w K)`.
    pub fn loss(&self) -> f64 {
        -self.objective
    }
}

fn trapz(times: &[f64], vals: &[f64]) -> f64 {
    compensated_sum(
        (1..times.len()).map(|i| 0.5 * (times[i] - times[i - 1]) * (vals[i] + vals[i - 1])),
    )
}

/// Variational terms of one trajectory (augmented states `[t, z]`); the
/// data are resampled onto the trajectory's grid. With zero KL weight the
/// mismatch term is skipped and reported as 0.
pub fn variational_loss(
    net: &NetworkFields,
    traj: &Trajectory,
    data: &DataPath,
    spec: &VariationalSpec,
) -> Result<LossTerms> {
    spec.validate()?;
    let d = net.dx;
    if traj.dx() != d || data.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "network has {d} latent dimensions, trajectory {} and data {}",
            traj.dx(),
            data.dim()
        )));
    }
    let c = spec.log_norm(d);
    let s2 = spec.obs_noise * spec.obs_noise;
    let mut y = vec![0.0; d];
    let mut rec = Vec::with_capacity(traj.len());
    let mut kl = Vec::with_capacity(traj.len());
    for (i, &t) in traj.times().iter().enumerate() {
        let z = &traj.state(i)[1..];
        data.value_at(t, &mut y);
        let r2: f64 = z.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        rec.push(-c - r2 / (2.0 * s2));
        if spec.kl_weight == 0.0 {
            kl.push(0.0);
            continue;
        }
        let (f, ft, g) = net.eval(t, z);
        let mut k = 0.0;
        for j in 0..d {
            if f[j] == ft[j] {
                continue;
            }
            if g[j].abs() < SINGULAR_TOL {
                return Err(Error::SingularDiffusion { t });
            }
            k += ((f[j] - ft[j]) / g[j]).powi(2);
        }
        kl.push(0.5 * k);
    }
    let reconstruction = trapz(traj.times(), &rec);
    let kl = trapz(traj.times(), &kl);
    Ok(LossTerms {
        reconstruction,
        kl,
        objective: reconstruction - spec.kl_weight * kl,
    })
}

/// Loss value with its gradient in the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Leaves with positive weight, or Monte Carlo paths.
    pub paths: usize,
    /// Largest tape held at once.
    pub peak_bytes: usize,
}

fn check_gradient(gradient: &[f64]) -> Result<()> {
    match gradient.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(Error::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

fn check_state(tape: &Tape, z: &[Var], t: f64) -> Result<()> {
    if z.iter().all(|&v| tape.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t })
    }
}

/// Taped loss integrand `-log p(y | z) + w ½ ‖(f - f̃)/g‖²` at one grid
/// point.
struct Integrand<'a> {
    net: &'a NetworkFields,
    data: &'a DataPath,
    spec: &'a VariationalSpec,
    c: f64,
}

impl<'a> Integrand<'a> {
    fn new(net: &'a NetworkFields, data: &'a DataPath, spec: &'a VariationalSpec) -> Result<Self> {
        spec.validate()?;
        if data.dim() != net.dx {
            return Err(Error::DimensionMismatch(format!(
                "network has {} latent dimensions, data {}",
                net.dx,
                data.dim()
            )));
        }
        Ok(Integrand {
            net,
            data,
            spec,
            c: spec.log_norm(net.dx),
        })
    }

    fn needs_prior(&self) -> bool {
        self.spec.kl_weight > 0.0
    }

    fn eval(&self, tape: &mut Tape, t: f64, z: &[Var], fields: &TapedFields) -> Result<Var> {
        let d = self.net.dx;
        let mut y = vec![0.0; d];
        self.data.value_at(t, &mut y);
        let inv = 1.0 / (2.0 * self.spec.obs_noise * self.spec.obs_noise);
        let mut terms = Vec::with_capacity(2 * d);
        for j in 0..d {
            let r = tape.add_const(z[j], -y[j]);
            terms.push((inv, tape.square(r)));
        }
        if self.needs_prior() {
            for j in 0..d {
                if tape.value(fields.g[j]).abs() < SINGULAR_TOL {
                    return Err(Error::SingularDiffusion { t });
                }
                let diff = tape.sub(fields.prior[j], fields.posterior[j]);
                let q = tape.div(diff, fields.g[j]);
                terms.push((0.5 * self.spec.kl_weight, tape.square(q)));
            }
        }
        let sum = tape.linear_combination(&terms);
        Ok(tape.add_const(sum, self.c))
    }
}

fn trapz_tape(tape: &mut Tape, times: &[f64], vals: &[Var]) -> Var {
    let mut coef = vec![0.0; vals.len()];
    for i in 1..times.len() {
        let h = 0.5 * (times[i] - times[i - 1]);
        coef[i - 1] += h;
        coef[i] += h;
    }
    let terms: Vec<(f64, Var)> = coef.into_iter().zip(vals.iter().copied()).collect();
    tape.linear_combination(&terms)
}

/// `f̃ r_0 + Σ_i g_i e_i r_i` on the tape.
fn velocity(tape: &mut Tape, fields: &TapedFields, rates: &[f64]) -> Vec<Var> {
    (0..fields.posterior.len())
        .map(|j| {
            let v = tape.scale(fields.posterior[j], rates[0]);
            tape.axpy(v, rates[j + 1], fields.g[j])
        })
        .collect()
}

/// RK4 along one scaled formula path; returns the end state and the
/// trapezoid integral of the loss integrand over the visited grid.
#[allow(clippy::too_many_arguments)]
fn solve_segment(
    tape: &mut Tape,
    p: &[Var],
    integrand: &Integrand<'_>,
    path: &crate::formula::PiecewisePath,
    start: &NodeState,
    steps: usize,
) -> Result<(NodeState, Var)> {
    let net = integrand.net;
    let prior = integrand.needs_prior();
    let bps = path.breakpoints();
    let vals = path.values();
    let mut z = start.z.clone();
    let mut times = Vec::with_capacity((bps.len() - 1) * steps + 1);
    let mut pieces = Vec::with_capacity(times.capacity());
    let mut rates = vec![0.0; net.dx + 1];
    let mut t = bps[0];
    let mut at = start.fields.clone();
    times.push(t);
    pieces.push(start.ell);
    for seg in 0..bps.len() - 1 {
        let (ta, tb) = (bps[seg], bps[seg + 1]);
        let dt = tb - ta;
        for (r, (a, b)) in rates.iter_mut().zip(vals[seg].iter().zip(&vals[seg + 1])) {
            *r = (b - a) / dt;
        }
        let h = dt / steps as f64;
        for step in 0..steps {
            let k1 = velocity(tape, &at, &rates);
            let x2: Vec<Var> = (0..net.dx)
                .map(|j| tape.axpy(z[j], 0.5 * h, k1[j]))
                .collect();
            let f2 = net.eval_tape(tape, p, t + 0.5 * h, &x2, false, false);
            let k2 = velocity(tape, &f2, &rates);
            let x3: Vec<Var> = (0..net.dx)
                .map(|j| tape.axpy(z[j], 0.5 * h, k2[j]))
                .collect();
            let f3 = net.eval_tape(tape, p, t + 0.5 * h, &x3, false, false);
            let k3 = velocity(tape, &f3, &rates);
            let x4: Vec<Var> = (0..net.dx).map(|j| tape.axpy(z[j], h, k3[j])).collect();
            let f4 = net.eval_tape(tape, p, t + h, &x4, false, false);
            let k4 = velocity(tape, &f4, &rates);
            z = (0..net.dx)
                .map(|j| {
                    tape.linear_combination(&[
                        (1.0, z[j]),
                        (h / 6.0, k1[j]),
                        (h / 3.0, k2[j]),
                        (h / 3.0, k3[j]),
                        (h / 6.0, k4[j]),
                    ])
                })
                .collect();
            t = if step + 1 == steps {
                tb
            } else {
                ta + (step + 1) as f64 * h
            };
            check_state(tape, &z, t)?;
            at = net.eval_tape(tape, p, t, &z, prior, false);
            times.push(t);
            pieces.push(integrand.eval(tape, t, &z, &at)?);
        }
    }
    let piece = trapz_tape(tape, &times, &pieces);
    let ell = *pieces.last().expect("grid is nonempty");
    Ok((NodeState { z, fields: at, ell }, piece))
}

/// A tree node's end state with the fields and integrand already taped
/// there, shared by all its children.
struct NodeState {
    z: Vec<Var>,
    fields: TapedFields,
    ell: Var,
}

impl NodeState {
    fn new(
        tape: &mut Tape,
        p: &[Var],
        integrand: &Integrand<'_>,
        t: f64,
        z: Vec<Var>,
    ) -> Result<Self> {
        let fields = integrand
            .net
            .eval_tape(tape, p, t, &z, integrand.needs_prior(), false);
        let ell = integrand.eval(tape, t, &z, &fields)?;
        Ok(NodeState { z, fields, ell })
    }
}

/// Settings shared by both gradient estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// RK4 steps per linear piece of each cubature path.
    pub steps_per_segment: usize,
    /// Euler–Maruyama steps over the horizon.
    pub mc_steps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            steps_per_segment: 1,
            mc_steps: 50,
        }
    }
}

/// Expected loss over the cubature tree (levels weighted by surviving
/// prefix weights) and its gradient. The latent path starts at the first
/// data value.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient_cubature(
    net: &NetworkFields,
    formula: &CubatureFormula,
    partition: &TimePartition,
    source: LeafSource<'_>,
    data: &DataPath,
    spec: &VariationalSpec,
    settings: &SolverSettings,
) -> Result<LossGradient> {
    let integrand = Integrand::new(net, data, spec)?;
    if formula.dim() != net.dx {
        return Err(Error::DimensionMismatch(format!(
            "formula drives {} components, network has {}",
            formula.dim(),
            net.dx
        )));
    }
    if settings.steps_per_segment == 0 {
        return Err(Error::InvalidParameter(
            "steps_per_segment must be positive".into(),
        ));
    }
    if let LeafSource::Table(t) = source {
        t.check_compatible(formula, partition)?;
    }
    let mut levels = level_weights(formula, partition, source)?;
    for level in &mut levels {
        level.retain(|e| e.1 > 0.0);
        level.sort_by_key(|e| e.0);
    }
    let np = net.param_count();
    let paths = levels.last().map_or(0, |l| l.len());
    if levels[0].is_empty() {
        return Ok(LossGradient {
            loss: 0.0,
            gradient: vec![0.0; np],
            paths,
            peak_bytes: 0,
        });
    }
    let root = compensated_sum(levels[0].iter().map(|e| e.1));
    let q = formula.len() as u64;
    let k = partition.k();
    let segments: Vec<Vec<_>> = (0..k)
        .map(|i| {
            formula
                .paths()
                .iter()
                .map(|p| scale_path(p, partition.step(i + 1), partition.knots()[i]))
                .collect()
        })
        .collect();
    let lambda = formula.weights();
    let z0 = data.values()[0].clone();

    // one tape per first-interval subtree
    let subtree = |j: usize| -> Result<(f64, Vec<f64>, usize)> {
        with_scratch(|tape, adj| {
            let p: Vec<Var> = net.params.iter().map(|&v| tape.var(v)).collect();
            let z: Vec<Var> = z0.iter().map(|&v| tape.var(v)).collect();
            let root_state = NodeState::new(tape, &p, &integrand, partition.knots()[0], z)?;
            let mut seeds: Vec<(Var, f64)> = Vec::new();
            let (end, piece) = solve_segment(
                tape,
                &p,
                &integrand,
                &segments[0][j],
                &root_state,
                settings.steps_per_segment,
            )?;
            seeds.push((piece, root * lambda[j]));
            let mut frontier: Vec<(u64, f64, NodeState)> = Vec::new();
            if let Ok(pos) = levels[0].binary_search_by_key(&(j as u64), |e| e.0) {
                frontier.push((j as u64, levels[0][pos].1, end));
            }
            for i in 1..k {
                let mut children = Vec::with_capacity(frontier.len() * q as usize);
                for (code, w, state) in &frontier {
                    for (c, seg) in segments[i].iter().enumerate() {
                        let (end, piece) = solve_segment(
                            tape,
                            &p,
                            &integrand,
                            seg,
                            state,
                            settings.steps_per_segment,
                        )?;
                        seeds.push((piece, w * lambda[c]));
                        children.push((code * q + c as u64, end));
                    }
                }
                if i + 1 == k {
                    break;
                }
                let level = &levels[i];
                frontier = children
                    .into_iter()
                    .filter_map(|(code, end)| {
                        level
                            .binary_search_by_key(&code, |e| e.0)
                            .ok()
                            .map(|pos| (code, level[pos].1, end))
                    })
                    .collect();
                if frontier.is_empty() {
                    break;
                }
            }
            let loss = compensated_sum(seeds.iter().map(|&(v, w)| w * tape.value(v)));
            tape.backward_into(&seeds, adj);
            Ok((loss, adj[..np].to_vec(), tape.bytes()))
        })
    };
    let parts: Vec<(f64, Vec<f64>, usize)> = (0..formula.len())
        .into_par_iter()
        .map(subtree)
        .collect::<Result<_>>()?;
    reduce(parts, np, paths)
}

thread_local! {
    static SCRATCH: RefCell<(Tape, Vec<f64>)> = RefCell::new((Tape::new(), Vec::new()));
}

/// Runs `f` on this thread's cleared tape and adjoint buffer, whose
/// allocations persist between calls.
fn with_scratch<R>(f: impl FnOnce(&mut Tape, &mut Vec<f64>) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let (tape, adj) = &mut *s;
        tape.clear();
        f(tape, adj)
    })
}

fn reduce(parts: Vec<(f64, Vec<f64>, usize)>, np: usize, paths: usize) -> Result<LossGradient> {
    let loss = compensated_sum(parts.iter().map(|p| p.0));
    let gradient: Vec<f64> = (0..np)
        .map(|i| compensated_sum(parts.iter().map(|p| p.1[i])))
        .collect();
    check_gradient(&gradient)?;
    let peak_bytes = parts.iter().map(|p| p.2).max().unwrap_or(0);
    Ok(LossGradient {
        loss,
        gradient,
        paths,
        peak_bytes,
    })
}

/// Monte Carlo mean of the loss over `n` Euler–Maruyama paths of the
/// Itô form of the latent SDE, differentiated pathwise with the noise held
/// fixed. Path `i` draws its increments from stream `i` of `seed`.
pub fn loss_and_gradient_mc(
    net: &NetworkFields,
    n: usize,
    seed: u64,
    data: &DataPath,
    spec: &VariationalSpec,
    settings: &SolverSettings,
) -> Result<LossGradient> {
    let integrand = Integrand::new(net, data, spec)?;
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    if settings.mc_steps == 0 {
        return Err(Error::InvalidParameter("mc_steps must be positive".into()));
    }
    let d = net.dx;
    let m = settings.mc_steps;
    let horizon = data.horizon();
    let h = horizon / m as f64;
    let sh = h.sqrt();
    let np = net.param_count();
    let prior = integrand.needs_prior();
    let times: Vec<f64> = (0..=m)
        .map(|s| if s == m { horizon } else { s as f64 * h })
        .collect();
    let w = 1.0 / n as f64;
    let one_path = |i: usize| -> Result<(f64, Vec<f64>, usize)> {
        let mut rng = path_rng(seed, i as u64);
        let noise: Vec<f64> = (0..m * d)
            .map(|_| sh * rng.sample::<f64, _>(StandardNormal))
            .collect();
        with_scratch(|tape, adj| {
            let p: Vec<Var> = net.params.iter().map(|&v| tape.var(v)).collect();
            let mut z: Vec<Var> = data.values()[0].iter().map(|&v| tape.var(v)).collect();
            let mut pieces = Vec::with_capacity(m + 1);
            for s in 0..m {
                let t = times[s];
                let at = net.eval_tape(tape, &p, t, &z, prior, true);
                pieces.push(integrand.eval(tape, t, &z, &at)?);
                z = (0..d)
                    .map(|j| {
                        // Itô drift f̃ + ½ g ∂g/∂z
                        let gg = tape.mul(at.g[j], at.dg_diag[j]);
                        let drift = tape.axpy(at.posterior[j], 0.5, gg);
                        let step = tape.axpy(z[j], h, drift);
                        tape.axpy(step, noise[s * d + j], at.g[j])
                    })
                    .collect();
                check_state(tape, &z, times[s + 1])?;
            }
            let at = net.eval_tape(tape, &p, horizon, &z, prior, false);
            pieces.push(integrand.eval(tape, horizon, &z, &at)?);
            let total = trapz_tape(tape, &times, &pieces);
            tape.backward_into(&[(total, w)], adj);
            Ok((w * tape.value(total), adj[..np].to_vec(), tape.bytes()))
        })
    };
    let parts: Vec<(f64, Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(one_path)
        .collect::<Result<_>>()?;
    reduce(parts, np, n)
}
