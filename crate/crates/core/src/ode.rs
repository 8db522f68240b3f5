//! Vector fields, Itô-to-Stratonovich conversion, the RK4 controlled-ODE
//! solver along piecewise-linear driving paths, and the Euler–Maruyama
//! baseline.
//!
//! States are time-augmented: component 0 is time and components
//! `1..=d_x` are the spatial state.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::formula::PiecewisePath;

/// `(t, x, out)`: writes a length-`d_x` vector.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)`: writes the `d_x × d_b` matrix row-major,
/// `out[j * d_b + i] = σ_{j,i}`.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)`: `out[(j * d_b + i) * d_x + l] = ∂σ_{j,i} / ∂x_l`.
pub type JacobianFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Drift and diffusion of an Itô SDE `dX = μ dt + σ dB`.
#[derive(Clone)]
pub struct ItoFields {
    dx: usize,
    db: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    jacobian: Option<JacobianFn>,
}

impl ItoFields {
    pub fn new(
        dx: usize,
        db: usize,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        ItoFields {
            dx,
            db,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            jacobian: None,
        }
    }

    /// Supplies an analytic diffusion Jacobian for the Stratonovich
    /// correction.
    pub fn with_jacobian(
        mut self,
        jac: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn db(&self) -> usize {
        self.db
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }
}

/// Stratonovich vector fields `V_0, …, V_{d_b}` on the augmented state.
/// The time component of `V_0` is 1 and of every other field 0.
#[derive(Clone)]
pub struct VectorFieldSet {
    dx: usize,
    db: usize,
    v0: DriftFn,
    sigma: DiffusionFn,
}

impl VectorFieldSet {
    pub fn new(
        dx: usize,
        db: usize,
        v0: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        sigma: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        VectorFieldSet {
            dx,
            db,
            v0: Arc::new(v0),
            sigma: Arc::new(sigma),
        }
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn db(&self) -> usize {
        self.db
    }

    pub fn state_dim(&self) -> usize {
        self.dx + 1
    }

    /// Augmented `V_i(state)`.
    pub fn eval(&self, i: usize, state: &[f64], out: &mut [f64]) {
        let (t, x) = (state[0], &state[1..]);
        if i == 0 {
            out[0] = 1.0;
            (self.v0)(t, x, &mut out[1..]);
        } else {
            out[0] = 0.0;
            let mut s = vec![0.0; self.dx * self.db];
            (self.sigma)(t, x, &mut s);
            for j in 0..self.dx {
                out[1 + j] = s[j * self.db + i - 1];
            }
        }
    }

    /// `Σ_i V_i(state) rates_i` with `rates[0]` the time rate.
    fn velocity(&self, state: &[f64], rates: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let (t, x) = (state[0], &state[1..]);
        out[0] = rates[0];
        (self.v0)(t, x, &mut out[1..]);
        if rates[0] != 1.0 {
            out[1..].iter_mut().for_each(|v| *v *= rates[0]);
        }
        if rates[1..].iter().any(|&r| r != 0.0) {
            (self.sigma)(t, x, scratch);
            for j in 0..self.dx {
                let row = &scratch[j * self.db..(j + 1) * self.db];
                out[1 + j] += row.iter().zip(&rates[1..]).map(|(s, r)| s * r).sum::<f64>();
            }
        }
    }
}

/// Forward-difference Jacobian of `σ`, step `√ε (1 + |x_l|)`.
fn fd_jacobian(diffusion: &DiffusionFn, dx: usize, db: usize, t: f64, x: &[f64], out: &mut [f64]) {
    let mut base = vec![0.0; dx * db];
    let mut bumped = vec![0.0; dx * db];
    diffusion(t, x, &mut base);
    let mut xp = x.to_vec();
    for l in 0..dx {
        let h = f64::EPSILON.sqrt() * (1.0 + x[l].abs());
        xp[l] = x[l] + h;
        let h = xp[l] - x[l];
        diffusion(t, &xp, &mut bumped);
        xp[l] = x[l];
        for r in 0..dx * db {
            out[r * dx + l] = (bumped[r] - base[r]) / h;
        }
    }
}

/// `V_0 = μ − ½ Σ_i dσ_i · σ_i`, `V_i = σ_i`.
pub fn ito_to_stratonovich(ito: &ItoFields) -> Result<VectorFieldSet> {
    if ito.dx == 0 || ito.db == 0 {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} and driving dimension {} must be positive",
            ito.dx, ito.db
        )));
    }
    let (dx, db) = (ito.dx, ito.db);
    let drift = ito.drift.clone();
    let diffusion = ito.diffusion.clone();
    let jacobian = ito.jacobian.clone();
    let v0 = move |t: f64, x: &[f64], out: &mut [f64]| {
        drift(t, x, out);
        let mut s = vec![0.0; dx * db];
        let mut jac = vec![0.0; dx * db * dx];
        diffusion(t, x, &mut s);
        match &jacobian {
            Some(j) => j(t, x, &mut jac),
            None => fd_jacobian(&diffusion, dx, db, t, x, &mut jac),
        }
        for j in 0..dx {
            let mut corr = 0.0;
            for i in 0..db {
                for l in 0..dx {
                    corr += jac[(j * db + i) * dx + l] * s[l * db + i];
                }
            }
            out[j] -= 0.5 * corr;
        }
    };
    Ok(VectorFieldSet {
        dx,
        db,
        v0: Arc::new(v0),
        sigma: ito.diffusion.clone(),
    })
}

/// `(0, ζ(v))`, with `v = 0` of length `input_dim` when absent.
pub fn initial_state(
    zeta: impl Fn(&[f64]) -> Vec<f64>,
    v: Option<&[f64]>,
    input_dim: usize,
) -> Vec<f64> {
    let zero = vec![0.0; input_dim];
    let x = zeta(v.unwrap_or(&zero));
    let mut state = Vec::with_capacity(x.len() + 1);
    state.push(0.0);
    state.extend(x);
    state
}

/// Grid times and augmented states, linearly interpolated between grid
/// points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    stride: usize,
    times: Vec<f64>,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(stride: usize) -> Self {
        Trajectory {
            stride,
            times: Vec::new(),
            states: Vec::new(),
        }
    }

    pub fn push(&mut self, t: f64, state: &[f64]) {
        debug_assert_eq!(state.len(), self.stride);
        self.times.push(t);
        self.states.extend_from_slice(state);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Spatial dimension `d_x`.
    pub fn dx(&self) -> usize {
        self.stride - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.stride..(i + 1) * self.stride]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Augmented state at time `t` (clamped to the grid).
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let n = self.len();
        if t <= self.times[0] {
            return self.state(0).to_vec();
        }
        if t >= self.times[n - 1] {
            return self.state(n - 1).to_vec();
        }
        let j = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let a = (t - t0) / (t1 - t0);
        self.state(j)
            .iter()
            .zip(self.state(j + 1))
            .map(|(x, y)| x + a * (y - x))
            .collect()
    }

    /// CSV with header `t,x0,…,x{d_x}` (x0 is the time component).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for j in 0..self.stride {
            write!(out, ",x{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{}", self.times[i]).unwrap();
            for v in self.state(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn check_finite(state: &[f64], t: f64) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t })
    }
}

/// Classical RK4 on `φ' = Σ_i V_i(φ) dω^i/dt` with `steps_per_segment`
/// steps inside each linear piece of `path`.
pub fn solve_controlled_ode(
    fields: &VectorFieldSet,
    path: &PiecewisePath,
    x0: &[f64],
    steps_per_segment: usize,
) -> Result<Trajectory> {
    if path.dim() != fields.db {
        return Err(Error::DimensionMismatch(format!(
            "path has {} driving components, fields expect {}",
            path.dim(),
            fields.db
        )));
    }
    if x0.len() != fields.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            fields.state_dim()
        )));
    }
    if steps_per_segment == 0 {
        return Err(Error::InvalidParameter(
            "steps_per_segment must be positive".into(),
        ));
    }
    let n = fields.state_dim();
    let bps = path.breakpoints();
    let vals = path.values();
    let mut traj = Trajectory::new(n);
    let mut x = x0.to_vec();
    x[0] = bps[0];
    traj.push(bps[0], &x);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut scratch = vec![0.0; fields.dx * fields.db];
    let mut rates = vec![0.0; fields.db + 1];
    for seg in 0..bps.len() - 1 {
        let (ta, tb) = (bps[seg], bps[seg + 1]);
        let dt = tb - ta;
        for (r, (a, b)) in rates.iter_mut().zip(vals[seg].iter().zip(&vals[seg + 1])) {
            *r = (b - a) / dt;
        }
        let h = dt / steps_per_segment as f64;
        for step in 0..steps_per_segment {
            fields.velocity(&x, &rates, &mut k1, &mut scratch);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            fields.velocity(&tmp, &rates, &mut k2, &mut scratch);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            fields.velocity(&tmp, &rates, &mut k3, &mut scratch);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            fields.velocity(&tmp, &rates, &mut k4, &mut scratch);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let t = if step + 1 == steps_per_segment {
                tb
            } else {
                ta + (step + 1) as f64 * h
            };
            x[0] = t;
            check_finite(&x, t)?;
            traj.push(t, &x);
        }
    }
    Ok(traj)
}

/// Euler–Maruyama on `[0, horizon]` with `steps` equal steps, drawing
/// increments from `rng`.
pub fn solve_sde_mc_with_rng<R: Rng + ?Sized>(
    ito: &ItoFields,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidParameter("grid size must be positive".into()));
    }
    if x0.len() != ito.dx + 1 {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            ito.dx + 1
        )));
    }
    let (dx, db) = (ito.dx, ito.db);
    let h = horizon / steps as f64;
    let sh = h.sqrt();
    let mut traj = Trajectory::new(dx + 1);
    let mut x = x0.to_vec();
    x[0] = 0.0;
    traj.push(0.0, &x);
    let mut mu = vec![0.0; dx];
    let mut sig = vec![0.0; dx * db];
    let mut db_inc = vec![0.0; db];
    for step in 0..steps {
        let t = x[0];
        ito.drift(t, &x[1..], &mut mu);
        ito.diffusion(t, &x[1..], &mut sig);
        for z in db_inc.iter_mut() {
            *z = sh * rng.sample::<f64, _>(StandardNormal);
        }
        for j in 0..dx {
            let noise: f64 = sig[j * db..(j + 1) * db]
                .iter()
                .zip(&db_inc)
                .map(|(s, z)| s * z)
                .sum();
            x[1 + j] += mu[j] * h + noise;
        }
        let t1 = if step + 1 == steps {
            horizon
        } else {
            (step + 1) as f64 * h
        };
        x[0] = t1;
        check_finite(&x, t1)?;
        traj.push(t1, &x);
    }
    Ok(traj)
}

/// Reproducible Euler–Maruyama path: the same seed gives the same path
/// bit for bit.
pub fn solve_sde_mc(
    ito: &ItoFields,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    solve_sde_mc_with_rng(ito, x0, horizon, steps, &mut rng)
}

/// Generator for path `index` of a seeded batch. Each path has its own
/// stream, so results do not depend on how paths are scheduled.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::degree3_formula;

    fn scalar_linear() -> ItoFields {
        ItoFields::new(1, 1, |_, _, o| o[0] = 0.0, |_, x, o| o[0] = x[0])
    }

    #[test]
    fn constant_sigma_keeps_drift() {
        let ito = ItoFields::new(1, 1, |_, x, o| o[0] = -x[0], |_, _, o| o[0] = 0.7);
        let v = ito_to_stratonovich(&ito).unwrap();
        let mut out = [0.0; 2];
        v.eval(0, &[0.0, 2.0], &mut out);
        assert_eq!(out, [1.0, -2.0]);
    }

    #[test]
    fn linear_sigma_correction() {
        let v = ito_to_stratonovich(&scalar_linear()).unwrap();
        let mut out = [0.0; 2];
        for x in [-3.0, 0.5, 2.0] {
            v.eval(0, &[0.0, x], &mut out);
            assert!(
                (out[1] + x / 2.0).abs() < 1e-7 * (1.0 + x.abs()),
                "{x}: {}",
                out[1]
            );
        }
        let exact = scalar_linear().with_jacobian(|_, _, o| o[0] = 1.0);
        let v = ito_to_stratonovich(&exact).unwrap();
        v.eval(0, &[0.0, 3.0], &mut out);
        assert_eq!(out[1], -1.5);
    }

    #[test]
    fn correction_shifts_with_drift() {
        let a = ItoFields::new(1, 1, |_, _, o| o[0] = 0.0, |_, x, o| o[0] = x[0].sin());
        let b = ItoFields::new(
            1,
            1,
            |_, x, o| o[0] = x[0] * x[0],
            |_, x, o| o[0] = x[0].sin(),
        );
        let (va, vb) = (
            ito_to_stratonovich(&a).unwrap(),
            ito_to_stratonovich(&b).unwrap(),
        );
        let (mut oa, mut ob) = ([0.0; 2], [0.0; 2]);
        va.eval(0, &[0.0, 1.3], &mut oa);
        vb.eval(0, &[0.0, 1.3], &mut ob);
        assert!((ob[1] - oa[1] - 1.69).abs() < 1e-14);
    }

    #[test]
    fn constant_fields_integrate_linearly() {
        let v = VectorFieldSet::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, o| o[0] = 1.0);
        let z = 1.7;
        let path = PiecewisePath::new(vec![0.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, z]]).unwrap();
        let tr = solve_controlled_ode(&v, &path, &[0.0, 0.5], 4).unwrap();
        assert!((tr.last_state()[1] - (0.5 + z)).abs() < 1e-14);
        let mid = tr.value_at(0.5);
        assert!((mid[1] - (0.5 + z / 2.0)).abs() < 1e-14);
    }

    fn exp_error(steps: usize) -> f64 {
        let v = VectorFieldSet::new(1, 1, |_, _, o| o[0] = 0.0, |_, x, o| o[0] = x[0]);
        let path =
            PiecewisePath::new(vec![0.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let tr = solve_controlled_ode(&v, &path, &[0.0, 2.0], steps).unwrap();
        (tr.last_state()[1] - 2.0 * std::f64::consts::E).abs()
    }

    #[test]
    fn scalar_exponential_fourth_order() {
        assert!(exp_error(100) < 1e-8);
        let (e1, e2) = (exp_error(8), exp_error(16));
        assert!(e1 / e2 >= 8.0 * 0.9 * 1.0, "ratio {}", e1 / e2);
        assert!((e1 / e2).log2() >= 3.8, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn zero_path_follows_corrected_drift() {
        let v = ito_to_stratonovich(&scalar_linear().with_jacobian(|_, _, o| o[0] = 1.0)).unwrap();
        let path =
            PiecewisePath::new(vec![0.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let tr = solve_controlled_ode(&v, &path, &[0.0, 1.5], 64).unwrap();
        for (i, &t) in tr.times().iter().enumerate() {
            assert!((tr.state(i)[0] - t).abs() <= 1e-12);
            assert!((tr.state(i)[1] - 1.5 * (-t / 2.0).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn degree3_second_moment_of_brownian_motion() {
        let f = degree3_formula(1).unwrap();
        let v = VectorFieldSet::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, o| o[0] = 1.0);
        let est: f64 = f
            .paths()
            .iter()
            .zip(f.weights())
            .map(|(p, w)| {
                let x = solve_controlled_ode(&v, p, &[0.0, 0.0], 8)
                    .unwrap()
                    .last_state()[1];
                w * x * x
            })
            .sum();
        assert!((est - 1.0).abs() < 1e-14);
    }

    #[test]
    fn blow_up_is_reported() {
        let v = VectorFieldSet::new(
            1,
            1,
            |_, x, o| o[0] = x[0] * x[0] * x[0] * x[0],
            |_, _, o| o[0] = 0.0,
        );
        let path =
            PiecewisePath::new(vec![0.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            solve_controlled_ode(&v, &path, &[0.0, 1e80], 4),
            Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn zero_noise_mc_is_seed_free() {
        let ito = ItoFields::new(1, 1, |_, x, o| o[0] = -x[0], |_, _, o| o[0] = 0.0);
        let a = solve_sde_mc(&ito, &[0.0, 1.0], 1.0, 10, 1).unwrap();
        let b = solve_sde_mc(&ito, &[0.0, 1.0], 1.0, 10, 2).unwrap();
        assert_eq!(a, b);
        assert!((a.last_state()[1] - 0.9f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn mc_seeded_reproducible() {
        let ito = ItoFields::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, o| o[0] = 1.0);
        assert_eq!(
            solve_sde_mc(&ito, &[0.0, 0.0], 1.0, 16, 9).unwrap(),
            solve_sde_mc(&ito, &[0.0, 0.0], 1.0, 16, 9).unwrap()
        );
        assert_ne!(
            solve_sde_mc(&ito, &[0.0, 0.0], 1.0, 16, 9).unwrap(),
            solve_sde_mc(&ito, &[0.0, 0.0], 1.0, 16, 10).unwrap()
        );
    }

    #[test]
    fn brownian_moments_by_mc() {
        let ito = ItoFields::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, o| o[0] = 1.0);
        let n = 100_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = path_rng(3, i);
            let x = solve_sde_mc_with_rng(&ito, &[0.0, 0.0], 1.0, 4, &mut rng)
                .unwrap()
                .last_state()[1];
            m1 += x;
            m2 += x * x;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 4.0 / (n as f64).sqrt(), "{m1}");
        assert!((m2 - 1.0).abs() < 0.02, "{m2}");
    }

    #[test]
    fn initial_state_examples() {
        assert_eq!(initial_state(|v| v.to_vec(), None, 2), vec![0.0, 0.0, 0.0]);
        assert_eq!(
            initial_state(|_| vec![3.0], Some(&[9.0]), 1),
            vec![0.0, 3.0]
        );
    }

    #[test]
    fn csv_export() {
        let mut t = Trajectory::new(2);
        t.push(0.0, &[0.0, 1.0]);
        t.push(0.5, &[0.5, 2.0]);
        assert_eq!(t.to_csv(), "t,x0,x1\n0,0,1\n0.5,0.5,2\n");
    }
}
