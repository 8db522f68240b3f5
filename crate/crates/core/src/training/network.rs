//! One-hidden-layer tanh networks on `(t, x)` for the prior drift, the
//! posterior drift and the diagonal diffusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::ode::{ItoFields, VectorFieldSet};

/// Dense `input -> hidden (tanh) -> output` layer pair stored at `offset`
/// in a shared parameter vector as `W1 (hidden x input), b1, W2 (output x
/// hidden), b2`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub offset: usize,
}

impl Mlp {
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn w1(&self, h: usize, i: usize) -> usize {
        self.offset + h * self.input + i
    }

    fn b1(&self, h: usize) -> usize {
        self.offset + self.hidden * self.input + h
    }

    fn w2(&self, o: usize, h: usize) -> usize {
        self.offset + self.hidden * (self.input + 1) + o * self.hidden + h
    }

    fn b2(&self, o: usize) -> usize {
        self.offset + self.hidden * (self.input + 1) + self.output * self.hidden + o
    }

    /// Plain evaluation.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let act: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let z: f64 = (0..self.input).map(|i| params[self.w1(h, i)] * x[i]).sum();
                (z + params[self.b1(h)]).tanh()
            })
            .collect();
        (0..self.output)
            .map(|o| {
                params[self.b2(o)]
                    + (0..self.hidden)
                        .map(|h| params[self.w2(o, h)] * act[h])
                        .sum::<f64>()
            })
            .collect()
    }

    /// `∂ out_o / ∂ x_j` for the non-time input `j`.
    pub fn input_derivative(&self, params: &[f64], x: &[f64], o: usize, j: usize) -> f64 {
        (0..self.hidden)
            .map(|h| {
                let z: f64 = (0..self.input).map(|i| params[self.w1(h, i)] * x[i]).sum();
                let a = (z + params[self.b1(h)]).tanh();
                params[self.w2(o, h)] * params[self.w1(h, j + 1)] * (1.0 - a * a)
            })
            .sum()
    }

    /// Taped evaluation; `t` enters as a constant first input. Returns the
    /// outputs and the hidden activations.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        t: f64,
        x: &[Var],
    ) -> (Vec<Var>, Vec<Var>) {
        debug_assert_eq!(x.len() + 1, self.input);
        let mut act = Vec::with_capacity(self.hidden);
        for h in 0..self.hidden {
            let tw = tape.scale(p[self.w1(h, 0)], t);
            let mut z = tape.add(tw, p[self.b1(h)]);
            for (i, &xi) in x.iter().enumerate() {
                let m = tape.mul(p[self.w1(h, i + 1)], xi);
                z = tape.add(z, m);
            }
            act.push(tape.tanh(z));
        }
        let mut out = Vec::with_capacity(self.output);
        for o in 0..self.output {
            let mut y = p[self.b2(o)];
            for (h, &a) in act.iter().enumerate() {
                let m = tape.mul(p[self.w2(o, h)], a);
                y = tape.add(y, m);
            }
            out.push(y);
        }
        (out, act)
    }

    /// `∂ out_o / ∂ x_j` (with `x` the non-time inputs) given the hidden
    /// activations from [`Mlp::forward_tape`].
    pub fn input_derivative_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        act: &[Var],
        o: usize,
        j: usize,
    ) -> Var {
        let mut acc: Option<Var> = None;
        for (h, &a) in act.iter().enumerate() {
            let a2 = tape.square(a);
            let neg = tape.scale(a2, -1.0);
            let sech2 = tape.add_const(neg, 1.0);
            let ww = tape.mul(p[self.w2(o, h)], p[self.w1(h, j + 1)]);
            let term = tape.mul(ww, sech2);
            acc = Some(match acc {
                Some(s) => tape.add(s, term),
                None => term,
            });
        }
        acc.unwrap_or_else(|| tape.var(0.0))
    }
}

/// How the diffusion network output becomes `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionMode {
    /// `g_i = g_min + softplus(out_i)`.
    Softplus { g_min: f64 },
    /// `g ≡ 0`; the diffusion parameters are ignored.
    Zero,
}

/// Prior drift `f_θ`, posterior drift `f̃_φ` and shared diagonal diffusion
/// `g_θ` with one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFields {
    pub dx: usize,
    pub hidden: usize,
    pub prior: Mlp,
    pub posterior: Mlp,
    pub diffusion: Mlp,
    pub mode: DiffusionMode,
    pub params: Vec<f64>,
}

/// Values of the three networks at one point, on a tape.
#[derive(Clone)]
pub(crate) struct TapedFields {
    pub prior: Vec<Var>,
    pub posterior: Vec<Var>,
    pub g: Vec<Var>,
    /// `∂ g_i / ∂ x_i`, only when requested.
    pub dg_diag: Vec<Var>,
}

impl NetworkFields {
    pub fn layout(dx: usize, hidden: usize, mode: DiffusionMode) -> Self {
        let prior = Mlp {
            input: dx + 1,
            hidden,
            output: dx,
            offset: 0,
        };
        let posterior = Mlp {
            offset: prior.param_count(),
            ..prior
        };
        let diffusion = Mlp {
            offset: 2 * prior.param_count(),
            ..prior
        };
        let n = 3 * prior.param_count();
        NetworkFields {
            dx,
            hidden,
            prior,
            posterior,
            diffusion,
            mode,
            params: vec![0.0; n],
        }
    }

    /// Gaussian initialization with standard deviation `scale / √fan_in`
    /// for weights, zero biases, and the diffusion output bias set so that
    /// `g` starts at `g_init`.
    pub fn init(
        dx: usize,
        hidden: usize,
        mode: DiffusionMode,
        scale: f64,
        g_init: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::layout(dx, hidden, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mlp in [net.prior, net.posterior, net.diffusion] {
            let n1 = Normal::new(0.0, scale / (mlp.input as f64).sqrt())
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let n2 = Normal::new(0.0, scale / (mlp.hidden as f64).sqrt())
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for h in 0..mlp.hidden {
                for i in 0..mlp.input {
                    net.params[mlp.w1(h, i)] = n1.sample(&mut rng);
                }
            }
            for o in 0..mlp.output {
                for h in 0..mlp.hidden {
                    net.params[mlp.w2(o, h)] = n2.sample(&mut rng);
                }
            }
        }
        if let DiffusionMode::Softplus { g_min } = mode {
            if !(g_init > g_min) {
                return Err(Error::InvalidParameter(format!(
                    "g_init {g_init} must exceed g_min {g_min}"
                )));
            }
            // softplus^{-1}(y) = ln(e^y - 1)
            let b = (g_init - g_min).exp_m1().ln();
            for o in 0..dx {
                net.params[net.diffusion.b2(o)] = b;
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Plain `(f, f̃, g)` at `(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut input = Vec::with_capacity(self.dx + 1);
        input.push(t);
        input.extend_from_slice(x);
        let f = self.prior.forward(&self.params, &input);
        let ft = self.posterior.forward(&self.params, &input);
        let g = match self.mode {
            DiffusionMode::Softplus { g_min } => self
                .diffusion
                .forward(&self.params, &input)
                .into_iter()
                .map(|o| g_min + softplus(o))
                .collect(),
            DiffusionMode::Zero => vec![0.0; self.dx],
        };
        (f, ft, g)
    }

    /// `∂ g_i / ∂ x_i` for every `i`.
    pub fn diffusion_diag_derivative(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self.mode {
            DiffusionMode::Softplus { .. } => {
                let mut input = Vec::with_capacity(self.dx + 1);
                input.push(t);
                input.extend_from_slice(x);
                let out = self.diffusion.forward(&self.params, &input);
                (0..self.dx)
                    .map(|i| {
                        sigmoid(out[i])
                            * self.diffusion.input_derivative(&self.params, &input, i, i)
                    })
                    .collect()
            }
            DiffusionMode::Zero => vec![0.0; self.dx],
        }
    }

    /// Stratonovich fields `V_0 = f̃`, `V_i = g_i e_i`.
    pub fn vector_fields(&self) -> VectorFieldSet {
        let (a, b) = (self.clone(), self.clone());
        VectorFieldSet::new(
            self.dx,
            self.dx,
            move |t, x, o| o.copy_from_slice(&a.eval(t, x).1),
            move |t, x, o| diagonal(&b.eval(t, x).2, o),
        )
    }

    /// Itô form of the same SDE: drift `f̃_i + ½ g_i ∂g_i/∂x_i`.
    pub fn ito_fields(&self) -> ItoFields {
        let (a, b) = (self.clone(), self.clone());
        ItoFields::new(
            self.dx,
            self.dx,
            move |t, x, o| {
                let (_, ft, g) = a.eval(t, x);
                let dg = a.diffusion_diag_derivative(t, x);
                for i in 0..o.len() {
                    o[i] = ft[i] + 0.5 * g[i] * dg[i];
                }
            },
            move |t, x, o| diagonal(&b.eval(t, x).2, o),
        )
    }

    /// Taped fields; `with_prior` adds `f`, `with_dg` adds `∂g_i/∂x_i`.
    pub(crate) fn eval_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        t: f64,
        x: &[Var],
        with_prior: bool,
        with_dg: bool,
    ) -> TapedFields {
        let posterior = self.posterior.forward_tape(tape, p, t, x).0;
        let prior = if with_prior {
            self.prior.forward_tape(tape, p, t, x).0
        } else {
            Vec::new()
        };
        let (g, dg_diag) = match self.mode {
            DiffusionMode::Softplus { g_min } => {
                let (out, act) = self.diffusion.forward_tape(tape, p, t, x);
                let mut g = Vec::with_capacity(self.dx);
                let mut dg = Vec::new();
                for (i, &o) in out.iter().enumerate() {
                    let sp = tape.softplus(o);
                    g.push(tape.add_const(sp, g_min));
                    if with_dg {
                        let d = self.diffusion.input_derivative_tape(tape, p, &act, i, i);
                        let s = tape.sigmoid(o);
                        dg.push(tape.mul(s, d));
                    }
                }
                (g, dg)
            }
            DiffusionMode::Zero => {
                let z = tape.var(0.0);
                (
                    vec![z; self.dx],
                    if with_dg {
                        vec![z; self.dx]
                    } else {
                        Vec::new()
                    },
                )
            }
        };
        TapedFields {
            prior,
            posterior,
            g,
            dg_diag,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn diagonal(g: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (i, &v) in g.iter().enumerate() {
        out[i * g.len() + i] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_weights_give_bias() {
        let mut net =
            NetworkFields::init(2, 4, DiffusionMode::Softplus { g_min: 0.1 }, 1.0, 0.5, 1).unwrap();
        let m = net.posterior;
        for o in 0..2 {
            for h in 0..4 {
                net.params[m.w2(o, h)] = 0.0;
            }
            net.params[m.b2(o)] = 0.25 * (o + 1) as f64;
        }
        let (_, ft, g) = net.eval(0.3, &[1.0, -2.0]);
        assert_eq!(ft, vec![0.25, 0.5]);
        assert!(g.iter().all(|&v| v > 0.1));
    }

    #[test]
    fn initial_diffusion_level() {
        let net = NetworkFields::init(1, 3, DiffusionMode::Softplus { g_min: 0.05 }, 0.0, 0.4, 2)
            .unwrap();
        let (_, _, g) = net.eval(0.0, &[0.7]);
        assert!((g[0] - 0.4).abs() < 1e-14);
    }

    #[test]
    fn taped_matches_plain_and_input_derivative() {
        let net =
            NetworkFields::init(2, 5, DiffusionMode::Softplus { g_min: 0.1 }, 1.0, 0.5, 3).unwrap();
        let x = [0.4, -0.9];
        let mut tape = Tape::new();
        let p: Vec<Var> = net.params.iter().map(|&v| tape.var(v)).collect();
        let xv: Vec<Var> = x.iter().map(|&v| tape.var(v)).collect();
        let tf = net.eval_tape(&mut tape, &p, 0.2, &xv, true, true);
        let (f, ft, g) = net.eval(0.2, &x);
        for i in 0..2 {
            assert!((tape.value(tf.prior[i]) - f[i]).abs() < 1e-15);
            assert!((tape.value(tf.posterior[i]) - ft[i]).abs() < 1e-15);
            assert!((tape.value(tf.g[i]) - g[i]).abs() < 1e-15);
            let h = 1e-6;
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (net.eval(0.2, &xp).2[i] - net.eval(0.2, &xm).2[i]) / (2.0 * h);
            assert!((tape.value(tf.dg_diag[i]) - fd).abs() < 1e-8);
            // the taped input derivative agrees with the reverse sweep
            let adj = tape.backward(&[(tf.g[i], 1.0)]);
            assert!((adj[xv[i].index()] - tape.value(tf.dg_diag[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip() {
        let net =
            NetworkFields::init(1, 2, DiffusionMode::Softplus { g_min: 0.1 }, 1.0, 0.5, 4).unwrap();
        assert_eq!(NetworkFields::from_json(&net.to_json()).unwrap(), net);
    }
}
