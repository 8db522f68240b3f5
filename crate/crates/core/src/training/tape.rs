//! A scalar reverse-mode tape. Every node stores at most two parents with
//! their local partial derivatives, so the backward sweep is a single
//! reverse pass with no per-op dispatch.

const NONE: u32 = u32::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    values: Vec<f64>,
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            values: Vec::with_capacity(n),
            entries: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.entries.clear();
    }

    /// Bytes taken by the recorded nodes.
    pub fn bytes(&self) -> usize {
        self.len() * (std::mem::size_of::<f64>() + std::mem::size_of::<Entry>())
    }

    fn push(&mut self, value: f64, parents: [u32; 2], partials: [f64; 2]) -> Var {
        let id = self.values.len();
        assert!(id < NONE as usize, "tape overflow");
        self.values.push(value);
        self.entries.push(Entry { parents, partials });
        Var(id as u32)
    }

    /// A leaf (parameter, input or constant).
    pub fn var(&mut self, value: f64) -> Var {
        self.push(value, [NONE, NONE], [0.0, 0.0])
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    fn unary(&mut self, a: Var, value: f64, d: f64) -> Var {
        self.push(value, [a.0, NONE], [d, 0.0])
    }

    fn binary(&mut self, a: Var, b: Var, value: f64, da: f64, db: f64) -> Var {
        self.push(value, [a.0, b.0], [da, db])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(a, b, x * y, y, x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(a, b, x / y, 1.0 / y, -x / (y * y))
    }

    /// `a + c b`.
    pub fn axpy(&mut self, a: Var, c: f64, b: Var) -> Var {
        let v = self.value(a) + c * self.value(b);
        self.binary(a, b, v, 1.0, c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.unary(a, v, 1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.unary(a, v, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, x * x, 2.0 * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).tanh();
        self.unary(a, y, 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).exp();
        self.unary(a, y, y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, x.ln(), 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = sigmoid(self.value(a));
        self.unary(a, y, y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, softplus(x), sigmoid(x))
    }

    /// `Σ c_i v_i` as a chain of binary nodes.
    pub fn linear_combination(&mut self, terms: &[(f64, Var)]) -> Var {
        let Some(&(c0, v0)) = terms.first() else {
            return self.var(0.0);
        };
        let mut acc = self.scale(v0, c0);
        for &(c, v) in &terms[1..] {
            acc = self.axpy(acc, c, v);
        }
        acc
    }

    /// Adjoints of every node for the output `Σ c_i seeds_i`.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Vec<f64> {
        let mut adj = Vec::new();
        self.backward_into(seeds, &mut adj);
        adj
    }

    /// [`Tape::backward`] into a reusable buffer.
    pub fn backward_into(&self, seeds: &[(Var, f64)], adj: &mut Vec<f64>) {
        adj.clear();
        adj.resize(self.len(), 0.0);
        for &(v, c) in seeds {
            adj[v.index()] += c;
        }
        for i in (0..self.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let e = &self.entries[i];
            for k in 0..2 {
                let p = e.parents[k];
                if p != NONE {
                    adj[p as usize] += a * e.partials[k];
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_of_composite_expression() {
        let mut t = Tape::new();
        let x = t.var(0.7);
        let y = t.var(-1.3);
        // f = tanh(x y) + exp(x) / softplus(y) + ln(x^2)
        let xy = t.mul(x, y);
        let a = t.tanh(xy);
        let ex = t.exp(x);
        let sp = t.softplus(y);
        let b = t.div(ex, sp);
        let x2 = t.square(x);
        let c = t.ln(x2);
        let ab = t.add(a, b);
        let f = t.add(ab, c);
        let adj = t.backward(&[(f, 1.0)]);
        let (xv, yv) = (0.7f64, -1.3f64);
        let sech2 = 1.0 - (xv * yv).tanh().powi(2);
        let dfdx = sech2 * yv + xv.exp() / softplus(yv) + 2.0 / xv;
        let dfdy = sech2 * xv - xv.exp() * sigmoid(yv) / softplus(yv).powi(2);
        assert!((adj[x.index()] - dfdx).abs() < 1e-14);
        assert!((adj[y.index()] - dfdy).abs() < 1e-14);
    }

    #[test]
    fn linear_combination_and_seeds() {
        let mut t = Tape::new();
        let x = t.var(2.0);
        let y = t.var(3.0);
        let s = t.linear_combination(&[(2.0, x), (-1.0, y), (0.5, x)]);
        assert_eq!(t.value(s), 2.0);
        let adj = t.backward(&[(s, 2.0), (y, 1.0)]);
        assert_eq!((adj[x.index()], adj[y.index()]), (5.0, -1.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
    }
}
