use serde::{Deserialize, Serialize};

/// Monomials of total degree `1..=max_degree` in `dim` variables. The
/// constant is excluded; mass is constrained separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBasis {
    dim: usize,
    max_degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl TestBasis {
    pub fn new(dim: usize, max_degree: usize) -> Self {
        let mut exponents = Vec::new();
        for deg in 1..=max_degree {
            let mut current = vec![0u32; dim];
            push_compositions(&mut exponents, &mut current, 0, deg as u32);
        }
        TestBasis {
            dim,
            max_degree,
            exponents,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Number of test functions `N_p = C(D + deg, deg) - 1`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Evaluates every monomial at `x` into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = x.iter().zip(e).map(|(xi, &p)| xi.powi(p as i32)).product();
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }
}

fn push_compositions(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}
