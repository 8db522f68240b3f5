//! Time partitions, Brownian scaling of unit-interval formula paths and the
//! `q^k`-leaf cubature path tree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{CubatureFormula, PiecewisePath};

/// Upper bound on the number of leaves a tree may have before enumeration is
/// refused.
pub const MAX_TREE_LEAVES: u64 = 1 << 40;

/// The grid `t_i = T (1 - (1 - i/k)^γ)`, `i = 0..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePartition {
    horizon: f64,
    gamma: f64,
    knots: Vec<f64>,
}

impl TimePartition {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of subintervals.
    pub fn k(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Length `s_i = t_i - t_{i-1}` of subinterval `i` (1-based).
    pub fn step(&self, i: usize) -> f64 {
        self.knots[i] - self.knots[i - 1]
    }

    pub fn steps(&self) -> Vec<f64> {
        self.knots.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Builds the γ-power partition of `[0, horizon]` into `k` pieces.
pub fn make_partition(horizon: f64, k: usize, gamma: f64) -> Result<TimePartition> {
    if !(horizon > 0.0) || k == 0 || !(gamma > 0.0) || !horizon.is_finite() || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "partition needs T > 0, k >= 1, gamma > 0 (got T={horizon}, k={k}, gamma={gamma})"
        )));
    }
    let mut knots: Vec<f64> = (0..=k)
        .map(|i| horizon * (1.0 - (1.0 - i as f64 / k as f64).powf(gamma)))
        .collect();
    knots[0] = 0.0;
    knots[k] = horizon;
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(format!(
            "gamma = {gamma} with k = {k} produces a degenerate subinterval"
        )));
    }
    Ok(TimePartition {
        horizon,
        gamma,
        knots,
    })
}

/// Maps a unit-interval path onto `[offset, offset + s]`: Brownian
/// components become `√s ω(τ)` and time advances by `s`.
pub fn scale_path(unit_path: &PiecewisePath, s: f64, offset: f64) -> PiecewisePath {
    let root = s.sqrt();
    let breakpoints: Vec<f64> = unit_path
        .breakpoints()
        .iter()
        .map(|&tau| offset + s * tau)
        .collect();
    let values = unit_path
        .values()
        .iter()
        .zip(&breakpoints)
        .map(|(v, &t)| {
            let mut out = Vec::with_capacity(v.len());
            out.push(t);
            out.extend(v[1..].iter().map(|x| root * x));
            out
        })
        .collect();
    PiecewisePath::new(breakpoints, values).expect("scaling preserves path validity")
}

/// Per-subinterval choice of formula path, 0-based (`entries[i] < q`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexVector(pub Vec<usize>);

impl IndexVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Base-`q` code with the first subinterval as the most significant
    /// digit.
    pub fn code(&self, q: usize) -> u64 {
        self.0
            .iter()
            .fold(0u64, |acc, &d| acc * q as u64 + d as u64)
    }

    pub fn from_code(code: u64, q: usize, len: usize) -> Self {
        let mut digits = vec![0; len];
        let mut c = code;
        for slot in digits.iter_mut().rev() {
            *slot = (c % q as u64) as usize;
            c /= q as u64;
        }
        IndexVector(digits)
    }
}

/// A concatenated cubature path together with the index vector that built
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct CubaturePath {
    pub path: PiecewisePath,
    pub index: IndexVector,
}

/// Concatenates the scaled formula paths chosen by `iv`, each segment
/// starting at the previous endpoint.
pub fn concat_path(
    formula: &CubatureFormula,
    partition: &TimePartition,
    iv: &IndexVector,
) -> Result<CubaturePath> {
    if iv.len() != partition.k() {
        return Err(Error::DimensionMismatch(format!(
            "index vector of length {} for {} subintervals",
            iv.len(),
            partition.k()
        )));
    }
    let q = formula.len();
    let dim = formula.dim();
    let knots = partition.knots();
    let mut breakpoints = vec![0.0];
    let mut values = vec![vec![0.0; dim + 1]];
    for (i, &j) in iv.0.iter().enumerate() {
        if j >= q {
            return Err(Error::IndexOutOfRange { index: j, paths: q });
        }
        let (t0, t1) = (knots[i], knots[i + 1]);
        let s = t1 - t0;
        let root = s.sqrt();
        let base = values.last().unwrap().clone();
        let unit = &formula.paths()[j];
        let taus = unit.breakpoints();
        for (n, (&tau, v)) in taus.iter().zip(unit.values()).enumerate().skip(1) {
            let t = if n + 1 == taus.len() {
                t1
            } else {
                t0 + s * tau
            };
            let mut out = Vec::with_capacity(dim + 1);
            out.push(t);
            out.extend(v[1..].iter().zip(&base[1..]).map(|(x, b)| b + root * x));
            breakpoints.push(t);
            values.push(out);
        }
    }
    Ok(CubaturePath {
        path: PiecewisePath::new(breakpoints, values)?,
        index: iv.clone(),
    })
}

/// One leaf of the path tree with its product weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLeaf {
    pub index: IndexVector,
    pub weight: f64,
}

/// Lexicographic stream over all `q^k` leaves.
#[derive(Debug, Clone)]
pub struct LeafIter<'a> {
    weights: &'a [f64],
    current: Option<Vec<usize>>,
}

impl Iterator for LeafIter<'_> {
    type Item = WeightedLeaf;

    fn next(&mut self) -> Option<WeightedLeaf> {
        let cur = self.current.as_mut()?;
        let weight = cur.iter().map(|&j| self.weights[j]).product();
        let leaf = WeightedLeaf {
            index: IndexVector(cur.clone()),
            weight,
        };
        // odometer increment, last digit fastest
        let q = self.weights.len();
        let mut pos = cur.len();
        loop {
            if pos == 0 {
                self.current = None;
                break;
            }
            pos -= 1;
            cur[pos] += 1;
            if cur[pos] < q {
                break;
            }
            cur[pos] = 0;
        }
        Some(leaf)
    }
}

/// Streams every leaf of the tree in lexicographic index order.
pub fn enumerate_leaves<'a>(
    formula: &'a CubatureFormula,
    partition: &TimePartition,
) -> Result<LeafIter<'a>> {
    let q = formula.len();
    let k = partition.k();
    leaf_count(q, k)?;
    Ok(LeafIter {
        weights: formula.weights(),
        current: Some(vec![0; k]),
    })
}

/// `q^k`, or [`Error::TreeTooLarge`] above the 2^40 guard.
pub fn leaf_count(q: usize, k: usize) -> Result<u64> {
    let mut n: u64 = 1;
    for _ in 0..k {
        n = n.saturating_mul(q as u64);
        if n > MAX_TREE_LEAVES {
            return Err(Error::TreeTooLarge { paths: q, depth: k });
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{degree3_formula, degree5_formula};
    use crate::signature::Word;

    #[test]
    fn partition_examples() {
        assert_eq!(
            make_partition(1.0, 2, 1.0).unwrap().knots(),
            &[0.0, 0.5, 1.0]
        );
        assert_eq!(
            make_partition(1.0, 2, 2.0).unwrap().knots(),
            &[0.0, 0.75, 1.0]
        );
        let p = make_partition(1.0, 4, 0.6).unwrap();
        // 1 - 0.75^0.6 = 0.158533640915350385614...
        assert!((p.knots()[1] - 0.158_533_640_915_350_4).abs() < 1e-14);
        assert_eq!(p.knots()[4], 1.0);
        assert!(make_partition(0.0, 2, 1.0).is_err());
        assert!(make_partition(1.0, 0, 1.0).is_err());
        assert!(make_partition(1.0, 2, -1.0).is_err());
    }

    #[test]
    fn scale_path_examples() {
        let unit = PiecewisePath::unit_from_knots(&[vec![1.0]]).unwrap();
        assert_eq!(scale_path(&unit, 1.0, 0.0), unit);
        let s4 = scale_path(&unit, 4.0, 0.0);
        assert_eq!(s4.endpoint(), &[4.0, 2.0]);
        let s = 0.25;
        let scaled = scale_path(&unit, s, 0.3);
        let w = Word::new([1, 1]);
        assert!((scaled.iterated_integral(&w) - s * 0.5).abs() < 1e-15);
        assert!((scaled.endpoint()[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn concat_two_slopes() {
        let f = degree3_formula(1).unwrap();
        let p = make_partition(1.0, 2, 1.0).unwrap();
        let cp = concat_path(&f, &p, &IndexVector(vec![0, 1])).unwrap();
        let mid = cp.path.value_at(0.5);
        assert!((mid[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cp.path.endpoint()[1].abs() < 1e-15);
        assert_eq!(cp.path.values()[0], vec![0.0, 0.0]);
        assert!(matches!(
            concat_path(&f, &p, &IndexVector(vec![0, 2])),
            Err(Error::IndexOutOfRange { index: 2, paths: 2 })
        ));
    }

    #[test]
    fn single_interval_is_scaled_formula_path() {
        let f = degree5_formula(1).unwrap();
        let p = make_partition(2.0, 1, 0.6).unwrap();
        let cp = concat_path(&f, &p, &IndexVector(vec![0])).unwrap();
        assert_eq!(cp.path, scale_path(&f.paths()[0], 2.0, 0.0));
    }

    #[test]
    fn leaf_counts_and_weights() {
        let f5 = degree5_formula(1).unwrap();
        let p5 = make_partition(1.0, 5, 0.6).unwrap();
        assert_eq!(enumerate_leaves(&f5, &p5).unwrap().count(), 243);
        let p2 = make_partition(1.0, 2, 0.6).unwrap();
        let leaves: Vec<_> = enumerate_leaves(&f5, &p2).unwrap().collect();
        assert_eq!(leaves.len(), 9);
        assert!((leaves.iter().map(|l| l.weight).sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(leaves[1].index, IndexVector(vec![0, 1]));

        let f3 = degree3_formula(1).unwrap();
        let p1 = make_partition(1.0, 1, 1.0).unwrap();
        let w: Vec<f64> = enumerate_leaves(&f3, &p1)
            .unwrap()
            .map(|l| l.weight)
            .collect();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn tree_guard() {
        assert!(matches!(
            leaf_count(16, 11),
            Err(Error::TreeTooLarge { .. })
        ));
        assert_eq!(leaf_count(2, 40).unwrap(), 1 << 40);
    }

    #[test]
    fn index_codes_round_trip() {
        let iv = IndexVector(vec![2, 0, 1]);
        assert_eq!(iv.code(3), 19);
        assert_eq!(IndexVector::from_code(19, 3, 3), iv);
    }
}
