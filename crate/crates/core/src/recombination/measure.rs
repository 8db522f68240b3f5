use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// A weighted point cloud in `R^D` with nonnegative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(dim: usize) -> Self {
        DiscreteMeasure {
            dim,
            coords: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn from_points(points: &[Vec<f64>], weights: &[f64]) -> Self {
        assert_eq!(points.len(), weights.len());
        let dim = points.first().map_or(0, |p| p.len());
        let mut m = DiscreteMeasure::new(dim);
        for (p, &w) in points.iter().zip(weights) {
            m.push(p, w);
        }
        m
    }

    /// Unit point mass at `point`.
    pub fn dirac(point: &[f64]) -> Self {
        Self::from_points(&[point.to_vec()], &[1.0])
    }

    pub fn push(&mut self, point: &[f64], weight: f64) {
        assert_eq!(point.len(), self.dim, "point dimension");
        assert!(weight >= 0.0, "weights must be nonnegative");
        self.coords.extend_from_slice(point);
        self.weights.push(weight);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.len()).map(move |i| self.point(i))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Sub-measure on the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> DiscreteMeasure {
        let mut m = DiscreteMeasure::new(self.dim);
        for &i in indices {
            m.push(self.point(i), self.weights[i]);
        }
        m
    }

    /// `∫ f dμ`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points()
            .zip(&self.weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }

    /// Merges bitwise-identical points (keeping first appearance order) and
    /// drops zero-weight points.
    pub fn canonicalize(&self) -> DiscreteMeasure {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out = DiscreteMeasure::new(self.dim);
        for (p, &w) in self.points().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let key: Vec<u64> = p.iter().map(|x| canonical_bits(*x)).collect();
            match seen.get(&key) {
                Some(&j) => out.weights[j] += w,
                None => {
                    seen.insert(key, out.len());
                    out.push(p, w);
                }
            }
        }
        out
    }
}

/// Bit pattern used for exact point matching; `-0.0` and `0.0` coincide.
pub(crate) fn canonical_bits(x: f64) -> u64 {
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_merges_and_prunes() {
        let m = DiscreteMeasure::from_points(
            &[vec![1.0], vec![0.0], vec![-0.0], vec![2.0], vec![1.0]],
            &[0.1, 0.2, 0.3, 0.0, 0.4],
        );
        let c = m.canonicalize();
        assert_eq!(c.len(), 2);
        assert_eq!(c.point(0), &[1.0]);
        assert!((c.weights()[0] - 0.5).abs() < 1e-16);
        assert!((c.weights()[1] - 0.5).abs() < 1e-16);
    }
}
