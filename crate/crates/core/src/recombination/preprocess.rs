//! The pre-processing loop: propagate a point mass through the cubature
//! tree in driving-increment space, recombining after each interior step,
//! and read off the surviving tree prefixes with their weights.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::TestBasis;
use super::localize::{localize, localize_pointwise, Localization};
use super::measure::{canonical_bits, DiscreteMeasure};
use super::reduce::rmp_indices;
use crate::error::{Error, Result};
use crate::formula::CubatureFormula;
use crate::partition::{IndexVector, TimePartition};

/// `KLV(μ, s)`: every point `x` with weight `w` spawns `q` children
/// `x + √s b_j` with weights `w λ_j`, where `b_j` are the Brownian
/// endpoints of the formula paths. Children of point `n` occupy positions
/// `n q .. n q + q`; no merging is done.
pub fn klv_step(measure: &DiscreteMeasure, formula: &CubatureFormula, s: f64) -> DiscreteMeasure {
    assert_eq!(
        measure.dim(),
        formula.dim(),
        "measure lives in the driving space"
    );
    let root = s.sqrt();
    let ends = formula.brownian_endpoints();
    let mut out = DiscreteMeasure::new(measure.dim());
    let mut buf = vec![0.0; measure.dim()];
    for (p, &w) in measure.points().zip(measure.weights()) {
        for (e, &lam) in ends.iter().zip(formula.weights()) {
            for ((b, x), y) in buf.iter_mut().zip(p).zip(e) {
                *b = x + root * y;
            }
            out.push(&buf, w * lam);
        }
    }
    out
}

/// How the localization radius for interval `i` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadiusPolicy {
    /// `u_i = s_i^{p*/(2γ)}`.
    Hormander { p_star: f64 },
    /// The same radius on every interval.
    Fixed { radius: f64 },
    /// One ball per distinct point; recombination never fires.
    PerPoint,
}

impl RadiusPolicy {
    fn radius(&self, s: f64, gamma: f64) -> Option<f64> {
        match *self {
            RadiusPolicy::Hormander { p_star } => Some(s.powf(p_star / (2.0 * gamma))),
            RadiusPolicy::Fixed { radius } => Some(radius),
            RadiusPolicy::PerPoint => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            RadiusPolicy::Hormander { p_star } => p_star > 0.0 && p_star.is_finite(),
            RadiusPolicy::Fixed { radius } => radius > 0.0 && radius.is_finite(),
            RadiusPolicy::PerPoint => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid radius policy {self:?}"
            )))
        }
    }
}

/// Reproducibility record written next to a weight table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessManifest {
    pub formula_fingerprint: String,
    pub formula_degree: usize,
    pub paths: usize,
    pub driving_dim: usize,
    pub horizon: f64,
    pub gamma: f64,
    pub knots: Vec<f64>,
    pub basis_degree: usize,
    pub test_functions: usize,
    pub radius_policy: RadiusPolicy,
    /// Radius used on each interval; `None` where no recombination ran.
    pub radii: Vec<Option<f64>>,
    /// Distinct support points after each interval's step.
    pub support: Vec<usize>,
    /// Surviving tree prefixes per interval.
    pub survivors: Vec<usize>,
    /// Localization balls per interval (0 where no recombination ran).
    pub balls: Vec<usize>,
    /// Largest outer-loop iteration count of any recombine call.
    pub max_recombine_iterations: usize,
    pub seconds: f64,
}

/// Surviving tree prefixes per interval and their weights.
///
/// `intervals[i]` holds `(prefix code, weight)` pairs for prefixes of
/// length `i + 1`, sorted by code. The weight is the mass of the reduced
/// measure after interval `i + 1` attributed to that prefix; each interval's
/// weights sum to one. Leaf weights are the last interval's entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub intervals: Vec<Vec<(u64, f64)>>,
    pub manifest: PreprocessManifest,
}

impl WeightTable {
    pub fn k(&self) -> usize {
        self.intervals.len()
    }

    pub fn q(&self) -> usize {
        self.manifest.paths
    }

    /// Surviving leaves with their weights, in index order.
    pub fn leaves(&self) -> impl Iterator<Item = (IndexVector, f64)> + '_ {
        let (q, k) = (self.q(), self.k());
        self.intervals
            .last()
            .into_iter()
            .flatten()
            .map(move |&(code, w)| (IndexVector::from_code(code, q, k), w))
    }

    pub fn leaf_count(&self) -> usize {
        self.intervals.last().map_or(0, |v| v.len())
    }

    /// Weight of a prefix (length `1..=k`) or 0 if it did not survive.
    pub fn prefix_weight(&self, prefix: &IndexVector) -> f64 {
        let Some(level) = self.intervals.get(prefix.len().wrapping_sub(1)) else {
            return 0.0;
        };
        let code = prefix.code(self.q());
        level
            .binary_search_by_key(&code, |e| e.0)
            .map_or(0.0, |pos| level[pos].1)
    }

    /// Conditional weight `λ̃` of the last step of `prefix` given its parent:
    /// the ratio of consecutive interval weights. The product over a leaf's
    /// prefixes telescopes to its leaf weight.
    pub fn conditional_weight(&self, prefix: &IndexVector) -> f64 {
        let w = self.prefix_weight(prefix);
        if prefix.len() <= 1 || w == 0.0 {
            return w;
        }
        let parent = IndexVector(prefix.0[..prefix.len() - 1].to_vec());
        w / self.prefix_weight(&parent)
    }

    /// Checks that the table was built for this formula and partition.
    pub fn check_compatible(
        &self,
        formula: &CubatureFormula,
        partition: &TimePartition,
    ) -> Result<()> {
        let m = &self.manifest;
        if m.formula_fingerprint != formula.fingerprint() {
            return Err(Error::ManifestMismatch(
                "formula fingerprint differs".into(),
            ));
        }
        if m.knots != partition.knots()
            || m.horizon != partition.horizon()
            || m.gamma != partition.gamma()
        {
            return Err(Error::ManifestMismatch("partition differs".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weight table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A support point with the tree prefixes that landed on it. The shares
/// sum to the point's weight.
#[derive(Debug, Clone)]
struct Node {
    point: Vec<f64>,
    weight: f64,
    prefixes: Vec<(u64, f64)>,
}

fn spawn(nodes: &[Node], formula: &CubatureFormula, s: f64) -> Vec<Node> {
    let root = s.sqrt();
    let ends = formula.brownian_endpoints();
    let q = formula.len() as u64;
    nodes
        .par_iter()
        .flat_map_iter(|n| {
            ends.iter()
                .zip(formula.weights())
                .enumerate()
                .map(move |(j, (e, &lam))| Node {
                    point: n.point.iter().zip(e).map(|(x, y)| x + root * y).collect(),
                    weight: n.weight * lam,
                    prefixes: n
                        .prefixes
                        .iter()
                        .map(|&(c, w)| (c * q + j as u64, w * lam))
                        .collect(),
                })
        })
        .collect()
}

/// Merges bitwise-identical points, pooling weights and prefixes.
fn merge(nodes: Vec<Node>) -> Vec<Node> {
    let mut slot: HashMap<Vec<u64>, usize> = HashMap::with_capacity(nodes.len());
    let mut out: Vec<Node> = Vec::with_capacity(nodes.len());
    for n in nodes {
        let key: Vec<u64> = n.point.iter().map(|x| canonical_bits(*x)).collect();
        match slot.get(&key) {
            Some(&i) => {
                out[i].weight += n.weight;
                out[i].prefixes.extend(n.prefixes);
            }
            None => {
                slot.insert(key, out.len());
                out.push(n);
            }
        }
    }
    out
}

fn as_measure(nodes: &[Node], dim: usize) -> DiscreteMeasure {
    let mut m = DiscreteMeasure::new(dim);
    for n in nodes {
        m.push(&n.point, n.weight);
    }
    m
}

fn read_off(nodes: &[Node], interval: usize) -> Result<Vec<(u64, f64)>> {
    let mut level = Vec::new();
    for n in nodes {
        if n.prefixes.is_empty() {
            return Err(Error::MatchFailure { interval });
        }
        level.extend(n.prefixes.iter().copied().filter(|e| e.1 > 0.0));
    }
    level.sort_by_key(|e| e.0);
    if level.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::MatchFailure { interval });
    }
    Ok(level)
}

/// Runs the pre-processing loop and returns the sparse weight table.
///
/// Interval 1 and interval `k` are propagated without recombination; every
/// interior interval is followed by per-ball recombination with the radius
/// given by `radius`. Only the formula, partition, basis and radii are used.
pub fn preprocess(
    formula: &CubatureFormula,
    partition: &TimePartition,
    basis: &TestBasis,
    radius: RadiusPolicy,
) -> Result<WeightTable> {
    let start = Instant::now();
    radius.validate()?;
    let k = partition.k();
    let dim = formula.dim();
    if k < 2 {
        return Err(Error::InvalidParameter(
            "pre-processing needs k >= 2".into(),
        ));
    }
    if basis.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "basis dimension {} for driving dimension {dim}",
            basis.dim()
        )));
    }
    // prefix codes must fit in u64
    if (formula.len() as u64).checked_pow(k as u32).is_none() {
        return Err(Error::TreeTooLarge {
            paths: formula.len(),
            depth: k,
        });
    }

    let mut nodes = vec![Node {
        point: vec![0.0; dim],
        weight: 1.0,
        prefixes: vec![(0, 1.0)],
    }];
    let mut intervals = Vec::with_capacity(k);
    let mut radii = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    let mut balls = Vec::with_capacity(k);
    let mut max_iter = 0;

    for i in 1..=k {
        let s = partition.step(i);
        nodes = merge(spawn(&nodes, formula, s));
        let mut used_radius = None;
        let mut ball_count = 0;
        if i > 1 && i < k {
            let measure = as_measure(&nodes, dim);
            let loc: Localization = match radius.radius(s, partition.gamma()) {
                Some(u) => {
                    used_radius = Some(u);
                    localize(&measure, u)
                }
                None => localize_pointwise(&measure),
            };
            ball_count = loc.len();
            let mut next = Vec::with_capacity(nodes.len());
            for (kept, w, stats) in rmp_indices(&measure, &loc, basis) {
                max_iter = max_iter.max(stats.iterations);
                for (&idx, &wi) in kept.iter().zip(&w) {
                    let mut n = std::mem::replace(
                        &mut nodes[idx],
                        Node {
                            point: Vec::new(),
                            weight: 0.0,
                            prefixes: Vec::new(),
                        },
                    );
                    let ratio = wi / n.weight;
                    if ratio != 1.0 {
                        n.prefixes.iter_mut().for_each(|e| e.1 *= ratio);
                    }
                    n.weight = wi;
                    next.push(n);
                }
            }
            nodes = next;
        }
        radii.push(used_radius);
        balls.push(ball_count);
        support.push(nodes.len());
        intervals.push(read_off(&nodes, i)?);
    }

    let survivors = intervals.iter().map(|v| v.len()).collect();
    let manifest = PreprocessManifest {
        formula_fingerprint: formula.fingerprint(),
        formula_degree: formula.degree(),
        paths: formula.len(),
        driving_dim: dim,
        horizon: partition.horizon(),
        gamma: partition.gamma(),
        knots: partition.knots().to_vec(),
        basis_degree: basis.max_degree(),
        test_functions: basis.len(),
        radius_policy: radius,
        radii,
        support,
        survivors,
        balls,
        max_recombine_iterations: max_iter,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(WeightTable {
        intervals,
        manifest,
    })
}
