//! Cubature formulas on Wiener space: finitely many bounded-variation paths
//! on `[0, 1]` with positive weights whose iterated integrals reproduce the
//! expected Stratonovich signature of Brownian motion up to a given degree.

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signature::{
    expected_signature, iterated_integral_of_increments, signature_of_increments,
    words_up_to_degree, TensorSeries, Word,
};

/// A continuous piecewise-linear path in `R^{d+1}` whose component 0 is time.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PiecewisePath {
    /// Builds a path from strictly increasing breakpoints and the value at
    /// each. Component 0 must equal the breakpoint time.
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.len() < 2 || breakpoints.len() != values.len() {
            return Err(Error::InvalidParameter(
                "a path needs at least two breakpoints, one value each".into(),
            ));
        }
        let width = values[0].len();
        if width < 2 || values.iter().any(|v| v.len() != width) {
            return Err(Error::DimensionMismatch(
                "path values must share a width of at least 2".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("breakpoints must increase".into()));
        }
        for (t, v) in breakpoints.iter().zip(&values) {
            let tol = 1e-12 * (1.0 + t.abs());
            if (v[0] - t).abs() > tol {
                return Err(Error::InvalidParameter(format!(
                    "time component {} differs from breakpoint {t}",
                    v[0]
                )));
            }
        }
        Ok(PiecewisePath {
            breakpoints,
            values,
        })
    }

    /// A path on `[0, 1]` starting at the origin, given by the Brownian
    /// component at evenly spaced knots `0, 1/p, …, 1` (the leading zero is
    /// implied).
    pub fn unit_from_knots(brownian: &[Vec<f64>]) -> Result<Self> {
        let pieces = brownian.len();
        if pieces == 0 {
            return Err(Error::InvalidParameter("need at least one piece".into()));
        }
        let dim = brownian[0].len();
        let mut breakpoints = vec![0.0];
        let mut values = vec![vec![0.0; dim + 1]];
        for (i, b) in brownian.iter().enumerate() {
            let t = if i + 1 == pieces {
                1.0
            } else {
                (i + 1) as f64 / pieces as f64
            };
            breakpoints.push(t);
            let mut v = Vec::with_capacity(dim + 1);
            v.push(t);
            v.extend_from_slice(b);
            values.push(v);
        }
        Self::new(breakpoints, values)
    }

    /// Number of Brownian components.
    pub fn dim(&self) -> usize {
        self.values[0].len() - 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn start_time(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// Value at the final breakpoint.
    pub fn endpoint(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    /// Segment increments `value[i+1] - value[i]`.
    pub fn increments(&self) -> Vec<Vec<f64>> {
        self.values
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
            .collect()
    }

    /// Linear interpolation, clamped to the path's time range.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let bp = &self.breakpoints;
        if t <= bp[0] {
            return self.values[0].clone();
        }
        if t >= *bp.last().unwrap() {
            return self.endpoint().to_vec();
        }
        let j = bp.partition_point(|&b| b <= t) - 1;
        let frac = (t - bp[j]) / (bp[j + 1] - bp[j]);
        self.values[j]
            .iter()
            .zip(&self.values[j + 1])
            .map(|(a, b)| a + frac * (b - a))
            .collect()
    }

    /// Iterated integral of `word` over the whole path.
    pub fn iterated_integral(&self, word: &Word) -> f64 {
        assert!(
            word.letters().iter().all(|&l| l <= self.dim()),
            "word {word} uses letters outside 0..={}",
            self.dim()
        );
        let incs = self.increments();
        iterated_integral_of_increments(incs.iter().map(|v| v.as_slice()), word)
    }

    /// Truncated signature of the whole path.
    pub fn signature(&self, level: usize) -> TensorSeries {
        let incs = self.increments();
        signature_of_increments(self.dim(), level, incs.iter().map(|v| v.as_slice()))
    }
}

/// Convenience free function mirroring [`PiecewisePath::iterated_integral`].
pub fn iterated_integral(path: &PiecewisePath, word: &Word) -> f64 {
    path.iterated_integral(word)
}

/// A degree-`m` cubature formula on Wiener space at time 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CubatureFormula {
    degree: usize,
    dim: usize,
    paths: Vec<PiecewisePath>,
    weights: Vec<f64>,
}

impl CubatureFormula {
    pub fn new(
        degree: usize,
        dim: usize,
        paths: Vec<PiecewisePath>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if degree.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "degree must be odd, got {degree}"
            )));
        }
        if paths.is_empty() || paths.len() != weights.len() {
            return Err(Error::InvalidParameter(
                "one weight per path required".into(),
            ));
        }
        for p in &paths {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "path of dimension {} in a dimension-{dim} formula",
                    p.dim()
                )));
            }
            if p.start_time() != 0.0 || (p.end_time() - 1.0).abs() > 1e-15 {
                return Err(Error::InvalidParameter(
                    "formula paths live on [0, 1]".into(),
                ));
            }
            if p.values()[0].iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidParameter(
                    "formula paths start at the origin".into(),
                ));
            }
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidParameter("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(CubatureFormula {
            degree,
            dim,
            paths,
            weights,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PiecewisePath] {
        &self.paths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Brownian components of each path's endpoint.
    pub fn brownian_endpoints(&self) -> Vec<Vec<f64>> {
        self.paths
            .iter()
            .map(|p| p.endpoint()[1..].to_vec())
            .collect()
    }

    /// JSON document with every double printed at 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{{\"degree\":{},\"dim\":{},\"paths\":[",
            self.degree, self.dim
        ));
        for (i, p) in self.paths.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str("{\"breakpoints\":");
            s.push_str(&json_array(p.breakpoints()));
            s.push_str(",\"values\":[");
            for (j, v) in p.values().iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                s.push_str(&json_array(v));
            }
            s.push_str("]}");
        }
        s.push_str("],\"weights\":");
        s.push_str(&json_array(&self.weights));
        s.push('}');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct PathDoc {
            breakpoints: Vec<f64>,
            values: Vec<Vec<f64>>,
        }
        #[derive(Deserialize)]
        struct Doc {
            degree: usize,
            dim: usize,
            paths: Vec<PathDoc>,
            weights: Vec<f64>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        let paths = doc
            .paths
            .into_iter()
            .map(|p| PiecewisePath::new(p.breakpoints, p.values))
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.degree, doc.dim, paths, doc.weights)
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the formula in
    /// manifests.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Formats a double with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

fn json_array(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|&x| fmt17(x)).collect();
    format!("[{}]", parts.join(","))
}

/// Degree-3 formula: `2 d` straight lines from the origin to `±√d e_i`,
/// each with weight `1 / (2 d)`.
pub fn degree3_formula(dim: usize) -> Result<CubatureFormula> {
    if dim == 0 {
        return Err(Error::InvalidParameter(
            "driving dimension must be positive".into(),
        ));
    }
    // unit endpoints only match E[B_i^2] when dim = 1
    let r = (dim as f64).sqrt();
    let mut paths = Vec::with_capacity(2 * dim);
    for i in 0..dim {
        for sign in [r, -r] {
            let mut end = vec![0.0; dim];
            end[i] = sign;
            paths.push(PiecewisePath::unit_from_knots(&[end])?);
        }
    }
    let w = 1.0 / (2 * dim) as f64;
    CubatureFormula::new(3, dim, paths, vec![w; 2 * dim])
}

/// Degree-5 formula for one driving dimension.
///
/// Endpoints and weights are the three-point Gauss–Hermite rule
/// (`±√3` with weight 1/6, `0` with weight 2/3). The outer paths are
/// `±√3 g(t)` where `g` is piecewise linear on thirds through
/// `0, 1/2 + c, 1/2 - c, 1` with `c = (1 - √22) / 6`; this choice makes
/// `∫g = 1/2` and `∫g² = 1/2`, which are exactly the conditions left after
/// symmetry on the words `(1,0,1)`, `(0,1,1)` and `(1,1,0)`.
pub fn degree5_formula(dim: usize) -> Result<CubatureFormula> {
    if dim != 1 {
        return Err(Error::UnsupportedDimension { degree: 5, dim });
    }
    let r3 = 3f64.sqrt();
    let c = (1.0 - 22f64.sqrt()) / 6.0;
    let g = [0.5 + c, 0.5 - c, 1.0];
    let outer = |sign: f64| -> Result<PiecewisePath> {
        let knots: Vec<Vec<f64>> = g.iter().map(|&v| vec![sign * r3 * v]).collect();
        PiecewisePath::unit_from_knots(&knots)
    };
    let paths = vec![
        outer(1.0)?,
        PiecewisePath::unit_from_knots(&[vec![0.0]])?,
        outer(-1.0)?,
    ];
    CubatureFormula::new(5, 1, paths, vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
}

/// Builds the formula of the requested degree.
pub fn formula_for_degree(degree: usize, dim: usize) -> Result<CubatureFormula> {
    match degree {
        3 => degree3_formula(dim),
        5 => degree5_formula(dim),
        d if d % 2 == 0 => Err(Error::InvalidParameter(format!(
            "degree must be odd, got {d}"
        ))),
        d => Err(Error::UnsupportedDimension { degree: d, dim }),
    }
}

/// Outcome of checking a formula's moment conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub degree: usize,
    pub words_checked: usize,
    pub max_defect: f64,
    /// Word attaining the largest defect.
    pub worst_word: Option<Word>,
    pub passed: bool,
    /// Every word whose defect exceeds the tolerance, with the defect.
    pub failures: Vec<(Word, f64)>,
}

/// Checks `|sum_j λ_j ∫ω_j^{word} - E[∫∘dB^{word}]| <= tol` for every word of
/// degree `1..=m` (the time word included).
pub fn verify_cubature(formula: &CubatureFormula, m: usize, tol: f64) -> VerificationReport {
    let dim = formula.dim();
    let level = m;
    let oracle = expected_signature(level, dim, 1.0)
        .expect("verification degree must not exceed the expected-signature level guard");
    let mut averaged = TensorSeries::zero(dim, level);
    for (p, &w) in formula.paths().iter().zip(formula.weights()) {
        averaged.add_scaled(&p.signature(level), w);
    }
    let words = words_up_to_degree(dim, m);
    let mut max_defect = 0.0;
    let mut worst_word = None;
    let mut failures = Vec::new();
    for w in &words {
        let defect = (averaged.coefficient(w) - oracle.coefficient(w)).abs();
        if defect > max_defect || worst_word.is_none() {
            max_defect = defect;
            worst_word = Some(w.clone());
        }
        if !(defect <= tol) {
            failures.push((w.clone(), defect));
        }
    }
    VerificationReport {
        degree: m,
        words_checked: words.len(),
        max_defect,
        worst_word,
        passed: failures.is_empty(),
        failures,
    }
}
