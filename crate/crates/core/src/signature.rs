//! Words, truncated tensor series and iterated integrals of piecewise-linear
//! paths.
//!
//! Letter `0` always denotes the time component; letters `1..=d` are the
//! Brownian components. A word's degree counts time letters twice, matching
//! the Brownian scaling `dt ~ (dB)^2`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest level accepted by [`expected_signature`].
pub const MAX_SIGNATURE_LEVEL: usize = 8;

/// A multi-index over the alphabet `{0, …, d}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Word(pub Vec<usize>);

impl Word {
    pub fn new(letters: impl Into<Vec<usize>>) -> Self {
        Word(letters.into())
    }

    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn letters(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length plus the number of time letters.
    pub fn degree(&self) -> usize {
        self.0.len() + self.0.iter().filter(|&&l| l == 0).count()
    }

    /// Number of Brownian (non-time) letters.
    pub fn brownian_count(&self) -> usize {
        self.0.iter().filter(|&&l| l != 0).count()
    }

    /// Whether the word belongs to `A_m`: degree at most `m`, excluding the
    /// empty word and the single time letter.
    pub fn in_cubature_set(&self, m: usize) -> bool {
        !self.is_empty() && self.0 != [0] && self.degree() <= m
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, ")")
    }
}

/// All words over `{0, …, dim}` with `1 <= degree <= max_degree`, in
/// graded-lexicographic order (by degree, then letter by letter).
///
/// The single time word `(0)` is included; it is matched exactly by any
/// time-consistent path.
pub fn words_up_to_degree(dim: usize, max_degree: usize) -> Vec<Word> {
    let mut by_degree: Vec<Vec<Word>> = vec![Vec::new(); max_degree + 1];
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let deg = prefix.len() + prefix.iter().filter(|&&l| l == 0).count();
        if !prefix.is_empty() {
            by_degree[deg].push(Word(prefix.clone()));
        }
        for letter in 0..=dim {
            let step = if letter == 0 { 2 } else { 1 };
            if deg + step <= max_degree {
                let mut next = prefix.clone();
                next.push(letter);
                stack.push(next);
            }
        }
    }
    by_degree
        .into_iter()
        .flat_map(|mut ws| {
            ws.sort();
            ws
        })
        .collect()
}

/// A truncated element of the tensor algebra over `R^{dim+1}`, stored as one
/// dense coefficient block per tensor level.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSeries {
    alphabet: usize,
    levels: Vec<Vec<f64>>,
}

impl TensorSeries {
    /// The unit element `1` truncated at `level`.
    pub fn one(dim: usize, level: usize) -> Self {
        let alphabet = dim + 1;
        let levels = (0..=level)
            .map(|n| {
                let mut block = vec![0.0; alphabet.pow(n as u32)];
                if n == 0 {
                    block[0] = 1.0;
                }
                block
            })
            .collect();
        TensorSeries { alphabet, levels }
    }

    pub fn zero(dim: usize, level: usize) -> Self {
        let mut t = Self::one(dim, level);
        t.levels[0][0] = 0.0;
        t
    }

    /// Signature of a single straight segment with increment `z`: the
    /// truncated tensor exponential, whose word coefficients are
    /// `prod z^{i_j} / n!`.
    pub fn segment(z: &[f64], level: usize) -> Self {
        let dim = z.len() - 1;
        let mut t = Self::one(dim, level);
        for n in 1..=level {
            let (lower, upper) = t.levels.split_at_mut(n);
            let prev = &lower[n - 1];
            let cur = &mut upper[0];
            let inv = 1.0 / n as f64;
            for (i, &p) in prev.iter().enumerate() {
                for (l, &zl) in z.iter().enumerate() {
                    cur[i * t.alphabet + l] = p * zl * inv;
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.alphabet - 1
    }

    pub fn level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level_block(&self, n: usize) -> &[f64] {
        &self.levels[n]
    }

    fn index_of(&self, word: &Word) -> usize {
        word.0.iter().fold(0, |acc, &l| acc * self.alphabet + l)
    }

    /// Coefficient of `word`; zero for words longer than the truncation.
    pub fn coefficient(&self, word: &Word) -> f64 {
        if word.len() > self.level() {
            return 0.0;
        }
        assert!(
            word.0.iter().all(|&l| l < self.alphabet),
            "letter out of range in {word}"
        );
        self.levels[word.len()][self.index_of(word)]
    }

    pub fn set_coefficient(&mut self, word: &Word, value: f64) {
        let idx = self.index_of(word);
        self.levels[word.len()][idx] = value;
    }

    /// Truncated tensor product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &TensorSeries) -> TensorSeries {
        assert_eq!(self.alphabet, rhs.alphabet);
        let level = self.level().min(rhs.level());
        let mut out = TensorSeries::zero(self.dim(), level);
        for n in 0..=level {
            for a in 0..=n {
                let b = n - a;
                let left = &self.levels[a];
                let right = &rhs.levels[b];
                let dst = &mut out.levels[n];
                let rlen = right.len();
                for (i, &l) in left.iter().enumerate() {
                    if l == 0.0 {
                        continue;
                    }
                    let base = i * rlen;
                    for (j, &r) in right.iter().enumerate() {
                        dst[base + j] += l * r;
                    }
                }
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for block in &mut self.levels {
            for c in block.iter_mut() {
                *c *= factor;
            }
        }
    }

    /// `self += factor * rhs`.
    pub fn add_scaled(&mut self, rhs: &TensorSeries, factor: f64) {
        assert_eq!(self.alphabet, rhs.alphabet);
        for (dst, src) in self.levels.iter_mut().zip(&rhs.levels) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }

    /// Truncated exponential of an element with zero constant term.
    pub fn exp(&self) -> TensorSeries {
        assert_eq!(self.levels[0][0], 0.0, "exp requires a zero constant term");
        let level = self.level();
        let mut result = TensorSeries::one(self.dim(), level);
        let mut power = TensorSeries::one(self.dim(), level);
        for n in 1..=level {
            power = power.mul(self);
            result.add_scaled(&power, 1.0 / factorial(n));
        }
        result
    }
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Expected Stratonovich signature of time-augmented Brownian motion over
/// `[0, horizon]`, truncated at `level`:
/// `exp(horizon * (e_0 + 1/2 * sum_i e_i ⊗ e_i))`.
pub fn expected_signature(level: usize, dim: usize, horizon: f64) -> Result<TensorSeries> {
    if level > MAX_SIGNATURE_LEVEL {
        return Err(Error::LevelTooLarge(level));
    }
    if level == 0 || dim == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "expected_signature needs positive level, dim and horizon (got {level}, {dim}, {horizon})"
        )));
    }
    let mut generator = TensorSeries::zero(dim, level);
    generator.set_coefficient(&Word::new([0]), horizon);
    if level >= 2 {
        for i in 1..=dim {
            generator.set_coefficient(&Word::new([i, i]), 0.5 * horizon);
        }
    }
    Ok(generator.exp())
}

/// Iterated integral of `word` along a piecewise-linear path given as a list
/// of segment increments (each of length `dim + 1`).
///
/// Uses Chen's identity segment by segment: with `S_j` the running integral
/// of the first `j` letters, a segment with increment `z` updates
/// `S_j <- sum_{i<=j} S_i * prod_{l in i..j} z^{w_l} / (j-i)!`.
pub fn iterated_integral_of_increments<'a>(
    increments: impl IntoIterator<Item = &'a [f64]>,
    word: &Word,
) -> f64 {
    let n = word.len();
    let mut running = vec![0.0; n + 1];
    running[0] = 1.0;
    let mut next = vec![0.0; n + 1];
    let mut seg = vec![0.0; n + 1];
    for z in increments {
        for j in 1..=n {
            let mut acc = running[j];
            // seg[i] holds prod_{l in i..j} z / (j - i)!, built right to left.
            seg[j] = 1.0;
            for i in (0..j).rev() {
                seg[i] = seg[i + 1] * z[word.0[i]] / (j - i) as f64;
                acc += running[i] * seg[i];
            }
            next[j] = acc;
        }
        next[0] = 1.0;
        std::mem::swap(&mut running, &mut next);
    }
    running[n]
}

/// Truncated signature of a piecewise-linear path given by its increments.
pub fn signature_of_increments<'a>(
    dim: usize,
    level: usize,
    increments: impl IntoIterator<Item = &'a [f64]>,
) -> TensorSeries {
    increments
        .into_iter()
        .fold(TensorSeries::one(dim, level), |acc, z| {
            acc.mul(&TensorSeries::segment(z, level))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_degree_counts_time_twice() {
        assert_eq!(Word::new([0, 1, 1]).degree(), 4);
        assert_eq!(Word::new([2]).degree(), 1);
        assert!(!Word::empty().in_cubature_set(5));
        assert!(!Word::new([0]).in_cubature_set(5));
        assert!(Word::new([0, 0]).in_cubature_set(5));
    }

    #[test]
    fn words_are_graded_lex() {
        let words = words_up_to_degree(1, 3);
        let shown: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        assert_eq!(shown, ["(1)", "(0)", "(1,1)", "(0,1)", "(1,0)", "(1,1,1)"]);
        for pair in words.windows(2) {
            assert!(pair[0].degree() <= pair[1].degree());
        }
    }

    #[test]
    fn single_segment_integral() {
        let z = [1.0, 1.0];
        let w = Word::new([1, 1]);
        assert!((iterated_integral_of_increments([&z[..]], &w) - 0.5).abs() < 1e-15);
        let t = Word::new([0]);
        assert_eq!(iterated_integral_of_increments([&z[..]], &t), 1.0);
    }

    #[test]
    fn telescoping_endpoint() {
        let a = [0.5, 1.0];
        let b = [0.5, -1.0];
        let w = Word::new([1]);
        assert_eq!(iterated_integral_of_increments([&a[..], &b[..]], &w), 0.0);
    }

    #[test]
    fn expected_signature_low_order() {
        let es = expected_signature(4, 2, 1.0).unwrap();
        assert!((es.coefficient(&Word::new([1, 1])) - 0.5).abs() < 1e-15);
        assert_eq!(es.coefficient(&Word::new([1, 2])), 0.0);
        assert!((es.coefficient(&Word::new([1, 1, 1, 1])) - 0.125).abs() < 1e-15);
        assert!((es.coefficient(&Word::empty()) - 1.0).abs() < 1e-15);

        let t = 2.5;
        let es = expected_signature(3, 1, t).unwrap();
        assert!((es.coefficient(&Word::new([0, 0])) - t * t / 2.0).abs() < 1e-14);
    }

    #[test]
    fn expected_signature_level_guard() {
        assert!(matches!(
            expected_signature(9, 1, 1.0),
            Err(Error::LevelTooLarge(9))
        ));
    }

    #[test]
    fn odd_brownian_words_vanish() {
        let es = expected_signature(6, 2, 1.3).unwrap();
        for w in words_up_to_degree(2, 6) {
            if w.len() <= 6 && w.brownian_count() % 2 == 1 {
                assert_eq!(es.coefficient(&w), 0.0, "{w}");
            }
        }
    }

    #[test]
    fn dp_matches_tensor_product() {
        let incs: Vec<Vec<f64>> = vec![
            vec![0.2, 0.3, -0.1],
            vec![0.5, -0.7, 0.4],
            vec![0.3, 0.1, 0.9],
        ];
        let sig = signature_of_increments(2, 4, incs.iter().map(|v| v.as_slice()));
        for w in words_up_to_degree(2, 4) {
            let dp = iterated_integral_of_increments(incs.iter().map(|v| v.as_slice()), &w);
            assert!((dp - sig.coefficient(&w)).abs() < 1e-14, "{w}");
        }
    }
}
