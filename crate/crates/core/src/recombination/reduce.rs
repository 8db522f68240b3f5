//! Carathéodory-style measure reduction: repeatedly move weight along a null
//! vector of the moment constraint matrix until a point's weight hits zero,
//! and the divide-and-conquer recombination that applies it to group
//! centers of mass.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::basis::TestBasis;
use super::localize::Localization;
use super::measure::DiscreteMeasure;
use crate::error::{Error, Result};

/// Relative singular-value threshold below which a column set is treated as
/// rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Feature vectors (basis evaluations) of a point set, one row per point.
pub(crate) struct Features {
    width: usize,
    data: Vec<f64>,
}

impl Features {
    /// Evaluates `basis` on points mapped to `(x - center) / scale`. The
    /// polynomial space is invariant under this affine map, so preserving
    /// these moments preserves the raw monomial moments.
    pub(crate) fn of(measure: &DiscreteMeasure, indices: &[usize], basis: &TestBasis) -> Self {
        let dim = measure.dim();
        let total: f64 = indices.iter().map(|&i| measure.weights()[i]).sum();
        let mut center = vec![0.0; dim];
        if total > 0.0 {
            for &i in indices {
                let w = measure.weights()[i] / total;
                for (c, x) in center.iter_mut().zip(measure.point(i)) {
                    *c += w * x;
                }
            }
        } else if let Some(&i) = indices.first() {
            center.copy_from_slice(measure.point(i));
        }
        let mut scale: f64 = 0.0;
        for &i in indices {
            for (x, c) in measure.point(i).iter().zip(&center) {
                scale = scale.max((x - c).abs());
            }
        }
        if !(scale > 0.0) {
            scale = 1.0;
        }
        let width = basis.len();
        let mut data = vec![0.0; indices.len() * width];
        let mut z = vec![0.0; dim];
        for (row, &i) in indices.iter().enumerate() {
            for ((zj, x), c) in z.iter_mut().zip(measure.point(i)).zip(&center) {
                *zj = (x - c) / scale;
            }
            basis.eval_into(&z, &mut data[row * width..(row + 1) * width]);
        }
        Features { width, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Null vector of the `(width+1) x cols.len()` constraint matrix `[1; x_i]`
/// restricted to the given feature rows, or `None` when the columns are
/// linearly independent.
fn null_vector(rows: &[&[f64]]) -> Option<Vec<f64>> {
    let c = rows.len();
    let constraints = rows.first().map_or(1, |r| r.len() + 1);
    let height = constraints.max(c);
    let mut m = DMatrix::<f64>::zeros(height, c);
    for (j, r) in rows.iter().enumerate() {
        m[(0, j)] = 1.0;
        for (i, v) in r.iter().enumerate() {
            m[(i + 1, j)] = *v;
        }
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sv = &svd.singular_values;
    let (argmin, &smin) = sv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
        .expect("non-empty");
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if c <= constraints && smin > RANK_TOL * smax.max(1.0) {
        return None;
    }
    Some(v_t.row(argmin).iter().cloned().collect())
}

/// One reduction step on `weights` (indexed like `rows`): finds a null
/// vector over the first `width + 2` active columns and moves weight along
/// it until the first positive-direction weight vanishes. Returns the new
/// weights (at least one entry newly zero).
fn reduce_once(rows: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let constraints = rows.first().map_or(1, |r| r.len() + 1);
    let take = rows.len().min(constraints + 1);
    let mut u = null_vector(&rows[..take]).ok_or(Error::NoNullVector {
        support: rows.len(),
        constraints,
    })?;
    // the SVD sign is arbitrary; fix it by making the first significant entry
    // positive
    let scale = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let pivot = u.iter().position(|x| x.abs() > 1e-8 * scale).unwrap_or(0);
    if u[pivot] < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
    let mut alpha = f64::INFINITY;
    let mut hit = usize::MAX;
    for (i, &ui) in u.iter().enumerate() {
        if ui > 0.0 {
            let ratio = weights[i] / ui;
            if ratio < alpha {
                alpha = ratio;
                hit = i;
            }
        }
    }
    debug_assert!(hit != usize::MAX);
    let mut out = weights.to_vec();
    for (i, &ui) in u.iter().enumerate() {
        let w = weights[i] - alpha * ui;
        let scale = weights[i] + (alpha * ui).abs();
        out[i] = if w <= 8.0 * f64::EPSILON * scale {
            0.0
        } else {
            w
        };
    }
    out[hit] = 0.0;
    Ok(out)
}

/// Repeats [`reduce_once`] on a small set until at most `target` points keep
/// positive weight. Returns surviving positions (into `rows`) and weights.
fn reduce_direct(rows: &[&[f64]], weights: &[f64], target: usize) -> (Vec<usize>, Vec<f64>) {
    let mut active: Vec<usize> = (0..rows.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut w: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
    while active.len() > target {
        let sub: Vec<&[f64]> = active.iter().map(|&i| rows[i]).collect();
        match reduce_once(&sub, &w) {
            Ok(next) => {
                let keep: Vec<usize> = (0..active.len()).filter(|&j| next[j] > 0.0).collect();
                active = keep.iter().map(|&j| active[j]).collect();
                w = keep.iter().map(|&j| next[j]).collect();
            }
            Err(_) => break,
        }
    }
    (active, w)
}

/// Diagnostics from one [`recombine`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecombineStats {
    /// Outer (group-halving) iterations performed.
    pub iterations: usize,
    pub support_in: usize,
    pub support_out: usize,
}

/// Recombination on a subset of a measure: returns the kept indices (into
/// the measure) and their new weights.
pub(crate) fn recombine_indices(
    measure: &DiscreteMeasure,
    indices: &[usize],
    basis: &TestBasis,
) -> (Vec<usize>, Vec<f64>, RecombineStats) {
    let mut stats = RecombineStats {
        support_in: indices.len(),
        ..Default::default()
    };
    let active: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| measure.weights()[i] > 0.0)
        .collect();
    let target = basis.len() + 1;
    if active.len() <= target {
        let w = active.iter().map(|&i| measure.weights()[i]).collect();
        stats.support_out = active.len();
        return (active, w, stats);
    }
    let features = Features::of(measure, &active, basis);
    let mut pos: Vec<usize> = (0..active.len()).collect();
    let mut w: Vec<f64> = active.iter().map(|&i| measure.weights()[i]).collect();
    let groups = 2 * target;
    while pos.len() > groups {
        stats.iterations += 1;
        let n = pos.len();
        let bounds: Vec<usize> = (0..=groups).map(|g| g * n / groups).collect();
        let mut centers = vec![0.0; groups * features.width];
        let mut masses = vec![0.0; groups];
        for g in 0..groups {
            let c = &mut centers[g * features.width..(g + 1) * features.width];
            for j in bounds[g]..bounds[g + 1] {
                masses[g] += w[j];
                for (ci, xi) in c.iter_mut().zip(features.row(pos[j])) {
                    *ci += w[j] * xi;
                }
            }
            c.iter_mut().for_each(|ci| *ci /= masses[g]);
        }
        let rows: Vec<&[f64]> = centers.chunks(features.width).collect();
        let (kept, new_mass) = reduce_direct(&rows, &masses, target);
        let mut next_pos = Vec::with_capacity(n / 2 + groups);
        let mut next_w = Vec::with_capacity(n / 2 + groups);
        for (&g, &m) in kept.iter().zip(&new_mass) {
            let ratio = m / masses[g];
            for j in bounds[g]..bounds[g + 1] {
                let wj = w[j] * ratio;
                if wj > 0.0 {
                    next_pos.push(pos[j]);
                    next_w.push(wj);
                }
            }
        }
        if next_pos.len() == n {
            break;
        }
        pos = next_pos;
        w = next_w;
    }
    if pos.len() > target {
        let rows: Vec<&[f64]> = pos.iter().map(|&p| features.row(p)).collect();
        let (kept, new_w) = reduce_direct(&rows, &w, target);
        pos = kept.iter().map(|&k| pos[k]).collect();
        w = new_w;
    }
    let out: Vec<usize> = pos.iter().map(|&p| active[p]).collect();
    stats.support_out = out.len();
    (out, w, stats)
}

/// Single reduction step on a whole measure; drops every point whose weight
/// becomes exactly zero.
pub fn reduction_iteration(
    measure: &DiscreteMeasure,
    basis: &TestBasis,
) -> Result<DiscreteMeasure> {
    let idx: Vec<usize> = (0..measure.len()).collect();
    let features = Features::of(measure, &idx, basis);
    let rows: Vec<&[f64]> = idx.iter().map(|&i| features.row(i)).collect();
    let next = reduce_once(&rows, measure.weights())?;
    let keep: Vec<usize> = (0..measure.len()).filter(|&i| next[i] > 0.0).collect();
    let mut out = DiscreteMeasure::new(measure.dim());
    for &i in &keep {
        out.push(measure.point(i), next[i]);
    }
    Ok(out)
}

/// Reduced measure supported on at most `N_p + 1` of the input points with
/// the same mass and basis moments.
pub fn recombine(measure: &DiscreteMeasure, basis: &TestBasis) -> DiscreteMeasure {
    recombine_with_stats(measure, basis).0
}

pub fn recombine_with_stats(
    measure: &DiscreteMeasure,
    basis: &TestBasis,
) -> (DiscreteMeasure, RecombineStats) {
    let idx: Vec<usize> = (0..measure.len()).collect();
    let (kept, w, stats) = recombine_indices(measure, &idx, basis);
    let mut out = DiscreteMeasure::new(measure.dim());
    for (&i, &wi) in kept.iter().zip(&w) {
        out.push(measure.point(i), wi);
    }
    (out, stats)
}

/// Per-ball recombination result, indices into the input measure.
pub(crate) fn rmp_indices(
    measure: &DiscreteMeasure,
    localization: &Localization,
    basis: &TestBasis,
) -> Vec<(Vec<usize>, Vec<f64>, RecombineStats)> {
    localization
        .balls
        .par_iter()
        .map(|ball| recombine_indices(measure, &ball.members, basis))
        .collect()
}

/// Reduced measure with respect to a localization: recombination inside
/// each ball, results concatenated in ball order.
pub fn rmp(
    measure: &DiscreteMeasure,
    localization: &Localization,
    basis: &TestBasis,
) -> DiscreteMeasure {
    let mut out = DiscreteMeasure::new(measure.dim());
    for (kept, w, _) in rmp_indices(measure, localization, basis) {
        for (&i, &wi) in kept.iter().zip(&w) {
            out.push(measure.point(i), wi);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recombination::localize::localize;

    fn moments(m: &DiscreteMeasure, basis: &TestBasis) -> Vec<f64> {
        let mut acc = vec![0.0; basis.len()];
        for (p, &w) in m.points().zip(m.weights()) {
            for (a, v) in acc.iter_mut().zip(basis.eval(p)) {
                *a += w * v;
            }
        }
        acc
    }

    #[test]
    fn three_point_hand_example() {
        let m = DiscreteMeasure::from_points(&[vec![0.0], vec![1.0], vec![2.0]], &[1.0 / 3.0; 3]);
        let basis = TestBasis::new(1, 1);
        let r = reduction_iteration(&m, &basis).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.point(0), &[1.0]);
        assert!((r.weights()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_rank_has_no_null_vector() {
        let m = DiscreteMeasure::from_points(&[vec![-0.7], vec![0.7]], &[0.5, 0.5]);
        let basis = TestBasis::new(1, 1);
        assert!(matches!(
            reduction_iteration(&m, &basis),
            Err(Error::NoNullVector { .. })
        ));
    }

    #[test]
    fn five_points_to_two() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let m = DiscreteMeasure::from_points(&pts, &[0.2; 5]);
        let basis = TestBasis::new(1, 1);
        let r = recombine(&m, &basis);
        assert!(r.len() <= 2);
        assert!((r.total_mass() - 1.0).abs() < 1e-14);
        assert!((r.integrate(|x| x[0]) - 2.0).abs() < 1e-14);
        assert!(r.points().all(|p| pts.iter().any(|q| q.as_slice() == p)));
    }

    #[test]
    fn small_measure_passes_through() {
        let m = DiscreteMeasure::from_points(&[vec![0.0, 1.0], vec![2.0, 1.0]], &[0.3, 0.7]);
        assert_eq!(recombine(&m, &TestBasis::new(2, 1)), m);
    }

    #[test]
    fn thousand_points_degree_two() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..1000)
            .map(|_| vec![rng.random::<f64>() * 3.0, rng.random::<f64>() - 2.0])
            .collect();
        let w: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() + 0.1).collect();
        let m = DiscreteMeasure::from_points(&pts, &w);
        let basis = TestBasis::new(2, 2);
        let (r, stats) = recombine_with_stats(&m, &basis);
        assert!(r.len() <= 6);
        let (a, b) = (moments(&m, &basis), moments(&r, &basis));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{x} vs {y}");
        }
        assert!((m.total_mass() - r.total_mass()).abs() < 1e-10 * m.total_mass());
        let bound = (1000.0f64 / basis.len() as f64).log2().ceil() as usize + 1;
        assert!(stats.iterations <= bound, "{} > {bound}", stats.iterations);
    }

    #[test]
    fn rmp_per_cluster() {
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push(vec![i as f64 * 0.01]);
            pts.push(vec![10.0 + i as f64 * 0.01]);
        }
        let m = DiscreteMeasure::from_points(&pts, &[1.0 / 12.0; 12]);
        let basis = TestBasis::new(1, 1);
        let loc = localize(&m, 0.5);
        assert_eq!(loc.len(), 2);
        let r = rmp(&m, &loc, &basis);
        assert!(r.len() <= 4);
        let left: f64 = r
            .points()
            .zip(r.weights())
            .filter(|(p, _)| p[0] < 5.0)
            .map(|(p, w)| p[0] * w)
            .sum();
        assert!((left - 0.025 / 2.0).abs() < 1e-14);

        let single = localize(&m, 100.0);
        assert_eq!(single.len(), 1);
        assert_eq!(rmp(&m, &single, &basis), recombine(&m, &basis));

        let empty = DiscreteMeasure::new(1);
        assert!(rmp(
            &empty,
            &Localization {
                radius: 1.0,
                balls: vec![]
            },
            &basis
        )
        .is_empty());
    }
}
