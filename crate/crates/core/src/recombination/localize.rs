use std::collections::BTreeMap;

use super::measure::{canonical_bits, DiscreteMeasure};

/// One ball of a localization and the support points assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
    pub members: Vec<usize>,
}

/// A partition of a measure's support into balls of a common radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub radius: f64,
    pub balls: Vec<Ball>,
}

impl Localization {
    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    /// Checks disjointness, coverage of `0..support` and the radius bound.
    pub fn is_valid_for(&self, measure: &DiscreteMeasure) -> bool {
        let mut seen = vec![false; measure.len()];
        for ball in &self.balls {
            for &i in &ball.members {
                if i >= seen.len() || seen[i] {
                    return false;
                }
                seen[i] = true;
                let d2: f64 = measure
                    .point(i)
                    .iter()
                    .zip(&ball.center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2.sqrt() > ball.radius * (1.0 + 1e-12) {
                    return false;
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Axis-aligned grid localization: cells of width `2 radius / √D`, each
/// inscribed in the ball of the given radius around its center. Balls are
/// ordered by cell index.
pub fn localize(measure: &DiscreteMeasure, radius: f64) -> Localization {
    assert!(
        radius > 0.0 && radius.is_finite(),
        "radius must be positive and finite"
    );
    let dim = measure.dim().max(1);
    let width = 2.0 * radius / (dim as f64).sqrt();
    let mut cells: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (i, p) in measure.points().enumerate() {
        let key: Vec<i64> = p.iter().map(|x| (x / width).floor() as i64).collect();
        cells.entry(key).or_default().push(i);
    }
    let balls = cells
        .into_iter()
        .map(|(key, members)| Ball {
            center: key.iter().map(|&c| (c as f64 + 0.5) * width).collect(),
            radius,
            members,
        })
        .collect();
    Localization { radius, balls }
}

/// One zero-radius ball per distinct support point. No recombination can
/// act on such a localization when each ball holds a single point.
pub fn localize_pointwise(measure: &DiscreteMeasure) -> Localization {
    let mut cells: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (i, p) in measure.points().enumerate() {
        cells
            .entry(p.iter().map(|x| canonical_bits(*x)).collect())
            .or_default()
            .push(i);
    }
    let mut balls: Vec<Ball> = cells
        .into_values()
        .map(|members| Ball {
            center: measure.point(members[0]).to_vec(),
            radius: 0.0,
            members,
        })
        .collect();
    balls.sort_by_key(|b| b.members[0]);
    Localization { radius: 0.0, balls }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_single_ball() {
        let m = DiscreteMeasure::dirac(&[0.3, -0.2]);
        let l = localize(&m, 0.1);
        assert_eq!(l.len(), 1);
        assert!(l.is_valid_for(&m));
    }

    #[test]
    fn far_points_split() {
        let m = DiscreteMeasure::from_points(&[vec![0.0], vec![1.0]], &[0.5, 0.5]);
        let l = localize(&m, 0.4);
        assert!(l.len() >= 2);
        assert!(l.is_valid_for(&m));
    }

    #[test]
    fn unit_square_ball_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let m = DiscreteMeasure::from_points(&pts, &vec![0.01; 100]);
        let l = localize(&m, 0.5);
        assert!(l.len() <= 9);
        assert!(l.is_valid_for(&m));
    }

    #[test]
    fn pointwise_separates_every_point() {
        let m =
            DiscreteMeasure::from_points(&[vec![0.0], vec![1e-300], vec![2.0]], &[0.2, 0.3, 0.5]);
        let l = localize_pointwise(&m);
        assert_eq!(l.len(), 3);
        assert!(l.is_valid_for(&m));
    }
}
