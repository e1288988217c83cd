//! Hierarchical bipartite matching between predicted and ground-truth
//! elements: Hungarian assignment over instances, then the best equivalent
//! point ordering inside every matched pair.

use crate::error::{Error, Result};
use crate::geometry::{manhattan_distance, normalize_element, resample_uniform, MapElement, NormalizationFrame, Point2D};
use crate::loss::{focal_loss, FocalParams};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAssignment {
    /// `(gt_index, prediction_index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointAssignment {
    /// Predicted point `j` corresponds to target point `permutation[j]`.
    pub permutation: Vec<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub instances: InstanceAssignment,
    /// One entry per instance pair, same order as `instances.pairs`.
    pub points: Vec<PointAssignment>,
}

impl Matching {
    pub fn empty() -> Self {
        Self {
            instances: InstanceAssignment {
                pairs: Vec::new(),
                total_cost: 0.0,
            },
            points: Vec::new(),
        }
    }
}

/// Minimum-cost assignment of every row (target) to a distinct column
/// (prediction). Shortest augmenting path with potentials, O(n^2 m).
pub fn hungarian(cost: &Matrix) -> Result<InstanceAssignment> {
    let (n, m) = cost.shape();
    if m < n {
        return Err(Error::TooFewPredictions {
            targets: n,
            predictions: m,
        });
    }
    if let Some(k) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost {
            row: k / m,
            col: k % m,
        });
    }
    if n == 0 {
        return Ok(InstanceAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }

    // 1-based rows/columns; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_slack = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let row0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let slack = cost.get(row0 - 1, col - 1) - u[row0] - v[col];
                if slack < min_slack[col] {
                    min_slack[col] = slack;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&c| owner[c] != 0)
        .map(|c| (owner[c] - 1, c - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(InstanceAssignment { pairs, total_cost })
}

/// Point orderings that describe the same geometry. Open elements:
/// identity then reversal. Closed elements: every cyclic shift, forward
/// direction first, then every shift of the reversed order.
pub fn allowed_permutations(closed: bool, n_points: usize) -> Vec<Vec<usize>> {
    if n_points == 0 {
        return vec![Vec::new()];
    }
    if !closed {
        let identity: Vec<usize> = (0..n_points).collect();
        let reversed: Vec<usize> = (0..n_points).rev().collect();
        return vec![identity, reversed];
    }
    let mut out = Vec::with_capacity(2 * n_points);
    for shift in 0..n_points {
        out.push((0..n_points).map(|j| (j + shift) % n_points).collect());
    }
    for shift in 0..n_points {
        out.push(
            (0..n_points)
                .map(|j| (shift + n_points - j) % n_points)
                .collect(),
        );
    }
    out
}

/// Relative slack under which two ordering costs count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Best ordering of `target` against `predicted` under summed Manhattan
/// distance.
///
/// When the predicted points lie on one side of the target along both axes,
/// every ordering has the same cost and the sums differ only by rounding.
/// To keep the choice stable under tiny perturbations, the earliest
/// permutation within [`TIE_TOLERANCE`] of the minimum wins. `cost` is
/// always the exact minimum.
pub fn point_match(predicted: &[Point2D], target: &[Point2D], closed: bool) -> Result<PointAssignment> {
    if predicted.len() != target.len() {
        return Err(Error::PointCountMismatch {
            predicted: predicted.len(),
            target: target.len(),
        });
    }
    let permutations = allowed_permutations(closed, target.len());
    let costs: Vec<f64> = permutations
        .iter()
        .map(|permutation| {
            predicted
                .iter()
                .zip(permutation)
                .map(|(p, &j)| manhattan_distance(*p, target[j]))
                .sum()
        })
        .collect();
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = TIE_TOLERANCE * (1.0 + min.abs());
    let chosen = costs
        .iter()
        .position(|&c| c <= min + slack)
        .unwrap_or(0);
    Ok(PointAssignment {
        permutation: permutations[chosen].clone(),
        cost: min,
    })
}

/// Focal classification cost plus the mean per-point Manhattan distance
/// under the best ordering. Points are normalized coordinates.
pub fn instance_cost(
    logits: &[f64],
    predicted: &[Point2D],
    target: &MapElement,
    focal: FocalParams,
) -> Result<f64> {
    let cls = focal_loss(logits, target.category.code(), focal);
    let position = point_match(predicted, &target.points, target.closed)?.cost;
    Ok(cls + position / target.points.len().max(1) as f64)
}

/// Rows `[i * n_points, (i + 1) * n_points)` of a `(N_inst * N_p) x 2`
/// point matrix.
pub fn instance_points(points: &Matrix, instance: usize, n_points: usize) -> Vec<Point2D> {
    (instance * n_points..(instance + 1) * n_points)
        .map(|r| Point2D::new(points.get(r, 0), points.get(r, 1)))
        .collect()
}

/// Full hierarchical matching for one scene. `targets` must already be
/// normalized and resampled to the prediction's point count.
pub fn match_instances(
    class_logits: &Matrix,
    points: &Matrix,
    targets: &[MapElement],
    focal: FocalParams,
) -> Result<Matching> {
    let n_pred = class_logits.rows;
    if targets.is_empty() {
        return Ok(Matching::empty());
    }
    if n_pred == 0 || !points.rows.is_multiple_of(n_pred) {
        return Err(Error::Shape(format!(
            "{} point rows for {} instances",
            points.rows, n_pred
        )));
    }
    let n_points = points.rows / n_pred;
    let predicted: Vec<Vec<Point2D>> = (0..n_pred)
        .map(|i| instance_points(points, i, n_points))
        .collect();

    let mut cost = Matrix::zeros(targets.len(), n_pred);
    for (g, target) in targets.iter().enumerate() {
        for (p, pts) in predicted.iter().enumerate() {
            cost.set(g, p, instance_cost(class_logits.row(p), pts, target, focal)?);
        }
    }
    let instances = hungarian(&cost)?;
    let points = instances
        .pairs
        .iter()
        .map(|&(g, p)| point_match(&predicted[p], &targets[g].points, targets[g].closed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matching { instances, points })
}

/// Normalizes and resamples metric ground truth into matching targets.
pub fn prepare_targets(
    gt: &[MapElement],
    frame: &NormalizationFrame,
    n_points: usize,
) -> Result<Vec<MapElement>> {
    gt.iter()
        .map(|e| Ok(normalize_element(&resample_uniform(e, n_points)?.element, frame)))
        .collect()
}

/// Matching against ground truth given in meters.
pub fn match_prediction(
    class_logits: &Matrix,
    points: &Matrix,
    gt: &[MapElement],
    frame: &NormalizationFrame,
    focal: FocalParams,
) -> Result<Matching> {
    if gt.is_empty() {
        return Ok(Matching::empty());
    }
    let n_points = points.rows / class_logits.rows.max(1);
    let targets = prepare_targets(gt, frame, n_points)?;
    match_instances(class_logits, points, &targets, focal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ElementCategory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_vec(rows.len(), rows[0].len(), rows.iter().flat_map(|r| r.to_vec()).collect())
    }

    /// Exhaustive minimum over all injections rows -> columns.
    fn brute_force_assignment(cost: &Matrix) -> f64 {
        fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows {
                *best = best.min(acc);
                return;
            }
            for c in 0..cost.cols {
                if !used[c] {
                    used[c] = true;
                    go(cost, row + 1, used, acc + cost.get(row, c), best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.cols], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian(&mat(&[&[1., 2.], &[2., 1.]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let b = hungarian(&mat(&[&[0., 1.], &[1., 0.]])).unwrap();
        assert_eq!(b.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(b.total_cost, 0.0);
        assert!(matches!(
            hungarian(&mat(&[&[1.], &[2.]])),
            Err(Error::TooFewPredictions { .. })
        ));
        assert!(hungarian(&Matrix::zeros(0, 3)).unwrap().pairs.is_empty());
        assert!(matches!(
            hungarian(&mat(&[&[1., f64::NAN]])),
            Err(Error::NonFiniteCost { row: 0, col: 1 })
        ));
    }

    #[test]
    fn hungarian_matches_brute_force_5x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let cost = Matrix::from_fn(5, 7, |_, _| rng.gen_range(0.0..10.0));
            let got = hungarian(&cost).unwrap();
            assert_eq!(got.pairs.len(), 5);
            let mut cols: Vec<usize> = got.pairs.iter().map(|p| p.1).collect();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), 5);
            assert_eq!(got.total_cost, brute_force_assignment(&cost));
        }
    }

    #[test]
    fn permutation_sets() {
        assert_eq!(allowed_permutations(false, 20).len(), 2);
        let closed = allowed_permutations(true, 4);
        assert_eq!(closed.len(), 8);
        assert_eq!(closed[0], vec![0, 1, 2, 3]);
        for perm in &closed {
            let mut s = perm.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
        assert!(closed.contains(&vec![0, 3, 2, 1]));
        assert!(closed.contains(&vec![2, 3, 0, 1]));
    }

    fn pts(v: &[(f64, f64)]) -> Vec<Point2D> {
        v.iter().map(|&(x, y)| Point2D::new(x, y)).collect()
    }

    #[test]
    fn point_match_cases() {
        let gt = pts(&[(0., 0.), (1., 0.), (2., 1.)]);
        let rev: Vec<Point2D> = gt.iter().rev().copied().collect();
        let m = point_match(&rev, &gt, false).unwrap();
        assert_eq!(m.permutation, vec![2, 1, 0]);
        assert_eq!(m.cost, 0.0);
        let m = point_match(&gt, &gt, false).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2]);
        assert!(matches!(
            point_match(&gt[..2], &gt, false),
            Err(Error::PointCountMismatch { .. })
        ));
    }

    /// Every ordering reachable by rotations and reflection, generated
    /// independently of `allowed_permutations`.
    fn dihedral_orderings(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let base: Vec<usize> = (0..n).collect();
        for reflect in [false, true] {
            let mut seq = base.clone();
            if reflect {
                seq.reverse();
            }
            for _ in 0..n {
                out.push(seq.clone());
                seq.rotate_left(1);
            }
        }
        out
    }

    #[test]
    fn jittered_square_matches_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let square = pts(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.)]);
        for _ in 0..50 {
            let shift = rng.gen_range(0..4);
            let mut pred: Vec<Point2D> = square
                .iter()
                .map(|p| Point2D::new(p.x + rng.gen_range(-0.2..0.2), p.y + rng.gen_range(-0.2..0.2)))
                .collect();
            pred.rotate_left(shift);
            if rng.gen_bool(0.5) {
                pred.reverse();
            }
            let got = point_match(&pred, &square, true).unwrap();
            let best = dihedral_orderings(4)
                .iter()
                .map(|perm| {
                    pred.iter()
                        .zip(perm)
                        .map(|(p, &j)| manhattan_distance(*p, square[j]))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got.cost, best);
        }
    }

    fn logits_for(category: usize, confidence: f64) -> Vec<f64> {
        // Softmax over four classes with the target at `confidence`.
        let rest = (1.0 - confidence) / 3.0;
        (0..4)
            .map(|k| if k == category { confidence.ln() } else { rest.ln() })
            .collect()
    }

    #[test]
    fn instance_cost_terms() {
        let focal = FocalParams::default();
        let target = MapElement::open(ElementCategory::StopLine, pts(&[(0.1, 0.1), (0.3, 0.1)])).unwrap();
        let exact = target.points.clone();
        let near_perfect = instance_cost(&[-50., 50., -50., -50.], &exact, &target, focal).unwrap();
        assert!(near_perfect < 1e-12);

        let half = instance_cost(&logits_for(1, 0.5), &exact, &target, focal).unwrap();
        // -alpha (1 - p)^gamma ln p at p = 0.5.
        let expected = -0.25 * 0.25 * 0.5f64.ln();
        assert!((half - expected).abs() < 1e-12);

        let shifted = pts(&[(0.2, 0.1), (0.3, 0.3)]);
        let cost = instance_cost(&logits_for(1, 0.5), &shifted, &target, focal).unwrap();
        let position = point_match(&shifted, &target.points, false).unwrap().cost / 2.0;
        assert!((cost - expected - position).abs() < 1e-12);
    }

    #[test]
    fn matching_prefers_exact_predictions() {
        let focal = FocalParams::default();
        let targets = vec![
            MapElement::open(ElementCategory::LaneDivider, pts(&[(0.1, 0.1), (0.9, 0.1)])).unwrap(),
            MapElement::open(ElementCategory::StopLine, pts(&[(0.5, 0.2), (0.5, 0.6)])).unwrap(),
        ];
        // Three predictions: junk, exact copy of target 1 reversed, exact copy of target 0.
        let logits = Matrix::from_vec(
            3,
            4,
            [logits_for(3, 0.9), logits_for(1, 0.99), logits_for(0, 0.99)].concat(),
        );
        let points = Matrix::from_vec(
            6,
            2,
            vec![0.4, 0.4, 0.45, 0.45, 0.5, 0.6, 0.5, 0.2, 0.1, 0.1, 0.9, 0.1],
        );
        let m = match_instances(&logits, &points, &targets, focal).unwrap();
        assert_eq!(m.instances.pairs, vec![(0, 2), (1, 1)]);
        assert_eq!(m.points[0].cost, 0.0);
        assert_eq!(m.points[1].cost, 0.0);
        assert_eq!(m.points[1].permutation, vec![1, 0]);
        assert!(match_instances(&logits, &points, &[], focal).unwrap().instances.pairs.is_empty());
    }
}
