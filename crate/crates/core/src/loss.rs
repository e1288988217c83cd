//! Four-term training objective: focal classification, point-to-point
//! Manhattan distance, edge direction and foreground segmentation.
//!
//! Every term is written as a value plus its gradient with respect to the
//! raw model outputs, then recorded on the autodiff tape as a scalar node.
//! Per-decoder-layer (auxiliary) terms are matched independently and
//! weighted like the final layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryGrid, ElementCategory, MapElement, COSINE_EPS};
use crate::matcher::{match_instances, Matching};
use crate::model::{ItemOutput, LayerVars, OutputVars};
use crate::nn::{sigmoid, Graph, Matrix, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_cls: f64,
    pub alpha_p2p: f64,
    pub alpha_dir: f64,
    pub alpha_seg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_cls: 2.0,
            alpha_p2p: 5.0,
            alpha_dir: 0.005,
            alpha_seg: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_cls, self.alpha_p2p, self.alpha_dir, self.alpha_seg];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::InvalidConfig("focal_alpha must lie in (0, 1)".into()));
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return Err(Error::InvalidConfig("focal_gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub p2p: f64,
    pub dir: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub p2p: f64,
    pub dir: f64,
    pub seg: f64,
    pub total: f64,
    /// Intermediate decoder layers, first to second-to-last.
    pub aux: Vec<LayerLoss>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

fn alpha_for(target: usize, alpha: f64) -> f64 {
    if target == ElementCategory::BACKGROUND {
        1.0 - alpha
    } else {
        alpha
    }
}

/// `-alpha_t (1 - p_t)^gamma ln p_t` with `p_t` the softmax probability of
/// `target`.
pub fn focal_loss(logits: &[f64], target: usize, params: FocalParams) -> f64 {
    focal_loss_with_grad(logits, target, params).0
}

pub fn focal_loss_with_grad(logits: &[f64], target: usize, params: FocalParams) -> (f64, Vec<f64>) {
    let log_p = log_softmax(logits);
    let probs: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let alpha_t = alpha_for(target, params.alpha);
    let (gamma, lp_t, p_t) = (params.gamma, log_p[target], probs[target]);
    let one_minus = (1.0 - p_t).max(0.0);
    let modulation = one_minus.powf(gamma);
    let value = -alpha_t * modulation * lp_t;

    // d/dz_k = s * (delta_tk - p_k), s = p_t * dFL/dp_t.
    let focus_term = if gamma == 0.0 || one_minus == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * p_t * lp_t
    };
    let s = -alpha_t * (modulation - focus_term);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(k, p)| s * (if k == target { 1.0 } else { 0.0 } - p))
        .collect();
    (value, grad)
}

/// Focal loss over every prediction slot: matched slots target their gt
/// category, the rest target background. Normalized by `max(N_gt, 1)`.
pub fn cls_loss_with_grad(
    class_logits: &Matrix,
    matching: &Matching,
    targets: &[MapElement],
    params: FocalParams,
) -> (f64, Matrix) {
    let mut labels = vec![ElementCategory::BACKGROUND; class_logits.rows];
    for &(g, p) in &matching.instances.pairs {
        labels[p] = targets[g].category.code();
    }
    let norm = targets.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(class_logits.rows, class_logits.cols);
    for (row, &label) in labels.iter().enumerate() {
        let (v, g) = focal_loss_with_grad(class_logits.row(row), label, params);
        total += v;
        for (o, gv) in grad.row_mut(row).iter_mut().zip(g) {
            *o = gv / norm;
        }
    }
    (total / norm, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean Manhattan distance between matched predicted points and their
/// reordered targets, over `N_gt * N_p` points.
pub fn p2p_loss_with_grad(points: &Matrix, matching: &Matching, targets: &[MapElement]) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(points.rows, points.cols);
    if targets.is_empty() {
        return (0.0, grad);
    }
    let n_points = targets[0].points.len();
    let norm = (targets.len() * n_points) as f64;
    let mut total = 0.0;
    for (&(g, p), assignment) in matching.instances.pairs.iter().zip(&matching.points) {
        for (j, &k) in assignment.permutation.iter().enumerate() {
            let row = p * n_points + j;
            let t = targets[g].points[k];
            let (dx, dy) = (points.get(row, 0) - t.x, points.get(row, 1) - t.y);
            total += dx.abs() + dy.abs();
            grad.set(row, 0, sign(dx) / norm);
            grad.set(row, 1, sign(dy) / norm);
        }
    }
    (total / norm, grad)
}

/// Negative mean cosine similarity between predicted edges and the edges
/// of the reordered target; closed elements include the closing edge.
pub fn dir_loss_with_grad(points: &Matrix, matching: &Matching, targets: &[MapElement]) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(points.rows, points.cols);
    if targets.is_empty() {
        return (0.0, grad);
    }
    let n_points = targets[0].points.len();
    let edge_count: usize = matching
        .instances
        .pairs
        .iter()
        .map(|&(g, _)| if targets[g].closed { n_points } else { n_points - 1 })
        .sum();
    if edge_count == 0 {
        return (0.0, grad);
    }
    let norm = edge_count as f64;
    let mut total = 0.0;
    for (&(g, p), assignment) in matching.instances.pairs.iter().zip(&matching.points) {
        let target = &targets[g];
        let edges = if target.closed { n_points } else { n_points - 1 };
        for j in 0..edges {
            let next = (j + 1) % n_points;
            let (r0, r1) = (p * n_points + j, p * n_points + next);
            let u = [
                points.get(r1, 0) - points.get(r0, 0),
                points.get(r1, 1) - points.get(r0, 1),
            ];
            let (a, b) = (
                target.points[assignment.permutation[j]],
                target.points[assignment.permutation[next]],
            );
            let v = [b.x - a.x, b.y - a.y];
            let (nu, nv) = (u[0].hypot(u[1]), v[0].hypot(v[1]));
            let denom = nu * nv + COSINE_EPS;
            let dot = u[0] * v[0] + u[1] * v[1];
            total += dot / denom;
            // d cos / du = v / denom - dot * |v| * u / (|u| denom^2)
            let radial = if nu > 0.0 { dot * nv / (nu * denom * denom) } else { 0.0 };
            for c in 0..2 {
                let d = -(v[c] / denom - radial * u[c]) / norm;
                grad.data[r1 * 2 + c] += d;
                grad.data[r0 * 2 + c] -= d;
            }
        }
    }
    (-total / norm, grad)
}

/// Mean binary cross-entropy with logits over all cells.
pub fn seg_loss_with_grad(logits: &[f64], mask: &BinaryGrid) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), mask.cells.len(), "segmentation shape");
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &on) in logits.iter().zip(&mask.cells) {
        let y = if on { 1.0 } else { 0.0 };
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / n);
    }
    (total / n, grad)
}

pub fn focal_value(logits: &Matrix, row: usize, target: usize, params: FocalParams) -> f64 {
    focal_loss(logits.row(row), target, params)
}

struct LayerTerms {
    loss: LayerLoss,
    weighted: Var,
}

fn layer_terms(
    g: &mut Graph,
    layer: &LayerVars,
    targets: &[MapElement],
    weights: &LossWeights,
) -> Result<LayerTerms> {
    let focal = weights.focal();
    let logits = g.value(layer.class_logits).clone();
    let points = g.value(layer.points).clone();
    let matching = match_instances(&logits, &points, targets, focal)?;

    let (cls, cls_grad) = cls_loss_with_grad(&logits, &matching, targets, focal);
    let (p2p, p2p_grad) = p2p_loss_with_grad(&points, &matching, targets);
    let (dir, dir_grad) = dir_loss_with_grad(&points, &matching, targets);

    let cls_v = g.scalar_fn(layer.class_logits, cls, cls_grad);
    let p2p_v = g.scalar_fn(layer.points, p2p, p2p_grad);
    let dir_v = g.scalar_fn(layer.points, dir, dir_grad);
    let a = g.scale(cls_v, weights.alpha_cls);
    let b = g.scale(p2p_v, weights.alpha_p2p);
    let c = g.scale(dir_v, weights.alpha_dir);
    let ab = g.add(a, b);
    let weighted = g.add(ab, c);
    Ok(LayerTerms {
        loss: LayerLoss { cls, p2p, dir },
        weighted,
    })
}

/// Records the full objective for one scene on `g`. `seg_mask` is required
/// when the output carries segmentation logits.
pub fn total_loss_graph(
    g: &mut Graph,
    output: &OutputVars,
    targets: &[MapElement],
    seg_mask: Option<&BinaryGrid>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let final_terms = layer_terms(g, &output.final_layer(), targets, weights)?;
    let mut total = final_terms.weighted;
    let mut breakdown = LossBreakdown {
        cls: final_terms.loss.cls,
        p2p: final_terms.loss.p2p,
        dir: final_terms.loss.dir,
        ..Default::default()
    };

    if let Some(seg_var) = output.seg_logits {
        let mask = seg_mask.ok_or_else(|| Error::Shape("segmentation mask missing".into()))?;
        let logits = g.value(seg_var).clone();
        let (seg, grad) = seg_loss_with_grad(&logits.data, mask);
        let seg_v = g.scalar_fn(seg_var, seg, Matrix::from_vec(logits.rows, logits.cols, grad));
        let weighted = g.scale(seg_v, weights.alpha_seg);
        total = g.add(total, weighted);
        breakdown.seg = seg;
    }

    for layer in &output.layers[..output.layers.len() - 1] {
        let terms = layer_terms(g, layer, targets, weights)?;
        total = g.add(total, terms.weighted);
        breakdown.aux.push(terms.loss);
    }
    breakdown.total = g.value(total).data[0];
    Ok((total, breakdown))
}

/// Gradients of the total loss with respect to a model output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub class_logits: Matrix,
    pub points: Matrix,
    pub seg_logits: Option<Matrix>,
    pub aux: Vec<(Matrix, Matrix)>,
}

/// Value-level loss on an already computed output. The output's
/// `points` must be normalized coordinates.
pub fn total_loss(
    output: &ItemOutput,
    targets: &[MapElement],
    seg_mask: Option<&BinaryGrid>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(total_loss_with_output_gradients(output, targets, seg_mask, weights)?.0)
}

pub fn total_loss_with_output_gradients(
    output: &ItemOutput,
    targets: &[MapElement],
    seg_mask: Option<&BinaryGrid>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGradients)> {
    // Treat the output tensors as the "parameters" of a tiny graph.
    let mut store = ParamStore::new();
    let logits_id = store.add("class_logits", output.class_logits.clone(), false);
    let points_id = store.add("points", output.points.clone(), false);
    let seg_id = output
        .seg_logits
        .as_ref()
        .map(|s| store.add("seg_logits", s.clone(), false));
    // The last aux entry duplicates the final layer.
    let intermediate = output.aux.len().saturating_sub(1);
    let aux_ids: Vec<_> = output.aux[..intermediate]
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (
                store.add(format!("aux{i}.class_logits"), l.class_logits.clone(), false),
                store.add(format!("aux{i}.points"), l.points.clone(), false),
            )
        })
        .collect();

    let mut g = Graph::new(&store);
    let mut layers: Vec<LayerVars> = aux_ids
        .iter()
        .map(|&(l, p)| LayerVars {
            class_logits: g.param(l),
            points: g.param(p),
        })
        .collect();
    layers.push(LayerVars {
        class_logits: g.param(logits_id),
        points: g.param(points_id),
    });
    let vars = OutputVars {
        layers,
        seg_logits: seg_id.map(|id| g.param(id)),
    };
    let (root, breakdown) = total_loss_graph(&mut g, &vars, targets, seg_mask, weights)?;
    let grads = g.backward(root);
    Ok((
        breakdown,
        OutputGradients {
            class_logits: grads.get(logits_id).clone(),
            points: grads.get(points_id).clone(),
            seg_logits: seg_id.map(|id| grads.get(id).clone()),
            aux: aux_ids
                .iter()
                .map(|&(l, p)| (grads.get(l).clone(), grads.get(p).clone()))
                .collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2D;
    use crate::matcher::{InstanceAssignment, PointAssignment};

    fn pts(v: &[(f64, f64)]) -> Vec<Point2D> {
        v.iter().map(|&(x, y)| Point2D::new(x, y)).collect()
    }

    /// Logits whose softmax gives `p` to class `k` and splits the rest.
    fn logits_with(k: usize, p: f64) -> Vec<f64> {
        let rest = (1.0 - p) / 3.0;
        (0..4).map(|c| if c == k { p.ln() } else { rest.ln() }).collect()
    }

    #[test]
    fn focal_examples() {
        let params = FocalParams { alpha: 0.25, gamma: 2.0 };
        assert!(focal_loss(&[60.0, -60.0, -60.0, -60.0], 0, params) < 1e-40);
        let v = focal_loss(&logits_with(0, 0.9), 0, params);
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);

        let logits = [0.3, -1.2, 2.0, 0.1];
        let ce = -log_softmax(&logits)[1];
        let plain = focal_loss(&logits, 1, FocalParams { alpha: 1.0, gamma: 0.0 });
        assert!((plain - ce).abs() < 1e-15);
        // Background targets use 1 - alpha.
        let bg = focal_loss(&logits, 3, FocalParams { alpha: 0.0, gamma: 0.0 });
        assert!((bg + log_softmax(&logits)[3]).abs() < 1e-15);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let params = FocalParams::default();
        let logits = [0.3, -1.2, 2.0, 0.1];
        for target in 0..4 {
            let (_, grad) = focal_loss_with_grad(&logits, target, params);
            for k in 0..4 {
                let h = 1e-6;
                let mut up = logits;
                up[k] += h;
                let mut down = logits;
                down[k] -= h;
                let fd = (focal_loss(&up, target, params) - focal_loss(&down, target, params)) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-8, "target {target} k {k}");
            }
        }
    }

    fn single_pair(n: usize, perm: Vec<usize>) -> Matching {
        Matching {
            instances: InstanceAssignment { pairs: vec![(0, 0)], total_cost: 0.0 },
            points: vec![PointAssignment { permutation: perm, cost: 0.0 }],
        }
        .with_len(n)
    }

    trait WithLen {
        fn with_len(self, n: usize) -> Self;
    }
    impl WithLen for Matching {
        fn with_len(self, n: usize) -> Self {
            assert_eq!(self.points[0].permutation.len(), n);
            self
        }
    }

    fn as_matrix(points: &[Point2D]) -> Matrix {
        Matrix::from_vec(points.len(), 2, points.iter().flat_map(|p| [p.x, p.y]).collect())
    }

    #[test]
    fn p2p_cases() {
        let gt = MapElement::open(ElementCategory::LaneDivider, pts(&[(0.1, 0.1), (0.2, 0.3), (0.4, 0.4)])).unwrap();
        let m = single_pair(3, vec![0, 1, 2]);
        let exact = as_matrix(&gt.points);
        assert_eq!(p2p_loss_with_grad(&exact, &m, std::slice::from_ref(&gt)).0, 0.0);
        let delta = 0.01;
        let shifted = exact.map(|v| v + delta);
        let (v, _) = p2p_loss_with_grad(&shifted, &m, std::slice::from_ref(&gt));
        assert!((v - 2.0 * delta).abs() < 1e-12);
    }

    /// Naive recomputation of the point and edge terms from per-pair loops.
    #[test]
    fn p2p_and_dir_match_naive_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let targets: Vec<MapElement> = (0..3)
            .map(|i| {
                let p = (0..n).map(|_| Point2D::new(rng.gen(), rng.gen())).collect();
                MapElement::new(ElementCategory::from_code(i).unwrap(), p, i == 2).unwrap()
            })
            .collect();
        let points = Matrix::from_fn(4 * n, 2, |_, _| rng.gen());
        let logits = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let m = match_instances(&logits, &points, &targets, FocalParams::default()).unwrap();

        let mut p2p = 0.0;
        let mut cos_sum = 0.0;
        let mut edges = 0;
        for (&(g, p), a) in m.instances.pairs.iter().zip(&m.points) {
            let pred: Vec<Point2D> = (0..n).map(|j| Point2D::new(points.get(p * n + j, 0), points.get(p * n + j, 1))).collect();
            let tgt: Vec<Point2D> = a.permutation.iter().map(|&k| targets[g].points[k]).collect();
            for j in 0..n {
                p2p += crate::geometry::manhattan_distance(pred[j], tgt[j]);
            }
            let count = if targets[g].closed { n } else { n - 1 };
            for j in 0..count {
                let k = (j + 1) % n;
                cos_sum += crate::geometry::cosine_similarity(
                    [pred[k].x - pred[j].x, pred[k].y - pred[j].y],
                    [tgt[k].x - tgt[j].x, tgt[k].y - tgt[j].y],
                );
                edges += 1;
            }
        }
        let (got_p2p, _) = p2p_loss_with_grad(&points, &m, &targets);
        let (got_dir, _) = dir_loss_with_grad(&points, &m, &targets);
        assert!((got_p2p - p2p / (3 * n) as f64).abs() < 1e-12);
        assert!((got_dir + cos_sum / edges as f64).abs() < 1e-12);
    }

    #[test]
    fn dir_cases() {
        let gt = MapElement::open(ElementCategory::LaneDivider, pts(&[(0.1, 0.1), (0.3, 0.1), (0.3, 0.4)])).unwrap();
        let m = single_pair(3, vec![0, 1, 2]);
        let same = as_matrix(&gt.points);
        // The cosine epsilon costs about 1e-7 on edges this short.
        assert!((dir_loss_with_grad(&same, &m, std::slice::from_ref(&gt)).0 + 1.0).abs() < 1e-6);

        // Rotate each edge by 90 degrees.
        let ortho = as_matrix(&pts(&[(0.5, 0.5), (0.5, 0.7), (0.2, 0.7)]));
        assert!(dir_loss_with_grad(&ortho, &m, std::slice::from_ref(&gt)).0.abs() < 1e-12);

        let reversed = as_matrix(&pts(&[(0.3, 0.4), (0.1, 0.4), (0.1, 0.1)]));
        assert!((dir_loss_with_grad(&reversed, &m, &[gt]).0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn seg_cases() {
        let mut mask = BinaryGrid::new(2, 2);
        mask.cells = vec![true, false, false, true];
        let saturated = [40.0, -40.0, -40.0, 40.0];
        assert!(seg_loss_with_grad(&saturated, &mask).0 < 1e-15);
        let (zero, _) = seg_loss_with_grad(&[0.0; 4], &mask);
        assert!((zero - 2f64.ln()).abs() < 1e-15);

        let logits: [f64; 4] = [0.3, -2.0, 1.5, 0.0];
        let naive: f64 = logits
            .iter()
            .zip(&mask.cells)
            .map(|(z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                if y { -p.ln() } else { -(1.0 - p).ln() }
            })
            .sum::<f64>()
            / 4.0;
        assert!((seg_loss_with_grad(&logits, &mask).0 - naive).abs() < 1e-14);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights { alpha_p2p: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossWeights { focal_alpha: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
