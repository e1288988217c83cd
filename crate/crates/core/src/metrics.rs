//! Chamfer-distance average precision.
//!
//! Predictions are ranked by confidence and greedily matched, one to one,
//! to ground truth within a Chamfer tolerance. AP is the area under the
//! all-point interpolated precision/recall curve, averaged over the
//! tolerances; mAP averages the per-category APs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{chamfer_distance, clip_element, resample_uniform, ElementCategory, MapElement, NormalizationFrame};
use crate::model::ScoredElement;

/// Chamfer tolerances in meters.
pub const THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
/// Points per element before computing Chamfer distances.
pub const EVAL_POINTS: usize = 100;

/// Clips elements to the evaluation window, dropping those fully outside.
pub fn clip_to_window(elements: &[MapElement], window: &NormalizationFrame) -> Vec<MapElement> {
    elements.iter().flat_map(|e| clip_element(e, window)).collect()
}

fn clip_scored(elements: &[ScoredElement], window: &NormalizationFrame) -> Vec<ScoredElement> {
    elements
        .iter()
        .flat_map(|s| {
            clip_element(&s.element, window).into_iter().map(|element| ScoredElement {
                element,
                confidence: s.confidence,
            })
        })
        .collect()
}

/// Area under the all-point interpolated precision/recall curve for a
/// ranked list of hits. `None` when both lists are empty.
pub fn average_precision(hits: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if hits.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: best precision at any equal or higher recall.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// One ranked detection list entry after matching.
struct Ranked {
    confidence: f64,
    /// Chamfer distance to every gt of its scene.
    distances: Vec<f64>,
    scene: usize,
}

fn resample_points(element: &MapElement) -> Result<Vec<crate::geometry::Point2D>> {
    Ok(resample_uniform(element, EVAL_POINTS)?.element.points)
}

/// Ranks pooled predictions and computes distances once; reused for every
/// tolerance.
fn rank(scenes: &[(&[ScoredElement], &[MapElement])]) -> Result<(Vec<Ranked>, Vec<usize>)> {
    let mut ranked = Vec::new();
    let mut gt_counts = Vec::with_capacity(scenes.len());
    for (scene, (preds, gts)) in scenes.iter().enumerate() {
        let gt_points = gts.iter().map(resample_points).collect::<Result<Vec<_>>>()?;
        for p in preds.iter() {
            let points = resample_points(&p.element)?;
            let distances = gt_points
                .iter()
                .map(|g| chamfer_distance(&points, g))
                .collect::<Result<Vec<_>>>()?;
            ranked.push(Ranked {
                confidence: p.confidence,
                distances,
                scene,
            });
        }
        gt_counts.push(gts.len());
    }
    // Stable: ties keep input order.
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok((ranked, gt_counts))
}

fn greedy_hits(ranked: &[Ranked], gt_counts: &[usize], tau: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
    ranked
        .iter()
        .map(|r| {
            let best = r
                .distances
                .iter()
                .enumerate()
                .filter(|(g, d)| !used[r.scene][*g] && **d < tau)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(g, _)| g);
            if let Some(g) = best {
                used[r.scene][g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Per-threshold counts and AP for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: ElementCategory,
    /// AP at each tolerance in `THRESHOLDS`; `None` if undefined.
    pub ap_per_threshold: Vec<Option<f64>>,
    pub true_positives: Vec<usize>,
    pub gt_count: usize,
    pub prediction_count: usize,
}

impl CategoryResult {
    /// Mean over tolerances; `None` when there was nothing to evaluate.
    pub fn ap(&self) -> Option<f64> {
        mean_defined(&self.ap_per_threshold)
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// AP of one category for pooled scenes at each tolerance.
pub fn evaluate_category(
    scenes: &[(&[ScoredElement], &[MapElement])],
    thresholds: &[f64],
) -> Result<(Vec<Option<f64>>, Vec<usize>)> {
    let (ranked, gt_counts) = rank(scenes)?;
    let n_gt: usize = gt_counts.iter().sum();
    let mut aps = Vec::with_capacity(thresholds.len());
    let mut tps = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let hits = greedy_hits(&ranked, &gt_counts, tau);
        tps.push(hits.iter().filter(|h| **h).count());
        aps.push(average_precision(&hits, n_gt));
    }
    Ok((aps, tps))
}

/// AP at a single tolerance for one scene and one category. Both lists
/// empty gives 1.
pub fn ap_single_category(predictions: &[ScoredElement], gts: &[MapElement], tau: f64) -> Result<f64> {
    let (aps, _) = evaluate_category(&[(predictions, gts)], &[tau])?;
    Ok(aps[0].unwrap_or(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub categories: Vec<CategoryResult>,
    /// Mean of the defined category APs.
    pub map: f64,
    pub scene_count: usize,
}

impl EvalReport {
    pub fn category(&self, category: ElementCategory) -> &CategoryResult {
        self.categories
            .iter()
            .find(|c| c.category == category)
            .expect("every category is reported")
    }

    pub fn ap(&self, category: ElementCategory) -> Option<f64> {
        self.category(category).ap()
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenes: {}", self.scene_count);
        let header: Vec<String> = self.thresholds.iter().map(|t| format!("AP@{t}")).collect();
        let _ = writeln!(out, "{:<14} {}  {:>7}  {:>5} {:>5}", "category", header.join("  "), "AP", "gt", "pred");
        for c in &self.categories {
            let cells: Vec<String> = c
                .ap_per_threshold
                .iter()
                .map(|a| a.map_or("    n/a".to_string(), |v| format!("{v:>7.4}")))
                .collect();
            let ap = c.ap().map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<14} {}  {:>7}  {:>5} {:>5}",
                c.category.name(),
                cells.join("  "),
                ap,
                c.gt_count,
                c.prediction_count
            );
        }
        let _ = writeln!(out, "mAP: {:.4}", self.map);
        out
    }

    /// `key=value` lines, one metric per line, stable order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenes={}", self.scene_count);
        let _ = writeln!(out, "mAP={}", self.map);
        for c in &self.categories {
            let name = c.category.name();
            let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
            let _ = writeln!(out, "AP.{name}={}", fmt(c.ap()));
            for (i, t) in self.thresholds.iter().enumerate() {
                let _ = writeln!(out, "AP.{name}@{t}={}", fmt(c.ap_per_threshold[i]));
                let _ = writeln!(out, "tp.{name}@{t}={}", c.true_positives[i]);
            }
            let _ = writeln!(out, "gt.{name}={}", c.gt_count);
            let _ = writeln!(out, "pred.{name}={}", c.prediction_count);
        }
        out
    }
}

/// Mean of the defined values; categories with neither ground truth nor
/// predictions are left out. 1 when nothing is defined.
pub fn mean_average_precision(aps: &[Option<f64>]) -> f64 {
    mean_defined(aps).unwrap_or(1.0)
}

/// Pools all scenes per category. `predictions[i]` and `gts[i]` belong to
/// the same scene; everything is clipped to that scene's `windows[i]`.
pub fn evaluate(
    predictions: &[Vec<ScoredElement>],
    gts: &[Vec<MapElement>],
    windows: &[NormalizationFrame],
    thresholds: &[f64],
) -> Result<EvalReport> {
    assert_eq!(predictions.len(), gts.len(), "prediction and gt scene counts");
    assert_eq!(predictions.len(), windows.len(), "window count");
    let clipped_preds: Vec<Vec<ScoredElement>> = predictions
        .iter()
        .zip(windows)
        .map(|(p, w)| clip_scored(p, w))
        .collect();
    let clipped_gts: Vec<Vec<MapElement>> = gts
        .iter()
        .zip(windows)
        .map(|(g, w)| clip_to_window(g, w))
        .collect();

    let mut categories = Vec::with_capacity(ElementCategory::COUNT);
    for category in ElementCategory::ALL {
        let per_scene_preds: Vec<Vec<ScoredElement>> = clipped_preds
            .iter()
            .map(|p| p.iter().filter(|s| s.element.category == category).cloned().collect())
            .collect();
        let per_scene_gts: Vec<Vec<MapElement>> = clipped_gts
            .iter()
            .map(|g| g.iter().filter(|e| e.category == category).cloned().collect())
            .collect();
        let scenes: Vec<(&[ScoredElement], &[MapElement])> = per_scene_preds
            .iter()
            .zip(&per_scene_gts)
            .map(|(p, g)| (p.as_slice(), g.as_slice()))
            .collect();
        let (aps, tps) = evaluate_category(&scenes, thresholds)?;
        categories.push(CategoryResult {
            category,
            ap_per_threshold: aps,
            true_positives: tps,
            gt_count: per_scene_gts.iter().map(Vec::len).sum(),
            prediction_count: per_scene_preds.iter().map(Vec::len).sum(),
        });
    }
    let map = mean_average_precision(&categories.iter().map(CategoryResult::ap).collect::<Vec<_>>());
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        categories,
        map,
        scene_count: predictions.len(),
    })
}
